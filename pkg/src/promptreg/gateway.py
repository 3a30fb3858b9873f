"""Prompt-to-region contract: requests, responses, box filtering, backends.

A backend answers "image + text prompts -> boxes, masks, embeddings".  Two
backends exist: the in-process deterministic fixture backend (see
:mod:`promptreg.fixture`) and an out-of-process sidecar reached through a
directory-based exchange protocol.  Candidate regions come back unfiltered;
:func:`filter_boxes` is a separate pure operation so the size filter stays
independently testable.
"""

from __future__ import annotations

import json
import shlex
import subprocess
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from promptreg import volio
from promptreg.volio import BinaryMask, BoundingBox, EmbeddingGrid, Volume


class BackendError(RuntimeError):
    """Backend launch, handshake, or response validation failure."""


@dataclass(frozen=True)
class PromptRequest:
    """One prompting job against one image.

    ``slice_range`` is a half-open ``[lo, hi)`` interval of slice indices for
    3D volumes; ``None`` means every slice.  ``mode`` selects per-slice 2D
    detection (``"slices"``, the canonical form) or whole-volume 3D detection
    (``"volume"``, fixture backend only).
    """

    image: str | Path
    prompts: tuple[str, ...]
    source: str = "fix"
    slice_range: tuple[int, int] | None = None
    backend: str = "fixture"
    mode: str = "slices"
    seed: int = 0
    sidecar_command: tuple[str, ...] | None = None
    exchange_dir: str | Path | None = None

    def __post_init__(self):
        prompts = tuple(str(p) for p in self.prompts)
        if not prompts or any(not p.strip() for p in prompts):
            raise ValueError("prompts must be non-empty and non-blank")
        object.__setattr__(self, "prompts", prompts)
        if self.source not in ("fix", "mov"):
            raise ValueError(f"source must be 'fix' or 'mov', got {self.source!r}")
        if self.mode not in ("slices", "volume"):
            raise ValueError(f"mode must be 'slices' or 'volume', got {self.mode!r}")
        if self.backend not in ("fixture", "sidecar"):
            raise ValueError(f"unknown backend {self.backend!r}")


@dataclass(frozen=True)
class RoiRecord:
    """One prompted region: box, full-slice (or full-volume) mask, provenance."""

    id: int
    box: BoundingBox
    mask: BinaryMask
    prompt: str
    source: str
    slice_index: int | None = None


@dataclass(frozen=True)
class PromptResponse:
    """All candidate regions for one image plus its embedding grids.

    ``embeddings`` maps slice index (``None`` for 2D images or volume mode)
    to one :class:`EmbeddingGrid`; every grid shares one channel count.
    """

    source: str
    image_dims: tuple[int, ...]
    image_spacing: tuple[float, ...]
    records: tuple[RoiRecord, ...]
    embeddings: tuple[tuple[int | None, EmbeddingGrid], ...]

    def __post_init__(self):
        channels = {grid.channels for _, grid in self.embeddings}
        if len(channels) > 1:
            raise BackendError(f"embedding channel mismatch: {sorted(channels)}")
        for rec in self.records:
            if rec.source != self.source:
                raise BackendError("record source tag disagrees with response")

    @property
    def channels(self) -> int | None:
        return self.embeddings[0][1].channels if self.embeddings else None

    def embedding_for(self, slice_index: int | None) -> EmbeddingGrid:
        for idx, grid in self.embeddings:
            if idx == slice_index:
                return grid
        raise KeyError(f"no embedding grid for slice {slice_index}")

    def records_for(self, prompt: str) -> tuple[RoiRecord, ...]:
        return tuple(r for r in self.records if r.prompt == prompt)


@dataclass(frozen=True)
class FilterPolicy:
    """Box size filter: keep boxes whose area fraction of the slice (2D) or
    volume (3D) extent lies in [min, max] and whose score clears ``min_score``.
    """

    min_area_fraction: float = 0.001
    max_area_fraction: float = 0.5
    min_score: float = 0.0

    def __post_init__(self):
        if not (0.0 < self.min_area_fraction < self.max_area_fraction <= 1.0):
            raise ValueError(
                "need 0 < min_area_fraction < max_area_fraction <= 1, got "
                f"({self.min_area_fraction}, {self.max_area_fraction})"
            )
        if not (0.0 <= self.min_score <= 1.0):
            raise ValueError(f"min_score must be in [0, 1], got {self.min_score}")

    def keeps(self, record: RoiRecord, image_dims: tuple[int, ...]) -> bool:
        if record.slice_index is None:
            extent = int(np.prod(image_dims))
        else:
            extent = int(np.prod(image_dims[:2]))
        fraction = record.box.extent / extent
        return (
            self.min_area_fraction <= fraction <= self.max_area_fraction
            and record.box.score >= self.min_score
        )

    def to_json(self) -> dict:
        return {
            "min_area_fraction": self.min_area_fraction,
            "max_area_fraction": self.max_area_fraction,
            "min_score": self.min_score,
        }


def filter_boxes(response: PromptResponse, policy: FilterPolicy) -> PromptResponse:
    """Keep exactly the records the policy admits; order and ids preserved."""
    kept = tuple(
        r for r in response.records if policy.keeps(r, response.image_dims)
    )
    return replace(response, records=kept)


def validate_response(response: PromptResponse) -> None:
    """Check structural invariants every backend must honor."""
    for rec in response.records:
        support = np.argwhere(rec.mask.voxels > 0)
        if support.size and not (
            np.all(support >= np.array(rec.box.lo))
            and np.all(support < np.array(rec.box.hi))
        ):
            raise BackendError(f"mask of record {rec.id} escapes its bounding box")
        if rec.slice_index is None:
            if rec.mask.dims != response.image_dims:
                raise BackendError(f"record {rec.id} mask dims mismatch image")
        else:
            if rec.mask.dims != response.image_dims[:2]:
                raise BackendError(f"record {rec.id} mask dims mismatch slice")


def fetch_rois(request: PromptRequest) -> PromptResponse:
    """Run the configured backend and return all candidates, unfiltered."""
    if request.backend == "fixture":
        from promptreg import fixture

        return fixture.fixture_fetch(request)
    return _sidecar_fetch(request)


# --- sidecar exchange protocol -------------------------------------------
#
# The engine writes <dir>/request.json and launches the sidecar command with
# that path as its single argument.  The sidecar exits 0 and writes
# <output_dir>/response.json referencing mask/embedding files in container
# format.  Nonzero exit or a missing/bad manifest is a backend error.

SIDECAR_TIMEOUT_S = 600.0


def write_request_manifest(request: PromptRequest, exchange_dir: Path) -> Path:
    exchange_dir.mkdir(parents=True, exist_ok=True)
    out_dir = exchange_dir / "response"
    out_dir.mkdir(exist_ok=True)
    manifest = {
        "image": str(volio.header_path(request.image).resolve()),
        "prompts": list(request.prompts),
        "slice_range": list(request.slice_range) if request.slice_range else None,
        "output_dir": str(out_dir.resolve()),
    }
    req_path = exchange_dir / "request.json"
    req_path.write_text(volio.canonical_json(manifest))
    return req_path


def _sidecar_fetch(request: PromptRequest) -> PromptResponse:
    if not request.sidecar_command:
        raise BackendError("sidecar backend selected but no command configured")
    image = volio.read_volume(request.image)
    if request.exchange_dir is not None:
        exchange_dir = Path(request.exchange_dir)
    else:
        exchange_dir = volio.header_path(request.image).parent / (
            f"exchange_{request.source}"
        )
    req_path = write_request_manifest(request, exchange_dir)
    command = list(request.sidecar_command) + [str(req_path)]
    try:
        proc = subprocess.run(
            command, capture_output=True, text=True, timeout=SIDECAR_TIMEOUT_S
        )
    except OSError as exc:
        raise BackendError(f"sidecar launch failed: {exc}") from exc
    except subprocess.TimeoutExpired as exc:
        raise BackendError(f"sidecar timed out after {SIDECAR_TIMEOUT_S}s") from exc
    out_dir = exchange_dir / "response"
    if proc.returncode != 0:
        detail = _sidecar_error_detail(out_dir, proc.stderr)
        raise BackendError(f"sidecar exited {proc.returncode}: {detail}")
    return read_response_manifest(out_dir, request, image)


def _sidecar_error_detail(out_dir: Path, stderr: str) -> str:
    err_file = out_dir / "error.json"
    if err_file.is_file():
        try:
            err = json.loads(err_file.read_text())
            return f"[{err.get('stage', '?')}] {err.get('message', '')}"
        except json.JSONDecodeError:
            pass
    return (stderr or "").strip()[-500:] or "no diagnostics"


def read_response_manifest(
    out_dir: Path, request: PromptRequest, image: Volume
) -> PromptResponse:
    manifest_path = out_dir / "response.json"
    if not manifest_path.is_file():
        raise BackendError(f"sidecar wrote no manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        rois = manifest["rois"]
        embeddings = manifest["embeddings"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise BackendError(f"malformed response manifest: {exc}") from exc

    records = []
    try:
        for rid, roi in enumerate(rois):
            x0, y0, x1, y1 = (int(v) for v in roi["box"])
            slice_index = roi["slice"]
            slice_index = None if slice_index is None else int(slice_index)
            box = BoundingBox(
                lo=(x0, y0),
                hi=(x1, y1),
                score=float(roi["score"]),
                prompt=str(roi["prompt"]),
                slice_index=slice_index,
            )
            mask = volio.read_mask(out_dir / roi["mask"])
            records.append(
                RoiRecord(
                    id=rid,
                    box=box,
                    mask=mask,
                    prompt=box.prompt,
                    source=request.source,
                    slice_index=slice_index,
                )
            )
        grids = []
        for entry in embeddings:
            idx = entry["slice"]
            idx = None if idx is None else int(idx)
            grids.append((idx, volio.read_embedding(out_dir / entry["file"])))
    except (volio.FormatError, KeyError, TypeError, ValueError) as exc:
        raise BackendError(f"bad response payload: {exc}") from exc

    response = PromptResponse(
        source=request.source,
        image_dims=image.dims,
        image_spacing=image.spacing,
        records=tuple(records),
        embeddings=tuple(grids),
    )
    validate_response(response)
    return response


def parse_sidecar_command(command) -> tuple[str, ...]:
    if command is None:
        return ()
    if isinstance(command, str):
        return tuple(shlex.split(command))
    return tuple(str(c) for c in command)
