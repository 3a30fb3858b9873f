"""End-to-end runs: prompts -> regions -> pairs -> optional field -> report.

Every stage writes its artifact into the output directory before the next
stage starts, all JSON goes through the canonical encoder, and nothing
records clocks or hostnames, so two runs of one configuration produce
byte-identical trees.  Each stage also reads back exactly what the previous
stage wrote, which is what lets the CLI resume from any stage directory.

Region manifests reuse the sidecar response schema (plus image dims and
spacing, which resumed stages need), so a stored stage is indistinguishable
from a backend answer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from promptreg import correspondence, ddf, metrics, volio
from promptreg.correspondence import CorrespondenceSet, MatchedPair
from promptreg.gateway import (
    BackendError,
    FilterPolicy,
    PromptRequest,
    PromptResponse,
    RoiRecord,
    fetch_rois,
    filter_boxes,
    parse_sidecar_command,
    validate_response,
)
from promptreg.volio import BinaryMask, BoundingBox

DEFAULT_PROMPTS = ("hole", "head", "prostate", "dog", "correspond", "middle")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_DIVERGED = 4


class ConfigError(ValueError):
    """Invalid configuration or unreadable stage input."""


class DivergenceError(RuntimeError):
    """The field optimization went non-finite; artifacts are kept."""


def _take(mapping: dict, allowed: tuple[str, ...], where: str) -> None:
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def _resolve(path, base_dir: Path | None) -> str:
    p = Path(path)
    if not p.is_absolute() and base_dir is not None:
        p = base_dir / p
    return str(p)


@dataclass(frozen=True)
class MatchingConfig:
    tau: float = correspondence.DEFAULT_TAU
    strategy: str = "mutual_nn"
    metric: str = "cosine"
    cross_prompt: bool = False
    slice_window: int | None = None

    @classmethod
    def from_json(cls, data: dict) -> "MatchingConfig":
        _take(data, ("tau", "strategy", "metric", "cross_prompt", "slice_window"),
              "matching")
        base = cls()
        window = data.get("slice_window", base.slice_window)
        return cls(
            tau=float(data.get("tau", base.tau)),
            strategy=str(data.get("strategy", base.strategy)),
            metric=str(data.get("metric", base.metric)),
            cross_prompt=bool(data.get("cross_prompt", base.cross_prompt)),
            slice_window=None if window is None else int(window),
        )

    def to_json(self) -> dict:
        return {
            "tau": self.tau,
            "strategy": self.strategy,
            "metric": self.metric,
            "cross_prompt": self.cross_prompt,
            "slice_window": self.slice_window,
        }


@dataclass(frozen=True)
class DdfConfig:
    enabled: bool = False
    lam: float = 0.1
    eta: float = 1.0
    iters: int = 200
    backtracking: bool = True
    smooth_ramp: float = 2.4

    @classmethod
    def from_json(cls, data: dict) -> "DdfConfig":
        _take(data, ("enabled", "lambda", "eta", "iters", "backtracking",
                     "smooth_ramp"), "ddf")
        base = cls()
        return cls(
            enabled=bool(data.get("enabled", base.enabled)),
            lam=float(data.get("lambda", base.lam)),
            eta=float(data.get("eta", base.eta)),
            iters=int(data.get("iters", base.iters)),
            backtracking=bool(data.get("backtracking", base.backtracking)),
            smooth_ramp=float(data.get("smooth_ramp", base.smooth_ramp)),
        )

    def to_json(self) -> dict:
        return {
            "enabled": self.enabled,
            "lambda": self.lam,
            "eta": self.eta,
            "iters": self.iters,
            "backtracking": self.backtracking,
            "smooth_ramp": self.smooth_ramp,
        }

    def optimizer_config(self) -> ddf.OptimizeConfig:
        return ddf.OptimizeConfig(
            lam=self.lam,
            eta=self.eta,
            iters=self.iters,
            backtracking=self.backtracking,
            smooth_ramp=self.smooth_ramp,
        )


@dataclass(frozen=True)
class GtEntry:
    prompt: str
    fix: str
    mov: str

    @classmethod
    def from_json(cls, data: dict, base_dir: Path | None) -> "GtEntry":
        _take(data, ("prompt", "fix", "mov"), "evaluation.gt entry")
        try:
            return cls(
                prompt=str(data["prompt"]),
                fix=_resolve(data["fix"], base_dir),
                mov=_resolve(data["mov"], base_dir),
            )
        except KeyError as exc:
            raise ConfigError(f"evaluation.gt entry missing {exc}") from exc

    def to_json(self) -> dict:
        return {"prompt": self.prompt, "fix": self.fix, "mov": self.mov}


@dataclass(frozen=True)
class EvaluationConfig:
    gt: tuple[GtEntry, ...] = ()
    overlap_thresh: float = metrics.DEFAULT_OVERLAP_THRESH
    mode: str = "2d"

    def __post_init__(self):
        if self.mode not in ("2d", "3d"):
            raise ConfigError(f"evaluation.mode must be '2d' or '3d', got {self.mode!r}")

    @classmethod
    def from_json(cls, data: dict, base_dir: Path | None) -> "EvaluationConfig":
        _take(data, ("gt", "overlap_thresh", "mode"), "evaluation")
        base = cls()
        return cls(
            gt=tuple(
                GtEntry.from_json(entry, base_dir) for entry in data.get("gt", ())
            ),
            overlap_thresh=float(data.get("overlap_thresh", base.overlap_thresh)),
            mode=str(data.get("mode", base.mode)),
        )

    def to_json(self) -> dict:
        return {
            "gt": [entry.to_json() for entry in self.gt],
            "overlap_thresh": self.overlap_thresh,
            "mode": self.mode,
        }


@dataclass(frozen=True)
class BackendConfig:
    id: str = "fixture"
    command: tuple[str, ...] = ()
    exchange_dir: str | None = None

    @classmethod
    def from_json(cls, data: dict, base_dir: Path | None) -> "BackendConfig":
        _take(data, ("id", "command", "exchange_dir"), "backend")
        exchange = data.get("exchange_dir")
        return cls(
            id=str(data.get("id", "fixture")),
            command=parse_sidecar_command(data.get("command")),
            exchange_dir=None if exchange is None else _resolve(exchange, base_dir),
        )

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "command": list(self.command),
            "exchange_dir": self.exchange_dir,
        }


@dataclass(frozen=True)
class PipelineConfig:
    fixed_image: str
    moving_image: str
    prompts: tuple[str, ...] = DEFAULT_PROMPTS
    mode: str = "slices"
    slice_range: tuple[int, int] | None = None
    filter: FilterPolicy = FilterPolicy()
    matching: MatchingConfig = MatchingConfig()
    ddf: DdfConfig = DdfConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    backend: BackendConfig = BackendConfig()
    seed: int = 0

    def __post_init__(self):
        if not self.prompts:
            raise ConfigError("prompt set must be non-empty")
        if self.mode not in ("slices", "volume"):
            raise ConfigError(f"mode must be 'slices' or 'volume', got {self.mode!r}")
        if self.backend.id not in ("fixture", "sidecar"):
            raise ConfigError(f"unknown backend id {self.backend.id!r}")
        if self.backend.id == "sidecar" and not self.backend.command:
            raise ConfigError("sidecar backend needs backend.command")

    @classmethod
    def from_json(cls, data: dict, base_dir: Path | None = None) -> "PipelineConfig":
        _take(
            data,
            ("scene", "fixed_image", "moving_image", "prompts", "mode",
             "slice_range", "filter", "matching", "ddf", "evaluation",
             "backend", "seed"),
            "config",
        )
        data = dict(data)
        if "scene" in data:
            data = _expand_scene(data, base_dir)
        for key in ("fixed_image", "moving_image"):
            if key not in data:
                raise ConfigError(f"config is missing {key!r}")
        filter_data = data.get("filter", {})
        _take(filter_data, ("min_area_fraction", "max_area_fraction", "min_score"),
              "filter")
        try:
            policy = FilterPolicy(**filter_data)
        except ValueError as exc:
            raise ConfigError(f"bad filter policy: {exc}") from exc
        slice_range = data.get("slice_range")
        return cls(
            fixed_image=_resolve(data["fixed_image"], base_dir),
            moving_image=_resolve(data["moving_image"], base_dir),
            prompts=tuple(str(p) for p in data.get("prompts", DEFAULT_PROMPTS)),
            mode=str(data.get("mode", "slices")),
            slice_range=None if slice_range is None else (
                int(slice_range[0]), int(slice_range[1])),
            filter=policy,
            matching=MatchingConfig.from_json(data.get("matching", {})),
            ddf=DdfConfig.from_json(data.get("ddf", {})),
            evaluation=EvaluationConfig.from_json(data.get("evaluation", {}),
                                                  base_dir),
            backend=BackendConfig.from_json(data.get("backend", {}), base_dir),
            seed=int(data.get("seed", 0)),
        )

    def to_json(self) -> dict:
        return {
            "fixed_image": self.fixed_image,
            "moving_image": self.moving_image,
            "prompts": list(self.prompts),
            "mode": self.mode,
            "slice_range": None if self.slice_range is None else list(self.slice_range),
            "filter": self.filter.to_json(),
            "matching": self.matching.to_json(),
            "ddf": self.ddf.to_json(),
            "evaluation": self.evaluation.to_json(),
            "backend": self.backend.to_json(),
            "seed": self.seed,
        }


def _expand_scene(data: dict, base_dir: Path | None) -> dict:
    """Fill image paths and ground truth from a generated scene directory."""
    scene_dir = Path(_resolve(data.pop("scene"), base_dir))
    manifest_path = scene_dir / "scene.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read scene manifest {manifest_path}: {exc}") from exc
    data.setdefault("fixed_image", str(scene_dir / manifest["fixed"]))
    data.setdefault("moving_image", str(scene_dir / manifest["moving"]))
    evaluation = dict(data.get("evaluation", {}))
    evaluation.setdefault(
        "gt",
        [
            {
                "prompt": shape["prompt"],
                "fix": str(scene_dir / shape["mask_fix"]),
                "mov": str(scene_dir / shape["mask_mov"]),
            }
            for shape in manifest["shapes"]
        ],
    )
    data["evaluation"] = evaluation
    return data


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} is not a JSON object")
    return PipelineConfig.from_json(data, base_dir=path.parent)


# --- region artifact directories -------------------------------------------


def write_response_dir(response: PromptResponse, out_dir: Path) -> Path:
    """Store a prompt response as a sidecar-schema manifest plus containers."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rois = []
    for i, rec in enumerate(response.records):
        name = f"m_{i:04d}"
        volio.write_mask(rec.mask, out_dir / name)
        rois.append(
            {
                "prompt": rec.prompt,
                "slice": rec.slice_index,
                "box": [*rec.box.lo, *rec.box.hi],
                "score": rec.box.score,
                "mask": name + volio.HEADER_SUFFIX,
            }
        )
    embeddings = []
    for j, (idx, grid) in enumerate(response.embeddings):
        name = f"e_{j:04d}"
        volio.write_embedding(grid, out_dir / name)
        embeddings.append({"slice": idx, "file": name + volio.HEADER_SUFFIX})
    manifest = {
        "source": response.source,
        "image_dims": list(response.image_dims),
        "image_spacing": list(response.image_spacing),
        "rois": rois,
        "embeddings": embeddings,
    }
    manifest_path = out_dir / "response.json"
    manifest_path.write_text(volio.canonical_json(manifest))
    return manifest_path


def read_response_dir(out_dir: Path) -> PromptResponse:
    """Load a stored response; inverse of :func:`write_response_dir`."""
    manifest_path = Path(out_dir) / "response.json"
    try:
        manifest = json.loads(manifest_path.read_text())
        source = manifest["source"]
        dims = tuple(int(n) for n in manifest["image_dims"])
        spacing = tuple(float(s) for s in manifest["image_spacing"])
        records = []
        for rid, roi in enumerate(manifest["rois"]):
            bounds = [int(v) for v in roi["box"]]
            half = len(bounds) // 2
            slice_index = roi["slice"]
            slice_index = None if slice_index is None else int(slice_index)
            box = BoundingBox(
                lo=tuple(bounds[:half]),
                hi=tuple(bounds[half:]),
                score=float(roi["score"]),
                prompt=str(roi["prompt"]),
                slice_index=slice_index,
            )
            records.append(
                RoiRecord(
                    id=rid,
                    box=box,
                    mask=volio.read_mask(Path(out_dir) / roi["mask"]),
                    prompt=box.prompt,
                    source=source,
                    slice_index=slice_index,
                )
            )
        grids = []
        for entry in manifest["embeddings"]:
            idx = entry["slice"]
            idx = None if idx is None else int(idx)
            grids.append((idx, volio.read_embedding(Path(out_dir) / entry["file"])))
        response = PromptResponse(
            source=source,
            image_dims=dims,
            image_spacing=spacing,
            records=tuple(records),
            embeddings=tuple(grids),
        )
        validate_response(response)
        return response
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError,
            volio.FormatError, BackendError) as exc:
        raise ConfigError(f"bad region artifact at {out_dir}: {exc}") from exc


# --- stages -----------------------------------------------------------------


def stage_fetch(config: PipelineConfig, out_dir: Path):
    """Query the backend for both images; store both responses."""
    responses = {}
    for source, image in (("fix", config.fixed_image),
                          ("mov", config.moving_image)):
        if config.backend.exchange_dir is not None:
            exchange = Path(config.backend.exchange_dir) / source
        else:
            exchange = out_dir / "exchange" / source
        request = PromptRequest(
            image=image,
            prompts=config.prompts,
            source=source,
            slice_range=config.slice_range,
            backend=config.backend.id,
            mode=config.mode,
            seed=config.seed,
            sidecar_command=config.backend.command or None,
            exchange_dir=exchange,
        )
        response = fetch_rois(request)
        write_response_dir(response, out_dir / "rois" / source)
        responses[source] = response
    return responses["fix"], responses["mov"]


def stage_filter(config: PipelineConfig, fix_resp: PromptResponse,
                 mov_resp: PromptResponse, out_dir: Path):
    """Apply the box policy; record which candidate ids survived."""
    kept_fix = filter_boxes(fix_resp, config.filter)
    kept_mov = filter_boxes(mov_resp, config.filter)
    blob = {
        "policy": config.filter.to_json(),
        "fix_kept": [r.id for r in kept_fix.records],
        "mov_kept": [r.id for r in kept_mov.records],
    }
    (out_dir / "filtered.json").write_text(volio.canonical_json(blob))
    return kept_fix, kept_mov


def stage_match(config: PipelineConfig, fix_resp: PromptResponse,
                mov_resp: PromptResponse, out_dir: Path) -> CorrespondenceSet:
    try:
        corr = correspondence.match_pipeline(
            fix_resp,
            mov_resp,
            tau=config.matching.tau,
            strategy=config.matching.strategy,
            metric=config.matching.metric,
            cross_prompt=config.matching.cross_prompt,
            slice_window=config.matching.slice_window,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    (out_dir / "correspondence.json").write_text(
        volio.canonical_json(corr.to_json())
    )
    return corr


def _embed_slice(mask: BinaryMask, dims: tuple[int, ...],
                 spacing: tuple[float, ...], slice_index: int | None) -> np.ndarray:
    if slice_index is None:
        return mask.voxels.astype(np.float64)
    volume = np.zeros(dims, dtype=np.float64)
    volume[:, :, slice_index] = mask.voxels
    return volume


def pair_masks(corr: CorrespondenceSet, fix_resp: PromptResponse,
               mov_resp: PromptResponse):
    """Lift each matched pair onto the shared image grid for optimization."""
    if fix_resp.image_dims != mov_resp.image_dims:
        raise ConfigError(
            "field estimation needs images on one grid, got dims "
            f"{fix_resp.image_dims} vs {mov_resp.image_dims}"
        )
    dims = fix_resp.image_dims
    pairs = []
    for pair in corr.pairs:
        pairs.append(
            (
                _embed_slice(pair.fix.mask, dims, fix_resp.image_spacing,
                             pair.fix.slice_index),
                _embed_slice(pair.mov.mask, dims, mov_resp.image_spacing,
                             pair.mov.slice_index),
            )
        )
    return pairs


def stage_register(config: PipelineConfig, corr: CorrespondenceSet,
                   fix_resp: PromptResponse, mov_resp: PromptResponse,
                   out_dir: Path):
    """Optional dense-field stage; absent entirely when disabled."""
    if not config.ddf.enabled:
        return None, None
    if not corr.pairs:
        raise ConfigError("no matched pairs to drive field estimation")
    pairs = pair_masks(corr, fix_resp, mov_resp)
    field, report = ddf.optimize(
        pairs, config.ddf.optimizer_config(), spacing=fix_resp.image_spacing
    )
    ddf.write_ddf(field, out_dir / "ddf")
    (out_dir / "loss_report.json").write_text(
        volio.canonical_json(report.to_json())
    )
    if report.diverged:
        raise DivergenceError(
            "field optimization diverged; partial artifacts retained"
        )
    return field, report


def _warped_mask(field: ddf.DisplacementField, mask: BinaryMask) -> BinaryMask:
    warped = ddf.warp(mask.voxels.astype(np.float64), field)
    return BinaryMask((warped > 0.5).astype(np.uint8), spacing=mask.spacing)


def _gt_slices(mask: BinaryMask):
    planes = {}
    for z in range(mask.dims[2]):
        plane = mask.voxels[:, :, z]
        if plane.any():
            planes[z] = BinaryMask(plane, spacing=mask.spacing[:2])
    return planes


def _detect_entry(entry_gt_fix: BinaryMask, entry_gt_mov: BinaryMask,
                  pairs, thresh: float, mode: str):
    """Count detection instances and hits for one ground-truth structure.

    2D images and volume-mode records compare whole masks.  For per-slice
    records against volumetric truth, every populated fixed slice is one
    instance; a pair covers it when its fixed mask matches that slice and
    its moving mask matches the truth on the pair's own moving slice.
    """
    sliced = [p for p in pairs if p.fix.slice_index is not None]
    if len(entry_gt_fix.dims) == 2 or (mode == "3d") or not sliced:
        if len(entry_gt_fix.dims) == 2:
            candidates = [
                (p.fix.mask, p.mov.mask) for p in pairs
                if p.fix.slice_index is None
            ]
        else:
            dims = entry_gt_fix.dims
            candidates = [
                (
                    BinaryMask(
                        _embed_slice(p.fix.mask, dims, entry_gt_fix.spacing,
                                     p.fix.slice_index).astype(np.uint8),
                        spacing=entry_gt_fix.spacing,
                    ),
                    BinaryMask(
                        _embed_slice(p.mov.mask, dims, entry_gt_mov.spacing,
                                     p.mov.slice_index).astype(np.uint8),
                        spacing=entry_gt_mov.spacing,
                    ),
                )
                for p in pairs
            ]
        hit = any(
            metrics.dice(fix_mask, entry_gt_fix) >= thresh
            and metrics.dice(mov_mask, entry_gt_mov) >= thresh
            for fix_mask, mov_mask in candidates
        )
        return 1, int(hit)

    fix_planes = _gt_slices(entry_gt_fix)
    mov_planes = _gt_slices(entry_gt_mov)
    detected = 0
    for z, gt_plane in fix_planes.items():
        for pair in sliced:
            if pair.fix.slice_index != z or pair.mov.slice_index is None:
                continue
            mov_plane = mov_planes.get(pair.mov.slice_index)
            if mov_plane is None:
                continue
            if (
                metrics.dice(pair.fix.mask, gt_plane) >= thresh
                and metrics.dice(pair.mov.mask, mov_plane) >= thresh
            ):
                detected += 1
                break
    return len(fix_planes), detected


def stage_evaluate(config: PipelineConfig, corr: CorrespondenceSet,
                   fix_resp: PromptResponse, mov_resp: PromptResponse,
                   field: ddf.DisplacementField | None, out_dir: Path):
    """Score ground truth before/after warping; shape the prompt table."""
    if not config.evaluation.gt:
        return None
    thresh = config.evaluation.overlap_thresh
    cases = []
    per_prompt: dict[str, dict] = {
        p: {"instances": 0, "detected": 0} for p in config.prompts
    }
    counters = {}
    for entry in config.evaluation.gt:
        try:
            gt_fix = volio.read_mask(entry.fix)
            gt_mov = volio.read_mask(entry.mov)
        except (OSError, volio.FormatError) as exc:
            raise ConfigError(f"cannot read ground truth: {exc}") from exc
        if not gt_fix.voxels.any() or not gt_mov.voxels.any():
            raise ConfigError(f"ground truth for {entry.prompt!r} is empty")
        dice_before = metrics.dice(gt_fix, gt_mov)
        tre_before = metrics.tre_centroid(gt_fix, gt_mov)
        if field is not None:
            if gt_mov.dims != field.dims:
                raise ConfigError(
                    f"ground truth dims {gt_mov.dims} do not match the "
                    f"field dims {field.dims}"
                )
            warped = _warped_mask(field, gt_mov)
            dice_after = metrics.dice(gt_fix, warped)
            # a field that erased the structure leaves no centroid; fall
            # back to the unwarped one so the error stays reportable
            tre_after = (
                metrics.tre_centroid(gt_fix, warped)
                if warped.voxels.any()
                else tre_before
            )
        else:
            dice_after = dice_before
            tre_after = tre_before
        index = counters.get(entry.prompt, 0)
        counters[entry.prompt] = index + 1
        cases.append(
            metrics.CaseMetrics(
                case=f"{entry.prompt}_{index:02d}",
                dice_before=dice_before,
                dice_after=dice_after,
                tre_before_mm=tre_before,
                tre_after_mm=tre_after,
            )
        )
        if entry.prompt in per_prompt:
            prompt_pairs = [p for p in corr.pairs if p.prompt == entry.prompt]
            instances, detected = _detect_entry(
                gt_fix, gt_mov, prompt_pairs, thresh, config.evaluation.mode
            )
            per_prompt[entry.prompt]["instances"] += instances
            per_prompt[entry.prompt]["detected"] += detected

    stats = []
    for prompt in config.prompts:
        counts = per_prompt[prompt]
        stats.append(
            metrics.PromptStats(
                prompt=prompt,
                rois_fix=len(fix_resp.records_for(prompt)),
                rois_mov=len(mov_resp.records_for(prompt)),
                corresponding=sum(1 for p in corr.pairs if p.prompt == prompt),
                instances=counts["instances"],
                detected_instances=counts["detected"],
                cases=1,
                detected_cases=int(counts["detected"] > 0),
            )
        )
    report = metrics.EvaluationReport(
        cases=tuple(cases),
        prompts=tuple(stats),
        jacobian_negative_fraction=(
            metrics.jacobian_negative_fraction(field) if field is not None else None
        ),
    )
    (out_dir / "evaluation.json").write_text(volio.canonical_json(report.to_json()))
    (out_dir / "evaluation_cases.csv").write_text(report.case_table_csv())
    (out_dir / "evaluation_prompts.csv").write_text(report.prompt_table_csv())
    return report


# --- commands ---------------------------------------------------------------


def _staged(stage: str, exc: Exception) -> Exception:
    cls = type(exc)
    if issubclass(cls, (ConfigError, BackendError, DivergenceError)):
        return cls(f"[{stage}] {exc}")
    return ConfigError(f"[{stage}] {exc}")


def cmd_run(config: PipelineConfig, out_dir) -> dict:
    """Execute every configured stage; return the in-memory artifacts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.json").write_text(
        volio.canonical_json(config.to_json())
    )
    try:
        fix_resp, mov_resp = stage_fetch(config, out)
    except (BackendError, ConfigError) as exc:
        raise _staged("fetch", exc) from exc
    except (ValueError, volio.FormatError, OSError) as exc:
        raise _staged("fetch", exc) from exc
    try:
        kept_fix, kept_mov = stage_filter(config, fix_resp, mov_resp, out)
        corr = stage_match(config, kept_fix, kept_mov, out)
    except (ConfigError, ValueError) as exc:
        raise _staged("match", exc) from exc
    try:
        field, loss_report = stage_register(config, corr, kept_fix, kept_mov, out)
    except DivergenceError as exc:
        raise _staged("register", exc) from exc
    except (ConfigError, ValueError) as exc:
        raise _staged("register", exc) from exc
    try:
        evaluation = stage_evaluate(
            config, corr, kept_fix, kept_mov, field, out
        )
    except (ConfigError, ValueError) as exc:
        raise _staged("evaluate", exc) from exc
    return {
        "correspondence": corr,
        "field": field,
        "loss_report": loss_report,
        "evaluation": evaluation,
    }


def load_rois(rois_dir) -> tuple[PromptResponse, PromptResponse]:
    rois = Path(rois_dir)
    return (
        read_response_dir(rois / "fix"),
        read_response_dir(rois / "mov"),
    )


def load_correspondence(path, fix_resp: PromptResponse,
                        mov_resp: PromptResponse) -> CorrespondenceSet:
    """Rebuild matched pairs from the stored id-level correspondence file."""
    try:
        blob = json.loads(Path(path).read_text())
        fix_by_id = {r.id: r for r in fix_resp.records}
        mov_by_id = {r.id: r for r in mov_resp.records}
        pairs = tuple(
            MatchedPair(
                fix=fix_by_id[p["fix_id"]],
                mov=mov_by_id[p["mov_id"]],
                similarity=float(p["similarity"]),
                prompt=str(p["prompt"]),
            )
            for p in blob["pairs"]
        )
        return CorrespondenceSet(
            pairs=pairs,
            strategy=str(blob["strategy"]),
            tau=float(blob["tau"]),
            metric=str(blob["metric"]),
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad correspondence artifact {path}: {exc}") from exc


def cmd_match(config: PipelineConfig, rois_dir, out_dir) -> CorrespondenceSet:
    """Resume from stored regions: filter and match only."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        fix_resp, mov_resp = load_rois(rois_dir)
        kept_fix, kept_mov = stage_filter(config, fix_resp, mov_resp, out)
        return stage_match(config, kept_fix, kept_mov, out)
    except (ConfigError, ValueError) as exc:
        raise _staged("match", exc) from exc


def cmd_register(config: PipelineConfig, rois_dir, correspondence_path,
                 out_dir):
    """Resume from stored regions and pairs: field estimation only."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = replace(config, ddf=replace(config.ddf, enabled=True))
    try:
        fix_resp, mov_resp = load_rois(rois_dir)
        corr = load_correspondence(correspondence_path, fix_resp, mov_resp)
    except ConfigError as exc:
        raise _staged("register", exc) from exc
    try:
        return stage_register(config, corr, fix_resp, mov_resp, out)
    except DivergenceError as exc:
        raise _staged("register", exc) from exc
    except (ConfigError, ValueError) as exc:
        raise _staged("register", exc) from exc


def cmd_evaluate(config: PipelineConfig, artifacts_dir, out_dir):
    """Resume from a finished run directory: scoring only."""
    artifacts = Path(artifacts_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        fix_resp, mov_resp = load_rois(artifacts / "rois")
        kept_fix, kept_mov = stage_filter(config, fix_resp, mov_resp, out)
        corr = load_correspondence(
            artifacts / "correspondence.json", kept_fix, kept_mov
        )
        field = None
        if (artifacts / ("ddf" + volio.HEADER_SUFFIX)).is_file():
            field = ddf.read_ddf(artifacts / "ddf")
        return stage_evaluate(config, corr, kept_fix, kept_mov, field, out)
    except volio.FormatError as exc:
        raise _staged("evaluate", ConfigError(str(exc))) from exc
    except (ConfigError, ValueError) as exc:
        raise _staged("evaluate", exc) from exc


def cmd_fixture(scene_spec: dict, seed: int, out_dir) -> dict:
    """Write a painted scene with images, truth masks, and manifest."""
    from promptreg import fixture

    try:
        scene = fixture.fixture_generate(scene_spec, seed=seed)
    except fixture.SceneError as exc:
        raise ConfigError(str(exc)) from exc
    return scene.write(Path(out_dir))


def load_case_list(path) -> list[dict]:
    path = Path(path)
    try:
        blob = json.loads(path.read_text())
        cases = blob["cases"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"cannot read case list {path}: {exc}") from exc
    if not cases:
        raise ConfigError("case list is empty")
    base_dir = path.parent
    out = []
    for i, case in enumerate(cases):
        _take(case, ("name", "scene", "fixed_image", "moving_image", "gt"),
              f"case {i}")
        case = dict(case)
        case.setdefault("name", f"case_{i:03d}")
        for key in ("scene", "fixed_image", "moving_image"):
            if key in case:
                case[key] = _resolve(case[key], base_dir)
        if "gt" in case:
            case["gt"] = [
                {
                    "prompt": entry["prompt"],
                    "fix": _resolve(entry["fix"], base_dir),
                    "mov": _resolve(entry["mov"], base_dir),
                }
                for entry in case["gt"]
            ]
        out.append(case)
    return out


def cmd_prompt_report(config: PipelineConfig, cases: list[dict], out_dir):
    """Aggregate detection counts per prompt over a list of cases."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    totals = {
        p: {
            "rois_fix": 0,
            "rois_mov": 0,
            "corresponding": 0,
            "instances": 0,
            "detected": 0,
            "detected_cases": 0,
        }
        for p in config.prompts
    }
    base_dir = Path(".")
    for case in cases:
        name = case["name"]
        case_cfg_data = {
            key: value for key, value in case.items()
            if key not in ("name", "gt")
        }
        case_cfg_data.setdefault("prompts", list(config.prompts))
        case_cfg_data["mode"] = config.mode
        case_cfg_data["filter"] = config.filter.to_json()
        case_cfg_data["matching"] = config.matching.to_json()
        case_cfg_data["backend"] = config.backend.to_json()
        case_cfg_data["seed"] = config.seed
        evaluation = {
            "overlap_thresh": config.evaluation.overlap_thresh,
            "mode": config.evaluation.mode,
        }
        if "gt" in case:
            evaluation["gt"] = case["gt"]
        case_cfg_data["evaluation"] = evaluation
        case_config = PipelineConfig.from_json(case_cfg_data, base_dir=base_dir)
        case_out = out / "cases" / name
        case_out.mkdir(parents=True, exist_ok=True)
        try:
            fix_resp, mov_resp = stage_fetch(case_config, case_out)
            kept_fix, kept_mov = stage_filter(
                case_config, fix_resp, mov_resp, case_out
            )
            corr = stage_match(case_config, kept_fix, kept_mov, case_out)
        except BackendError as exc:
            raise _staged("fetch", exc) from exc
        except (ConfigError, ValueError) as exc:
            raise _staged("match", ConfigError(f"case {name}: {exc}")) from exc
        for prompt in config.prompts:
            bucket = totals[prompt]
            bucket["rois_fix"] += len(kept_fix.records_for(prompt))
            bucket["rois_mov"] += len(kept_mov.records_for(prompt))
            prompt_pairs = [p for p in corr.pairs if p.prompt == prompt]
            bucket["corresponding"] += len(prompt_pairs)
            case_detected = 0
            for entry in case_config.evaluation.gt:
                if entry.prompt != prompt:
                    continue
                gt_fix = volio.read_mask(entry.fix)
                gt_mov = volio.read_mask(entry.mov)
                instances, detected = _detect_entry(
                    gt_fix,
                    gt_mov,
                    prompt_pairs,
                    case_config.evaluation.overlap_thresh,
                    case_config.evaluation.mode,
                )
                bucket["instances"] += instances
                bucket["detected"] += detected
                case_detected += detected
            bucket["detected_cases"] += int(case_detected > 0)

    stats = tuple(
        metrics.PromptStats(
            prompt=prompt,
            rois_fix=totals[prompt]["rois_fix"],
            rois_mov=totals[prompt]["rois_mov"],
            corresponding=totals[prompt]["corresponding"],
            instances=totals[prompt]["instances"],
            detected_instances=totals[prompt]["detected"],
            cases=len(cases),
            detected_cases=totals[prompt]["detected_cases"],
        )
        for prompt in config.prompts
    )
    report = metrics.EvaluationReport(cases=(), prompts=stats)
    (out / "prompt_report.json").write_text(
        volio.canonical_json(report.to_json())
    )
    (out / "prompt_report.csv").write_text(report.prompt_table_csv())
    return report
