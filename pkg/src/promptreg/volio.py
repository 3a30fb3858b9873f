"""Volumetric data model and bit-exact on-disk container.

Every array that crosses a module or process boundary travels in one
container format: a small JSON header ``<name>.t2r.json`` next to a packed
little-endian payload ``<name>.t2r.raw``.  Three kinds exist:

* ``volume``    - scalar image grid, float32
* ``mask``      - binary grid, uint8 with values in {0, 1}
* ``embedding`` - channel-last feature grid, float32

The payload is linearized with axis 0 fastest: voxel ``(x, y, z)`` lives at
index ``x + nx*(y + ny*z)``.  Embedding channels are the last (slowest)
index, so channel ``c`` of cell ``(x, y)`` sits at ``x + nx*(y + ny*c)``.
In numpy terms the payload is the Fortran-order ravel of an array of shape
``dims`` (or ``dims + (C,)`` for embeddings).

Readers are strict: any header/payload inconsistency raises
:class:`FormatError` and never yields a truncated object.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SUFFIX = ".t2r.json"
RAW_SUFFIX = ".t2r.raw"

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("<u1")}
_KIND_DTYPE = {"volume": "f32", "mask": "u8", "embedding": "f32"}


class FormatError(ValueError):
    """Raised for any malformed header, payload, or invariant violation."""


def _check_dims(dims) -> tuple[int, ...]:
    dims = tuple(int(d) for d in dims)
    if len(dims) not in (2, 3):
        raise FormatError(f"dims must have 2 or 3 axes, got {dims}")
    if any(d < 1 for d in dims):
        raise FormatError(f"dims must be positive, got {dims}")
    return dims


def _check_spacing(spacing, ndim: int) -> tuple[float, ...]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != ndim:
        raise FormatError(f"spacing has {len(spacing)} axes, dims have {ndim}")
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise FormatError(f"spacing must be strictly positive, got {spacing}")
    return spacing


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar image grid with physical spacing, immutable after construction.

    ``voxels`` is indexed ``[x, y]`` or ``[x, y, z]`` (float32, all finite);
    ``spacing`` is millimetres per axis.
    """

    voxels: np.ndarray
    spacing: tuple[float, ...]

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.float32)
        dims = _check_dims(vox.shape)
        if not np.all(np.isfinite(vox)):
            raise FormatError("volume contains non-finite values")
        object.__setattr__(self, "voxels", _freeze(vox))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, len(dims)))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.voxels.shape

    @property
    def ndim(self) -> int:
        return self.voxels.ndim


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Binary grid stored as uint8 with values in {0, 1}."""

    voxels: np.ndarray
    spacing: tuple[float, ...]

    def __post_init__(self):
        vox = np.asarray(self.voxels, dtype=np.uint8)
        dims = _check_dims(vox.shape)
        if vox.max(initial=0) > 1:
            raise FormatError("mask values must be 0 or 1")
        object.__setattr__(self, "voxels", _freeze(vox))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing, len(dims)))

    @property
    def dims(self) -> tuple[int, ...]:
        return self.voxels.shape

    @property
    def count(self) -> int:
        return int(self.voxels.sum())


@dataclass(frozen=True, eq=False)
class EmbeddingGrid:
    """Channel-last feature grid: ``values`` has shape ``grid_dims + (C,)``."""

    values: np.ndarray
    spacing: tuple[float, ...]

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim < 3 or vals.ndim > 4:
            raise FormatError(
                f"embedding values need shape grid_dims + (C,), got {vals.shape}"
            )
        _check_dims(vals.shape[:-1])
        if vals.shape[-1] < 1:
            raise FormatError("embedding needs at least one channel")
        if not np.all(np.isfinite(vals)):
            raise FormatError("embedding contains non-finite values")
        object.__setattr__(self, "values", _freeze(vals))
        object.__setattr__(
            self, "spacing", _check_spacing(self.spacing, vals.ndim - 1)
        )

    @property
    def grid_dims(self) -> tuple[int, ...]:
        return self.values.shape[:-1]

    @property
    def channels(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in voxel coordinates, inclusive ``lo``, exclusive ``hi``.

    ``slice_index`` tags 2D boxes that live on one slice of a 3D volume.
    """

    lo: tuple[int, ...]
    hi: tuple[int, ...]
    score: float
    prompt: str
    slice_index: int | None = None

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if len(lo) != len(hi):
            raise FormatError(f"box corners disagree on axes: {lo} vs {hi}")
        if any(a >= b for a, b in zip(lo, hi)):
            raise FormatError(f"box must satisfy lo < hi per axis: {lo} vs {hi}")
        if not (0.0 <= self.score <= 1.0):
            raise FormatError(f"box score must be in [0, 1], got {self.score}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extent(self) -> int:
        out = 1
        for a, b in zip(self.lo, self.hi):
            out *= b - a
        return out

    def contains_point(self, point) -> bool:
        return all(a <= p < b for a, p, b in zip(self.lo, point, self.hi))

    def to_json(self) -> dict:
        return {
            "lo": list(self.lo),
            "hi": list(self.hi),
            "score": self.score,
            "prompt": self.prompt,
            "slice_index": self.slice_index,
        }

    @staticmethod
    def from_json(obj: dict) -> "BoundingBox":
        return BoundingBox(
            lo=tuple(obj["lo"]),
            hi=tuple(obj["hi"]),
            score=float(obj["score"]),
            prompt=str(obj["prompt"]),
            slice_index=obj.get("slice_index"),
        )


def canonical_json(obj) -> str:
    """Serialize deterministically so identical runs emit identical bytes."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def header_path(path) -> Path:
    path = Path(path)
    if not path.name.endswith(HEADER_SUFFIX):
        path = path.with_name(path.name + HEADER_SUFFIX)
    return path


def raw_path_for(header: Path) -> Path:
    name = header.name[: -len(HEADER_SUFFIX)] + RAW_SUFFIX
    return header.with_name(name)


def _write_container(kind, arr, spacing, path, channels=None, extra=None) -> Path:
    header = header_path(path)
    raw = raw_path_for(header)
    dims = arr.shape[:-1] if kind == "embedding" else arr.shape
    meta = {
        "kind": kind,
        "dims": list(dims),
        "spacing_mm": [float(s) for s in spacing],
        "dtype": _KIND_DTYPE[kind],
        "byte_order": "le",
        "raw": raw.name,
    }
    if kind == "embedding":
        meta["channels"] = int(channels)
    if extra:
        meta.update(extra)
    payload = np.ascontiguousarray(arr.ravel(order="F")).astype(
        _DTYPES[_KIND_DTYPE[kind]], copy=False
    )
    try:
        header.write_text(canonical_json(meta))
        raw.write_bytes(payload.tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write {header}: {exc}") from exc
    return header


def read_header(path) -> dict:
    header = header_path(path)
    if not header.is_file():
        raise FormatError(f"missing header file: {header}")
    try:
        meta = json.loads(header.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed header {header}: {exc}") from exc
    if not isinstance(meta, dict):
        raise FormatError(f"malformed header {header}: not an object")
    return meta


def _read_container(path, expect_kind: str):
    header = header_path(path)
    meta = read_header(header)
    for key in ("kind", "dims", "spacing_mm", "dtype", "byte_order", "raw"):
        if key not in meta:
            raise FormatError(f"header {header} missing field '{key}'")
    if meta["kind"] != expect_kind:
        raise FormatError(
            f"{header}: expected kind '{expect_kind}', found '{meta['kind']}'"
        )
    if meta["byte_order"] != "le":
        raise FormatError(f"{header}: unsupported byte order '{meta['byte_order']}'")
    if meta["dtype"] != _KIND_DTYPE[expect_kind]:
        raise FormatError(
            f"{header}: unsupported dtype '{meta['dtype']}' for kind '{expect_kind}'"
        )
    dims = _check_dims(meta["dims"])
    spacing = _check_spacing(meta["spacing_mm"], len(dims))
    channels = 1
    shape = dims
    if expect_kind == "embedding":
        channels = int(meta.get("channels", 0))
        if channels < 1:
            raise FormatError(f"{header}: embedding channels must be >= 1")
        shape = dims + (channels,)
    raw = header.with_name(str(meta["raw"]))
    if not raw.is_file():
        raise FormatError(f"missing raw file: {raw}")
    blob = raw.read_bytes()
    dtype = _DTYPES[meta["dtype"]]
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(blob) != expected:
        raise FormatError(
            f"{raw}: payload is {len(blob)} bytes, header declares {expected}"
        )
    arr = np.frombuffer(blob, dtype=dtype).reshape(shape, order="F")
    return arr, spacing, meta


def write_volume(vol: Volume, path) -> Path:
    return _write_container("volume", vol.voxels, vol.spacing, path)


def read_volume(path) -> Volume:
    arr, spacing, _ = _read_container(path, "volume")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{header_path(path)}: volume contains non-finite values")
    return Volume(voxels=arr, spacing=spacing)


def write_mask(mask: BinaryMask, path) -> Path:
    return _write_container("mask", mask.voxels, mask.spacing, path)


def read_mask(path) -> BinaryMask:
    arr, spacing, _ = _read_container(path, "mask")
    if arr.max(initial=0) > 1:
        raise FormatError(f"{header_path(path)}: mask values outside {{0, 1}}")
    return BinaryMask(voxels=arr, spacing=spacing)


def write_embedding(emb: EmbeddingGrid, path, extra: dict | None = None) -> Path:
    return _write_container(
        "embedding", emb.values, emb.spacing, path, channels=emb.channels, extra=extra
    )


def read_embedding(path) -> EmbeddingGrid:
    arr, spacing, _ = _read_container(path, "embedding")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{header_path(path)}: embedding contains non-finite values")
    return EmbeddingGrid(values=arr, spacing=spacing)
