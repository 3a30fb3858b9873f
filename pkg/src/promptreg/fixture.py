"""Deterministic synthetic scenes and the in-process fixture backend.

A scene paints simple shapes (disks, rectangles) into a fixed and a moving
image.  Each shape carries a text prompt and an integer code; the painted
intensity encodes both, so the backend can recover them from the image alone:

    intensity = band(prompt) + 0.1 + code / 80

Background noise stays below the 0.5 foreground threshold, shapes are forced
apart, and moving shapes are exact integer translations of their fixed
counterparts.  That makes every backend answer predictable in closed form:
tests can compute boxes, scores, and prototype similarities independently and
compare.  Equal (spec, seed) pairs produce bitwise-equal images.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from promptreg import volio
from promptreg.gateway import PromptRequest, PromptResponse, RoiRecord
from promptreg.volio import BinaryMask, BoundingBox, EmbeddingGrid, Volume

GRID_FACTOR = 4
EMBED_CHANNELS = 32
CODE_MIN = 1
CODE_MAX = 30
BAND_COUNT = 200
FOREGROUND_THRESHOLD = 0.5
MAX_NOISE = 0.4


class SceneError(ValueError):
    """Scene spec is invalid or would make ground truth ambiguous."""


def prompt_band(prompt: str) -> int:
    """Stable prompt -> intensity band in 1..BAND_COUNT."""
    return zlib.crc32(prompt.encode("utf-8")) % BAND_COUNT + 1


def shape_intensity(band: int, code: int) -> float:
    return float(band) + 0.1 + code / 80.0


def decode_intensity(mean: float) -> tuple[int, int] | None:
    """Invert :func:`shape_intensity`; None if the value fits no shape."""
    band = int(np.floor(mean))
    code = int(round((mean - band - 0.1) * 80.0))
    if not (1 <= band <= BAND_COUNT and CODE_MIN <= code <= CODE_MAX):
        return None
    if abs(shape_intensity(band, code) - mean) > 0.005:
        return None
    return band, code


@dataclass(frozen=True)
class ShapeTruth:
    """One painted shape with its ground-truth masks in both images."""

    index: int
    prompt: str
    band: int
    code: int
    kind: str
    center: tuple[float, ...]
    size: tuple[float, ...]
    shift: tuple[int, ...]
    mask_fix: BinaryMask
    mask_mov: BinaryMask


@dataclass(frozen=True)
class FixtureScene:
    dims: tuple[int, ...]
    spacing: tuple[float, ...]
    seed: int
    noise: float
    fix: Volume
    mov: Volume
    shapes: tuple[ShapeTruth, ...]

    def write(self, out_dir: str | Path) -> dict:
        """Write images, ground-truth masks, and a manifest; return the manifest."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gt").mkdir(exist_ok=True)
        volio.write_volume(self.fix, out / "fix")
        volio.write_volume(self.mov, out / "mov")
        shapes = []
        for shape in self.shapes:
            fix_name = f"gt/fix_{shape.index:03d}"
            mov_name = f"gt/mov_{shape.index:03d}"
            volio.write_mask(shape.mask_fix, out / fix_name)
            volio.write_mask(shape.mask_mov, out / mov_name)
            shapes.append(
                {
                    "index": shape.index,
                    "prompt": shape.prompt,
                    "band": shape.band,
                    "code": shape.code,
                    "kind": shape.kind,
                    "center": list(shape.center),
                    "size": list(shape.size),
                    "shift": list(shape.shift),
                    "mask_fix": fix_name + volio.HEADER_SUFFIX,
                    "mask_mov": mov_name + volio.HEADER_SUFFIX,
                }
            )
        manifest = {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing),
            "seed": self.seed,
            "noise": self.noise,
            "fixed": "fix" + volio.HEADER_SUFFIX,
            "moving": "mov" + volio.HEADER_SUFFIX,
            "shapes": shapes,
        }
        (out / "scene.json").write_text(volio.canonical_json(manifest))
        return manifest


def _shape_support(
    kind: str, center: tuple[float, ...], size: tuple[float, ...], dims
) -> np.ndarray:
    """Boolean support of one shape on the voxel grid."""
    grids = np.ogrid[tuple(slice(0, n) for n in dims)]
    if kind == "disk":
        sq = sum((g - c) ** 2 for g, c in zip(grids, center))
        return sq <= size[0] ** 2
    inside = [abs(g - c) <= h for g, c, h in zip(grids, center, size)]
    out = inside[0]
    for term in inside[1:]:
        out = out & term
    return out


def _parse_shape(entry: dict, index: int, ndim: int) -> dict:
    kind = entry.get("kind", "disk")
    if kind not in ("disk", "rect"):
        raise SceneError(f"shape {index}: unknown kind {kind!r}")
    center = tuple(float(c) for c in entry["center"])
    if len(center) != ndim:
        raise SceneError(f"shape {index}: center needs {ndim} coordinates")
    if kind == "disk":
        size = (float(entry["radius"]),)
    else:
        size = tuple(float(h) for h in entry["half_size"])
        if len(size) != ndim:
            raise SceneError(f"shape {index}: half_size needs {ndim} entries")
    if any(s <= 0 for s in size):
        raise SceneError(f"shape {index}: size must be positive")
    shift = tuple(entry.get("shift", (0,) * ndim))
    if len(shift) != ndim or any(float(s) != int(s) for s in shift):
        raise SceneError(f"shape {index}: shift must be {ndim} integers")
    shift = tuple(int(s) for s in shift)
    prompt = str(entry["prompt"])
    if not prompt.strip():
        raise SceneError(f"shape {index}: blank prompt")
    code = int(entry.get("code", index + 1))
    if not (CODE_MIN <= code <= CODE_MAX):
        raise SceneError(f"shape {index}: code must be in {CODE_MIN}..{CODE_MAX}")
    return {
        "kind": kind, "center": center, "size": size,
        "shift": shift, "prompt": prompt, "code": code,
    }


def fixture_generate(spec: dict, seed: int = 0) -> FixtureScene:
    """Build a scene from a spec dict; reject anything ambiguous.

    Rejections: out-of-band noise, duplicate codes, two prompts hashing to
    one band, shapes leaving the image under their shift, shapes so close
    that components or embedding cells would collide.
    """
    dims = tuple(int(n) for n in spec["dims"])
    if not (2 <= len(dims) <= 3) or any(n < 4 for n in dims):
        raise SceneError(f"dims must be 2 or 3 axes of at least 4, got {dims}")
    ndim = len(dims)
    spacing = tuple(float(s) for s in spec.get("spacing_mm", (1.0,) * ndim))
    if len(spacing) != ndim or any(s <= 0 for s in spacing):
        raise SceneError(f"bad spacing {spacing}")
    noise = float(spec.get("noise", 0.02))
    if not (0.0 <= noise < MAX_NOISE):
        raise SceneError(f"noise must be in [0, {MAX_NOISE}), got {noise}")
    entries = [_parse_shape(e, i, ndim) for i, e in enumerate(spec.get("shapes", []))]
    if not entries:
        raise SceneError("scene needs at least one shape")

    codes = [e["code"] for e in entries]
    if len(set(codes)) != len(codes):
        raise SceneError(f"duplicate codes make ground truth ambiguous: {codes}")
    bands = {}
    for e in entries:
        band = prompt_band(e["prompt"])
        if bands.get(e["prompt"], band) != band:  # pragma: no cover - hash is pure
            raise AssertionError
        for other, other_band in bands.items():
            if other != e["prompt"] and other_band == band:
                raise SceneError(
                    f"prompts {other!r} and {e['prompt']!r} collide on band {band}"
                )
        bands[e["prompt"]] = band

    rng = np.random.default_rng(seed)
    fix = rng.uniform(0.0, noise, size=dims) if noise > 0 else np.zeros(dims)
    mov = rng.uniform(0.0, noise, size=dims) if noise > 0 else np.zeros(dims)

    shapes = []
    fix_supports, mov_supports = [], []
    for i, e in enumerate(entries):
        band = bands[e["prompt"]]
        sup_fix = _shape_support(e["kind"], e["center"], e["size"], dims)
        if not sup_fix.any():
            raise SceneError(f"shape {i}: empty support")
        lo = np.argwhere(sup_fix).min(axis=0)
        hi = np.argwhere(sup_fix).max(axis=0) + 1
        if np.any(lo + e["shift"] < 0) or np.any(hi + e["shift"] > dims):
            raise SceneError(f"shape {i}: leaves the image under shift {e['shift']}")
        center_mov = tuple(c + s for c, s in zip(e["center"], e["shift"]))
        sup_mov = _shape_support(e["kind"], center_mov, e["size"], dims)
        value = shape_intensity(band, e["code"])
        fix[sup_fix] = value
        mov[sup_mov] = value
        fix_supports.append(sup_fix)
        mov_supports.append(sup_mov)
        shapes.append(
            ShapeTruth(
                index=i, prompt=e["prompt"], band=band, code=e["code"],
                kind=e["kind"], center=e["center"], size=e["size"],
                shift=e["shift"],
                mask_fix=BinaryMask(sup_fix.astype(np.uint8), spacing),
                mask_mov=BinaryMask(sup_mov.astype(np.uint8), spacing),
            )
        )

    for label, supports in (("fixed", fix_supports), ("moving", mov_supports)):
        _check_separation(supports, label)
        _check_grid_cells(supports, dims, label)

    return FixtureScene(
        dims=dims, spacing=spacing, seed=int(seed), noise=noise,
        fix=Volume(fix.astype(np.float32), spacing),
        mov=Volume(mov.astype(np.float32), spacing),
        shapes=tuple(shapes),
    )


def _check_separation(supports, label: str) -> None:
    """Require a one-voxel gap in every direction so components never merge."""
    structure = np.ones((3,) * supports[0].ndim, dtype=bool)
    for i in range(len(supports)):
        grown = ndimage.binary_dilation(supports[i], structure=structure)
        for j in range(i + 1, len(supports)):
            if np.any(grown & supports[j]):
                raise SceneError(f"shapes {i} and {j} touch in the {label} image")


def _check_grid_cells(supports, dims, label: str) -> None:
    """Shapes must claim disjoint embedding cells, per slice and in 3D."""
    views = [(None, supports)]
    if len(dims) == 3:
        views += [(z, [s[:, :, z] for s in supports]) for z in range(dims[2])]
    for tag, planes in views:
        grid_dims = _grid_dims(planes[0].shape)
        claimed = np.zeros(grid_dims, dtype=bool)
        for i, sup in enumerate(planes):
            if not sup.any():
                continue
            cells = resample_support(sup, grid_dims)
            if np.any(claimed & cells):
                where = "volume grid" if tag is None else f"slice {tag} grid"
                raise SceneError(
                    f"shape {i} shares {where} cells with a neighbor in {label}"
                )
            claimed |= cells


# --- backend --------------------------------------------------------------


def _grid_dims(dims) -> tuple[int, ...]:
    return tuple(-(-n // GRID_FACTOR) for n in dims)


def resample_support(support: np.ndarray, grid_dims) -> np.ndarray:
    """Nearest-neighbor downsample of a boolean support onto the coarse grid.

    Cell g samples the source voxel nearest its center.  A nonempty support
    whose samples all miss falls back to the cell holding its centroid, so no
    shape vanishes from the grid.
    """
    src_dims = support.shape
    idx = [
        np.minimum(n - 1, ((np.arange(g) + 0.5) * n / g).astype(np.int64))
        for g, n in zip(grid_dims, src_dims)
    ]
    cells = support[np.ix_(*idx)]
    if support.any() and not cells.any():
        centroid = np.argwhere(support).mean(axis=0)
        cell = tuple(
            min(g - 1, int(c * g / n))
            for c, g, n in zip(centroid, grid_dims, src_dims)
        )
        cells = cells.copy()
        cells[cell] = True
    return cells


def _eccentricity(support: np.ndarray) -> float:
    """Shape elongation in [0, 1) from second moments; 0 for disks and cubes."""
    coords = np.argwhere(support).astype(np.float64)
    if coords.shape[0] < 2:
        return 0.0
    eigvals = np.linalg.eigvalsh(np.cov(coords.T))
    top = float(eigvals[-1])
    if top <= 0.0:
        return 0.0
    return float(np.sqrt(max(0.0, 1.0 - float(eigvals[0]) / top)))


def _embed_vector(code: int, area_fraction: float, eccentricity: float) -> np.ndarray:
    vec = np.zeros(EMBED_CHANNELS, dtype=np.float64)
    vec[0] = 0.2 * area_fraction
    vec[1] = 0.2 * eccentricity
    vec[2 + code - 1] = 1.0
    return vec


@dataclass(frozen=True)
class _Component:
    band: int
    code: int
    support: np.ndarray
    lo: tuple[int, ...]
    hi: tuple[int, ...]


def _find_components(plane: np.ndarray) -> list[_Component]:
    """Connected foreground components with their decoded band and code."""
    labels, count = ndimage.label(plane > FOREGROUND_THRESHOLD)
    comps = []
    for lid, slices in enumerate(ndimage.find_objects(labels), start=1):
        if slices is None:  # pragma: no cover - scipy never gaps label ids here
            continue
        support = labels == lid
        decoded = decode_intensity(float(plane[support].mean()))
        if decoded is None:
            continue
        band, code = decoded
        comps.append(
            _Component(
                band=band, code=code, support=support,
                lo=tuple(s.start for s in slices),
                hi=tuple(s.stop for s in slices),
            )
        )
    return comps


def _synthesize_grid(comps, dims, spacing) -> EmbeddingGrid:
    """Paint one constant vector per component onto the coarse grid."""
    grid_dims = _grid_dims(dims)
    values = np.zeros(grid_dims + (EMBED_CHANNELS,), dtype=np.float64)
    extent = float(np.prod(dims))
    for comp in comps:
        cells = resample_support(comp.support, grid_dims)
        vec = _embed_vector(
            comp.code, comp.support.sum() / extent, _eccentricity(comp.support)
        )
        values[cells] = vec
    grid_spacing = tuple(
        s * n / g for s, n, g in zip(spacing, dims, grid_dims)
    )
    return EmbeddingGrid(values.astype(np.float32), grid_spacing)


def fixture_fetch(request: PromptRequest) -> PromptResponse:
    """Serve a prompt request from image content alone.

    Deterministic: output depends only on the image bytes, the prompts, and
    the slice range.  Records are ordered prompt-major, then slice, then
    component label; ids number them 0..n-1.
    """
    image = request.image
    if not isinstance(image, Volume):
        image = volio.read_volume(image)
    vox = image.voxels

    if image.ndim == 2 or request.mode == "volume":
        if request.slice_range is not None:
            raise ValueError("slice_range only applies to 3D images in slices mode")
        planes = [(None, vox, image.spacing)]
    else:
        lo, hi = request.slice_range or (0, image.dims[2])
        if not (0 <= lo < hi <= image.dims[2]):
            raise ValueError(
                f"slice range [{lo}, {hi}) outside image of {image.dims[2]} slices"
            )
        planes = [(z, vox[:, :, z], image.spacing[:2]) for z in range(lo, hi)]

    per_plane = []
    embeddings = []
    for idx, plane, spacing in planes:
        comps = _find_components(plane)
        per_plane.append((idx, comps, spacing))
        embeddings.append((idx, _synthesize_grid(comps, plane.shape, spacing)))

    records = []
    for prompt in request.prompts:
        band = prompt_band(prompt)
        for idx, comps, spacing in per_plane:
            for comp in comps:
                if comp.band != band:
                    continue
                extent = int(np.prod(np.array(comp.hi) - np.array(comp.lo)))
                box = BoundingBox(
                    lo=comp.lo, hi=comp.hi,
                    score=float(comp.support.sum() / extent),
                    prompt=prompt, slice_index=idx,
                )
                records.append(
                    RoiRecord(
                        id=len(records), box=box,
                        mask=BinaryMask(comp.support.astype(np.uint8), spacing),
                        prompt=prompt, source=request.source, slice_index=idx,
                    )
                )

    return PromptResponse(
        source=request.source,
        image_dims=image.dims,
        image_spacing=image.spacing,
        records=tuple(records),
        embeddings=tuple(embeddings),
    )
