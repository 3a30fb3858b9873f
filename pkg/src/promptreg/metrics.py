"""Region-overlap metrics and the run report they feed.

All scoring here happens on binary masks.  Dice of two empty masks is 1 by
convention, so evaluating a structure that is absent from both images does
not read as a failure.  Centroid distances are physical: voxel coordinates
are scaled by the shared spacing before the norm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from promptreg.ddf import DisplacementField

DEFAULT_OVERLAP_THRESH = 0.5


def _mask_bool(mask) -> np.ndarray:
    voxels = getattr(mask, "voxels", mask)
    return np.asarray(voxels) > 0


def _mask_spacing(mask, ndim: int) -> tuple[float, ...]:
    spacing = getattr(mask, "spacing", None)
    return tuple(spacing) if spacing is not None else (1.0,) * ndim


def dice(a, b) -> float:
    """2|A and B| / (|A| + |B|); 1.0 when both masks are empty."""
    av = _mask_bool(a)
    bv = _mask_bool(b)
    if av.shape != bv.shape:
        raise ValueError(f"mask dims disagree: {av.shape} vs {bv.shape}")
    size_a = int(av.sum())
    size_b = int(bv.sum())
    if size_a == 0 and size_b == 0:
        return 1.0
    return 2.0 * int((av & bv).sum()) / (size_a + size_b)


def tre_centroid(a, b) -> float:
    """Distance in millimetres between the mask centroids."""
    av = _mask_bool(a)
    bv = _mask_bool(b)
    if av.shape != bv.shape:
        raise ValueError(f"mask dims disagree: {av.shape} vs {bv.shape}")
    if not av.any() or not bv.any():
        raise ValueError("tre_centroid needs nonempty masks on both sides")
    spacing_a = _mask_spacing(a, av.ndim)
    spacing_b = _mask_spacing(b, bv.ndim)
    if spacing_a != spacing_b:
        raise ValueError(
            f"masks disagree on spacing: {spacing_a} vs {spacing_b}"
        )
    scale = np.asarray(spacing_a, dtype=np.float64)
    ca = np.argwhere(av).mean(axis=0) * scale
    cb = np.argwhere(bv).mean(axis=0) * scale
    return float(np.linalg.norm(ca - cb))


def _as_instances(gt):
    if hasattr(gt, "voxels") or isinstance(gt, np.ndarray):
        return [gt]
    return list(gt)


def _matched_pairs(pairs):
    return list(getattr(pairs, "pairs", pairs))


def detection_ratio(
    pairs, gt_fix, gt_mov, overlap_thresh: float = DEFAULT_OVERLAP_THRESH
) -> float:
    """Fraction of ground-truth instances with a both-sides matching pair.

    An instance counts as detected when some matched pair overlaps its
    fixed-side truth and its moving-side truth with Dice >= overlap_thresh.
    Extra pairs hitting the same instance do not count twice, which keeps
    the ratio a fraction.
    """
    if not 0.0 <= overlap_thresh <= 1.0:
        raise ValueError(f"overlap_thresh must be in [0, 1], got {overlap_thresh}")
    fix_list = _as_instances(gt_fix)
    mov_list = _as_instances(gt_mov)
    if len(fix_list) != len(mov_list):
        raise ValueError(
            f"{len(fix_list)} fixed vs {len(mov_list)} moving ground-truth "
            "instances; they must pair up"
        )
    if not fix_list:
        raise ValueError("no ground-truth instances to evaluate")
    for mask in (*fix_list, *mov_list):
        if not _mask_bool(mask).any():
            raise ValueError("ground-truth mask is empty")
    matched = _matched_pairs(pairs)
    detected = 0
    for gf, gm in zip(fix_list, mov_list):
        for pair in matched:
            if (
                dice(pair.fix.mask, gf) >= overlap_thresh
                and dice(pair.mov.mask, gm) >= overlap_thresh
            ):
                detected += 1
                break
    return detected / len(fix_list)


def jacobian_negative_fraction(field) -> float:
    """Fraction of interior voxels where det d(x + theta)/dx is <= 0.

    Derivatives are central differences, so only voxels at least one step
    from every border are scored; a field too small to have an interior
    scores 0.
    """
    theta = field.field if isinstance(field, DisplacementField) else field
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim < 2 or theta.shape[-1] != theta.ndim - 1:
        raise ValueError(f"field of shape {theta.shape} is not dims + (D,)")
    dims = theta.shape[:-1]
    ndim = len(dims)
    if any(n < 3 for n in dims):
        return 0.0
    inner = tuple(slice(1, n - 1) for n in dims)
    jac = np.zeros(tuple(n - 2 for n in dims) + (ndim, ndim))
    for axis in range(ndim):
        fwd = list(inner)
        bwd = list(inner)
        fwd[axis] = slice(2, dims[axis])
        bwd[axis] = slice(0, dims[axis] - 2)
        delta = (theta[tuple(fwd)] - theta[tuple(bwd)]) / 2.0
        for comp in range(ndim):
            jac[..., comp, axis] = delta[..., comp]
        jac[..., axis, axis] += 1.0
    det = np.linalg.det(jac)
    return float((det <= 0.0).mean())


# --- report shaping ----------------------------------------------------------


@dataclass(frozen=True)
class CaseMetrics:
    """Overlap and centroid error for one image pair, before/after warping."""

    case: str
    dice_before: float
    dice_after: float
    tre_before_mm: float
    tre_after_mm: float

    def __post_init__(self):
        for name in ("dice_before", "dice_after"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        for name in ("tre_before_mm", "tre_after_mm"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")

    def to_json(self) -> dict:
        return {
            "case": self.case,
            "dice_before": self.dice_before,
            "dice_after": self.dice_after,
            "tre_before_mm": self.tre_before_mm,
            "tre_after_mm": self.tre_after_mm,
        }


@dataclass(frozen=True)
class PromptStats:
    """Detection counts for one prompt, aggregated over evaluated cases."""

    prompt: str
    rois_fix: int
    rois_mov: int
    corresponding: int
    instances: int
    detected_instances: int
    cases: int
    detected_cases: int

    def __post_init__(self):
        for name in (
            "rois_fix",
            "rois_mov",
            "corresponding",
            "instances",
            "detected_instances",
            "cases",
            "detected_cases",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.corresponding > min(self.rois_fix, self.rois_mov):
            raise ValueError(
                f"prompt {self.prompt!r}: {self.corresponding} correspondences "
                f"exceed min({self.rois_fix}, {self.rois_mov}) detections"
            )
        if self.detected_instances > self.instances:
            raise ValueError("detected_instances exceeds instances")
        if self.detected_cases > self.cases:
            raise ValueError("detected_cases exceeds cases")

    @property
    def ratio_by_instance(self) -> float:
        return self.detected_instances / self.instances if self.instances else 0.0

    @property
    def ratio_by_case(self) -> float:
        return self.detected_cases / self.cases if self.cases else 0.0

    def to_json(self) -> dict:
        return {
            "prompt": self.prompt,
            "rois_fix": self.rois_fix,
            "rois_mov": self.rois_mov,
            "corresponding": self.corresponding,
            "instances": self.instances,
            "detected_instances": self.detected_instances,
            "cases": self.cases,
            "detected_cases": self.detected_cases,
            "ratio_by_instance": self.ratio_by_instance,
            "ratio_by_case": self.ratio_by_case,
        }


@dataclass(frozen=True)
class EvaluationReport:
    cases: tuple[CaseMetrics, ...]
    prompts: tuple[PromptStats, ...]
    jacobian_negative_fraction: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple(self.cases))
        object.__setattr__(self, "prompts", tuple(self.prompts))
        frac = self.jacobian_negative_fraction
        if frac is not None and not 0.0 <= frac <= 1.0:
            raise ValueError(f"jacobian fraction must be in [0, 1], got {frac}")

    def summary(self) -> dict | None:
        if not self.cases:
            return None
        fields = ("dice_before", "dice_after", "tre_before_mm", "tre_after_mm")
        out = {}
        for name in fields:
            values = np.array([getattr(c, name) for c in self.cases])
            out[f"{name}_mean"] = float(values.mean())
            out[f"{name}_std"] = float(values.std())
        return out

    def to_json(self) -> dict:
        return {
            "cases": [c.to_json() for c in self.cases],
            "prompts": [p.to_json() for p in self.prompts],
            "summary": self.summary(),
            "jacobian_negative_fraction": self.jacobian_negative_fraction,
        }

    def case_table_csv(self) -> str:
        lines = ["case,dice_before,dice_after,tre_before_mm,tre_after_mm"]
        for c in self.cases:
            lines.append(
                f"{c.case},{c.dice_before:.6f},{c.dice_after:.6f},"
                f"{c.tre_before_mm:.6f},{c.tre_after_mm:.6f}"
            )
        return "\n".join(lines) + "\n"

    def prompt_table_csv(self) -> str:
        # detection ratio first, then moving, fixed, corresponding counts
        lines = [
            "prompt,ratio_by_case,ratio_by_instance,"
            "rois_moving,rois_fixed,corresponding"
        ]
        for p in self.prompts:
            lines.append(
                f"{p.prompt},{p.ratio_by_case:.6f},{p.ratio_by_instance:.6f},"
                f"{p.rois_mov},{p.rois_fix},{p.corresponding}"
            )
        return "\n".join(lines) + "\n"
