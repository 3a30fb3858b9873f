"""Dense displacement field estimation from matched region pairs.

Matched masks are the only data the optimizer sees: it minimizes

    L = mean_k[ 0.5 * (1 - soft_dice(fix_k, warp(mov_k))) + 0.5 * MSE ]
        + lam * mean(theta**2)

by plain gradient descent on a per-voxel displacement field theta, with
step-halving backtracking so the reported loss never increases.  The
regularizer mean runs over all D*N field components, which keeps lam
comparable across image sizes and dimensionalities.

Binary masks give the descent almost nothing to climb: interpolation
gradients reach one voxel past an edge, so interior voxels of a misaligned
shape sit on a plateau.  optimize() therefore widens each mask into a signed
distance ramp (``smooth_ramp`` voxels to each side) before descending, and
scores the final field against the raw masks.  Pairs whose masks are already
identical are left raw, which keeps the zero field stationary for them.
loss()/gradient() never soften; they evaluate exactly what they are given.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from promptreg import volio
from promptreg.volio import EmbeddingGrid

EPSILON = 1e-6
F32_LIMIT = float(np.finfo(np.float32).max)


@dataclass(frozen=True)
class DisplacementField:
    """Per-voxel displacement vectors in voxel units, channel-last."""

    field: np.ndarray
    spacing: tuple[float, ...]
    lam: float
    eta: float
    iterations: int

    def __post_init__(self):
        arr = np.asarray(self.field, dtype=np.float32)
        if arr.ndim < 2 or arr.shape[-1] != arr.ndim - 1:
            raise ValueError(
                f"field of shape {arr.shape} is not dims + (D,) with matching D"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("displacement field contains non-finite values")
        if len(self.spacing) != arr.ndim - 1:
            raise ValueError("spacing axes disagree with field dims")
        if self.lam < 0 or self.eta <= 0 or self.iterations < 0:
            raise ValueError("need lam >= 0, eta > 0, iterations >= 0")
        arr = arr.copy() if arr is self.field else arr
        arr.flags.writeable = False
        object.__setattr__(self, "field", arr)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.field.shape[:-1]

    @property
    def ndim(self) -> int:
        return self.field.shape[-1]


@dataclass(frozen=True)
class LossReport:
    """Loss trajectory of one optimize() run; lengths equal the iteration count."""

    total: tuple[float, ...]
    roi: tuple[float, ...]
    reg: tuple[float, ...]
    final_dice: tuple[float, ...]
    diverged: bool = False

    def to_json(self) -> dict:
        return {
            "total": list(self.total),
            "roi": list(self.roi),
            "reg": list(self.reg),
            "final_dice": list(self.final_dice),
            "diverged": self.diverged,
        }


@dataclass(frozen=True)
class OptimizeConfig:
    lam: float = 0.1
    eta: float = 1.0
    iters: int = 200
    backtracking: bool = True
    max_halvings: int = 30
    smooth_ramp: float = 2.4
    init: DisplacementField | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.iters < 0 or self.max_halvings < 0:
            raise ValueError("iters and max_halvings must be >= 0")
        if self.smooth_ramp < 0:
            raise ValueError(f"smooth_ramp must be >= 0, got {self.smooth_ramp}")


def _as_values(data) -> np.ndarray:
    """Accept Volume, BinaryMask, or array; hand back float64 voxels."""
    voxels = getattr(data, "voxels", data)
    return np.asarray(voxels, dtype=np.float64)


def _as_theta(theta) -> np.ndarray:
    if isinstance(theta, DisplacementField):
        theta = theta.field
    arr = np.asarray(theta, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-1] != arr.ndim - 1:
        raise ValueError(f"theta of shape {arr.shape} is not dims + (D,)")
    return arr


def _warp_terms(values: np.ndarray, theta: np.ndarray, need_grad: bool):
    """Backward warp and, on request, its derivative wrt the sample position.

    output(x) = values interpolated at x + theta(x); corners outside the
    image contribute zero to the value and the derivative.
    """
    dims = values.shape
    ndim = len(dims)
    # overflow and invalid casts here are expected for runaway fields: such
    # samples land out of bounds or go NaN, and the caller treats the
    # resulting non-finite loss as divergence
    with np.errstate(invalid="ignore", over="ignore"):
        coords = np.meshgrid(
            *[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"
        )
        pos = np.stack(coords, axis=-1) + theta
        base = np.floor(pos).astype(np.int64)
        frac = pos - base

        out = np.zeros(dims, dtype=np.float64)
        grad = np.zeros(dims + (ndim,), dtype=np.float64) if need_grad else None
        limits = np.array(dims)
        for corner in itertools.product((0, 1), repeat=ndim):
            idx = base + np.array(corner)
            valid = np.all((idx >= 0) & (idx < limits), axis=-1)
            safe = np.where(valid[..., None], idx, 0)
            vals = np.where(
                valid, values[tuple(safe[..., d] for d in range(ndim))], 0.0
            )
            axis_w = [
                frac[..., d] if corner[d] else 1.0 - frac[..., d]
                for d in range(ndim)
            ]
            weight = np.ones(dims, dtype=np.float64)
            for w in axis_w:
                weight = weight * w
            out += weight * vals
            if need_grad:
                for d in range(ndim):
                    partial = np.ones(dims, dtype=np.float64)
                    for d2 in range(ndim):
                        if d2 != d:
                            partial = partial * axis_w[d2]
                    sign = 1.0 if corner[d] else -1.0
                    grad[..., d] += sign * partial * vals
    return out, grad


def warp(data, theta) -> np.ndarray:
    """Resample data through the field: output(x) = data(x + theta(x))."""
    values = _as_values(data)
    theta = _as_theta(theta)
    if theta.shape[:-1] != values.shape:
        raise ValueError(
            f"field dims {theta.shape[:-1]} do not match data dims {values.shape}"
        )
    out, _ = _warp_terms(values, theta, need_grad=False)
    return out


def soft_dice(a, b) -> float:
    """(2*sum(ab) + eps) / (sum(a) + sum(b) + eps) on real-valued masks."""
    a = _as_values(a)
    b = _as_values(b)
    if a.shape != b.shape:
        raise ValueError(f"mask dims disagree: {a.shape} vs {b.shape}")
    num = 2.0 * float((a * b).sum()) + EPSILON
    den = float(a.sum()) + float(b.sum()) + EPSILON
    return num / den


def _normalize_pairs(pairs):
    if not pairs:
        raise ValueError("need at least one mask pair")
    out = []
    dims = None
    for fix, mov in pairs:
        f = _as_values(fix)
        m = _as_values(mov)
        if f.shape != m.shape:
            raise ValueError(f"pair dims disagree: {f.shape} vs {m.shape}")
        if dims is None:
            dims = f.shape
        elif f.shape != dims:
            raise ValueError(f"pairs disagree on dims: {f.shape} vs {dims}")
        out.append((f, m))
    return out, dims


def _loss_terms(pairs, theta, lam, need_grad):
    roi_total = 0.0
    grad = np.zeros_like(theta) if need_grad else None
    for fix, mov in pairs:
        warped, dwarp = _warp_terms(mov, theta, need_grad)
        inter = float((fix * warped).sum())
        den = float(fix.sum()) + float(warped.sum()) + EPSILON
        diff = warped - fix
        pair_term = 0.5 * (1.0 - (2.0 * inter + EPSILON) / den) + 0.5 * float(
            (diff**2).mean()
        )
        roi_total += pair_term
        # a pair at its floor has no descent direction; the quotient-rule
        # value there is the one-sided half of a kink and would poison the
        # shared field, so such a pair contributes the zero subgradient
        if need_grad and pair_term > 1e-15:
            # d soft_dice / d warped, quotient rule; then the chain through
            # the interpolation weights handled by dwarp
            ddice = (2.0 * fix * den - (2.0 * inter + EPSILON)) / den**2
            droi = -0.5 * ddice + diff / fix.size
            grad += droi[..., None] * dwarp
    roi = roi_total / len(pairs)
    with np.errstate(over="ignore"):
        reg = float((theta**2).mean())
    if need_grad:
        grad /= len(pairs)
        grad += lam * 2.0 * theta / theta.size
    return roi + lam * reg, roi, reg, grad


def loss(pairs, theta, lam: float = 0.1):
    """Objective value as (total, mean roi term, regularizer term)."""
    normalized, dims = _normalize_pairs(pairs)
    theta = _as_theta(theta)
    if theta.shape[:-1] != dims:
        raise ValueError(f"field dims {theta.shape[:-1]} do not match {dims}")
    total, roi, reg, _ = _loss_terms(normalized, theta, lam, need_grad=False)
    return total, roi, reg


def gradient(pairs, theta, lam: float = 0.1) -> np.ndarray:
    """Analytic d(total)/d(theta), shaped like theta."""
    normalized, dims = _normalize_pairs(pairs)
    theta = _as_theta(theta)
    if theta.shape[:-1] != dims:
        raise ValueError(f"field dims {theta.shape[:-1]} do not match {dims}")
    _, _, _, grad = _loss_terms(normalized, theta, lam, need_grad=True)
    return grad


def _line_search(pairs, theta, grad, total, seed_step, cfg):
    """Pick a step along -grad; returns (step, candidate, (total, roi, reg)).

    Candidate is None when no admissible step exists.  Halving runs until
    the loss stops increasing; doubling then continues while it strictly
    improves, so the accepted point sits near the 1-D minimum.
    """

    def evaluate(step):
        cand = theta - step * grad
        t, r, g, _ = _loss_terms(pairs, cand, cfg.lam, need_grad=False)
        return cand, (t, r, g)

    if not cfg.backtracking:
        cand, terms = evaluate(seed_step)
        if not np.isfinite(terms[0]):
            return seed_step, None, None
        return seed_step, cand, terms

    step = seed_step
    cand = terms = None
    for _ in range(cfg.max_halvings + 1):
        cand, terms = evaluate(step)
        if np.isfinite(terms[0]) and terms[0] <= total:
            break
        cand = terms = None
        step *= 0.5
    if cand is None:
        return step, None, None
    for _ in range(60):
        wider, w_terms = evaluate(step * 2.0)
        if not (np.isfinite(w_terms[0]) and w_terms[0] < terms[0]):
            break
        step *= 2.0
        cand, terms = wider, w_terms
    return step, cand, terms


def soften_mask(mask, width: float) -> np.ndarray:
    """Widen a binary mask into a signed-distance ramp of the given half-width.

    0.5 on the boundary, 1 at depth >= width inside, 0 at distance >= width
    outside, linear in between.  Degenerate masks (all set or all clear) and
    width 0 pass through unchanged.
    """
    values = _as_values(mask)
    inside = values > 0.5
    if width <= 0 or not inside.any() or inside.all():
        return values
    d_in = ndimage.distance_transform_edt(inside)
    d_out = ndimage.distance_transform_edt(~inside)
    return np.clip(0.5 + (d_in - d_out) / (2.0 * width), 0.0, 1.0)


def optimize(pairs, config: OptimizeConfig | None = None,
             spacing: tuple[float, ...] | None = None):
    """Descend the pair loss to a displacement field.

    Runs the configured iteration budget.  With backtracking, a step is
    halved until it does not increase the loss; once no admissible step
    improves, the iterate is stationary for this scheme and the remaining
    iterations would repeat it, so the trajectory is filled without further
    evaluation.  A non-finite loss aborts with the last finite state and the
    diverged flag raised.

    Returns (DisplacementField, LossReport); the report's final_dice scores
    the raw input masks under the final field, not the softened working set.
    """
    cfg = config or OptimizeConfig()
    raw, dims = _normalize_pairs(pairs)
    ndim = len(dims)
    if spacing is None:
        spacing = getattr(pairs[0][0], "spacing", None) or (1.0,) * ndim

    # identical pairs stay raw: there is nothing to recover, and widening
    # them would let the dice term re-carve the ramp shoulders into a
    # nonzero field around a perfectly aligned shape
    work = [
        (f, m) if np.array_equal(f, m)
        else (soften_mask(f, cfg.smooth_ramp), soften_mask(m, cfg.smooth_ramp))
        for f, m in raw
    ]
    if cfg.init is None:
        theta = np.zeros(dims + (ndim,), dtype=np.float64)
    else:
        theta = _as_theta(cfg.init).copy()
        if theta.shape[:-1] != dims:
            raise ValueError("init field dims do not match the pair masks")

    totals, rois, regs = [], [], []
    diverged = False
    total, roi, reg, grad = _loss_terms(work, theta, cfg.lam, need_grad=True)
    if not (np.isfinite(total) and np.all(np.isfinite(grad))):
        diverged = True
    else:
        # the search along -grad halves the step until the loss stops
        # increasing, then keeps doubling while it strictly improves; each
        # iteration lands near the 1-D optimum along its direction, and the
        # accepted step seeds the next iteration.  This matters because the
        # mean-based loss makes raw gradient entries O(1/N), so a fixed
        # eta-sized step could never cross voxel-scale distances.
        seed_step = cfg.eta
        step_cap = cfg.eta * 1e12
        it = 0
        while it < cfg.iters:
            step, cand, c_terms = _line_search(
                work, theta, grad, total, seed_step, cfg
            )
            if cand is None:
                if cfg.backtracking:
                    # stationary: every admissible step increases the loss,
                    # so the remaining iterations would repeat this iterate
                    totals += [total] * (cfg.iters - it)
                    rois += [roi] * (cfg.iters - it)
                    regs += [reg] * (cfg.iters - it)
                else:
                    diverged = True
                break
            if cfg.backtracking:
                seed_step = min(2.0 * step, step_cap)
            if float(np.abs(cand).max()) > F32_LIMIT:
                # runaway iterate: keep the last representable field
                diverged = True
                break
            theta = cand
            total, roi, reg = c_terms
            totals.append(total)
            rois.append(roi)
            regs.append(reg)
            it += 1
            if it < cfg.iters:
                _, _, _, grad = _loss_terms(work, theta, cfg.lam, need_grad=True)
                if not np.all(np.isfinite(grad)):
                    diverged = True
                    break

    field = DisplacementField(
        field=theta.astype(np.float32),
        spacing=tuple(spacing),
        lam=cfg.lam,
        eta=cfg.eta,
        iterations=len(totals),
    )
    final_dice = tuple(soft_dice(f, warp(m, field)) for f, m in raw)
    report = LossReport(
        total=tuple(totals),
        roi=tuple(rois),
        reg=tuple(regs),
        final_dice=final_dice,
        diverged=diverged,
    )
    return field, report


# --- serialization ---------------------------------------------------------


def write_ddf(ddf: DisplacementField, path) -> Path:
    """Store the field as an embedding container with channels = D."""
    grid = EmbeddingGrid(ddf.field, ddf.spacing)
    return volio.write_embedding(
        grid,
        path,
        extra={
            "role": "ddf",
            "lambda": ddf.lam,
            "eta": ddf.eta,
            "iterations": ddf.iterations,
        },
    )


def read_ddf(path) -> DisplacementField:
    meta = volio.read_header(path)
    if meta.get("role") != "ddf":
        raise volio.FormatError(f"{path}: embedding container is not a ddf")
    grid = volio.read_embedding(path)
    if grid.channels != len(grid.grid_dims):
        raise volio.FormatError(
            f"{path}: ddf needs {len(grid.grid_dims)} channels, "
            f"found {grid.channels}"
        )
    return DisplacementField(
        field=grid.values,
        spacing=grid.spacing,
        lam=float(meta.get("lambda", 0.0)),
        eta=float(meta.get("eta", 1.0)),
        iterations=int(meta.get("iterations", 0)),
    )
