"""Region pairing by embedding prototypes.

Each candidate region is summarized by one prototype vector: its mask is
resampled onto the backend's coarse embedding grid and the covered cells are
mean-pooled.  Prototypes from the fixed and moving image meet in a similarity
matrix, and a one-to-one selection strategy turns that matrix into region
pairs.  Regions are only ever compared, never re-segmented, so the whole
stage is training-free and cheap.

Two strategies are kept deliberately separate and interchangeable:

* ``mutual_nn``: a pair survives when each side is the other's best match.
* ``greedy``: repeatedly take the globally best remaining entry.

Both break ties toward the lowest (row, column) index so reruns are stable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from promptreg.gateway import PromptResponse, RoiRecord
from promptreg.volio import BinaryMask, EmbeddingGrid

DEFAULT_TAU = 0.5


def resample_mask_to_grid(mask: BinaryMask, grid_dims) -> np.ndarray:
    """Project a full-resolution mask onto the embedding grid.

    Each grid cell samples the source voxel nearest its center (the grids are
    center-aligned).  If every sample misses a nonempty mask, the cell under
    the mask centroid is claimed instead, so small regions keep a footprint.
    Raises ValueError on an empty mask or a dimensionality mismatch.
    """
    support = mask.voxels > 0
    if not support.any():
        raise ValueError("cannot resample an empty mask")
    if len(grid_dims) != support.ndim:
        raise ValueError(
            f"grid has {len(grid_dims)} axes, mask has {support.ndim}"
        )
    idx = [
        np.minimum(n - 1, ((np.arange(g) + 0.5) * n / g).astype(np.int64))
        for g, n in zip(grid_dims, support.shape)
    ]
    cells = support[np.ix_(*idx)]
    if not cells.any():
        centroid = np.argwhere(support).mean(axis=0)
        cell = tuple(
            min(g - 1, int(c * g / n))
            for c, g, n in zip(centroid, grid_dims, support.shape)
        )
        cells[cell] = True
    return cells


def pool_prototype(grid: EmbeddingGrid, cells: np.ndarray) -> np.ndarray:
    """Mean embedding over the claimed cells, as float64."""
    if cells.shape != grid.grid_dims:
        raise ValueError(
            f"cell mask {cells.shape} does not fit grid {grid.grid_dims}"
        )
    if not cells.any():
        raise ValueError("no cells claimed, nothing to pool")
    return grid.values[cells].astype(np.float64).mean(axis=0)


@dataclass(frozen=True)
class Prototype:
    """One region's pooled embedding; invalid when the vector has no norm."""

    record_id: int
    vector: np.ndarray
    valid: bool
    prompt: str
    slice_index: int | None


def prototypes_for(response: PromptResponse) -> list[Prototype]:
    """Pool one prototype per record against its slice's embedding grid."""
    protos = []
    for rec in response.records:
        try:
            grid = response.embedding_for(rec.slice_index)
        except KeyError as exc:
            raise ValueError(
                f"record {rec.id} has no embedding grid for its slice"
            ) from exc
        cells = resample_mask_to_grid(rec.mask, grid.grid_dims)
        vector = pool_prototype(grid, cells)
        vector.flags.writeable = False
        protos.append(
            Prototype(
                record_id=rec.id,
                vector=vector,
                valid=bool(np.linalg.norm(vector) > 0.0),
                prompt=rec.prompt,
                slice_index=rec.slice_index,
            )
        )
    return protos


@dataclass(frozen=True)
class SimilarityMatrix:
    """Pairwise prototype similarity with an entry validity mask.

    ``values[i, j]`` compares fixed prototype i to moving prototype j.
    Invalid entries (either prototype has zero norm, or a constraint such as
    a slice window excludes the pair) hold 0.0 but are never eligible for
    matching; validity is a separate channel, not a sentinel value.
    """

    values: np.ndarray
    valid: np.ndarray
    metric: str
    fix_ids: tuple[int, ...]
    mov_ids: tuple[int, ...]

    def __post_init__(self):
        if self.values.shape != self.valid.shape:
            raise ValueError("values and valid mask disagree on shape")
        if self.values.shape != (len(self.fix_ids), len(self.mov_ids)):
            raise ValueError("matrix shape disagrees with id lists")

    @staticmethod
    def dense(values, metric: str = "cosine") -> "SimilarityMatrix":
        """Wrap a raw matrix with all entries valid and positional ids."""
        arr = np.asarray(values, dtype=np.float64)
        return SimilarityMatrix(
            values=arr,
            valid=np.ones(arr.shape, dtype=bool),
            metric=metric,
            fix_ids=tuple(range(arr.shape[0])),
            mov_ids=tuple(range(arr.shape[1])),
        )


def similarity_matrix(
    fix_protos, mov_protos, metric: str = "cosine"
) -> SimilarityMatrix:
    """Compare every fixed prototype against every moving prototype.

    ``cosine`` values live in [-1, 1] (clipped against float drift).  ``l2``
    values are negated euclidean distances, so that larger still means more
    similar; note the usual tau ranges do not transfer between metrics.
    """
    if metric not in ("cosine", "l2"):
        raise ValueError(f"unknown metric {metric!r}")
    fix_mat = np.stack([p.vector for p in fix_protos]) if fix_protos else (
        np.zeros((0, 1))
    )
    mov_mat = np.stack([p.vector for p in mov_protos]) if mov_protos else (
        np.zeros((0, 1))
    )
    if fix_protos and mov_protos and fix_mat.shape[1] != mov_mat.shape[1]:
        raise ValueError(
            f"prototype channels disagree: {fix_mat.shape[1]} vs {mov_mat.shape[1]}"
        )
    valid = np.outer(
        [p.valid for p in fix_protos], [p.valid for p in mov_protos]
    ).astype(bool)
    dots = fix_mat @ mov_mat.T
    if metric == "cosine":
        denom = np.outer(
            np.linalg.norm(fix_mat, axis=1), np.linalg.norm(mov_mat, axis=1)
        )
        values = np.divide(
            dots, denom, out=np.zeros_like(dots), where=denom > 0.0
        )
        values = np.clip(values, -1.0, 1.0)
    else:
        sq = (
            np.sum(fix_mat**2, axis=1)[:, None]
            + np.sum(mov_mat**2, axis=1)[None, :]
            - 2.0 * dots
        )
        values = -np.sqrt(np.maximum(sq, 0.0))
    values = np.where(valid, values, 0.0)
    return SimilarityMatrix(
        values=values,
        valid=valid,
        metric=metric,
        fix_ids=tuple(p.record_id for p in fix_protos),
        mov_ids=tuple(p.record_id for p in mov_protos),
    )


def match_greedy(sim: SimilarityMatrix, tau: float) -> list[tuple[int, int, float]]:
    """Take the best remaining entry until nothing clears tau.

    Each selection retires its row and column.  np.argmax scans in C order,
    so equal entries resolve to the lowest (row, column) pair.
    """
    values = np.where(sim.valid, sim.values, -np.inf)
    pairs = []
    while values.size and np.isfinite(values).any():
        flat = int(np.argmax(values))
        i, j = np.unravel_index(flat, values.shape)
        best = values[i, j]
        if not np.isfinite(best) or best < tau:
            break
        pairs.append((int(i), int(j), float(best)))
        values[i, :] = -np.inf
        values[:, j] = -np.inf
    return pairs


def match_mutual_nn(
    sim: SimilarityMatrix, tau: float
) -> list[tuple[int, int, float]]:
    """Keep pairs where row i's best column is j and column j's best row is i.

    Argmax resolves ties to the first occurrence on both axes, which again
    favors the lowest index deterministically.
    """
    values = np.where(sim.valid, sim.values, -np.inf)
    if values.size == 0:
        return []
    best_col = np.argmax(values, axis=1)
    best_row = np.argmax(values, axis=0)
    pairs = []
    for i in range(values.shape[0]):
        j = int(best_col[i])
        v = values[i, j]
        if np.isfinite(v) and v >= tau and int(best_row[j]) == i:
            pairs.append((i, j, float(v)))
    return pairs


STRATEGIES = {"mutual_nn": match_mutual_nn, "greedy": match_greedy}


@dataclass(frozen=True)
class MatchedPair:
    """A fixed/moving region pair with its full-resolution masks attached."""

    fix: RoiRecord
    mov: RoiRecord
    similarity: float
    prompt: str


@dataclass(frozen=True)
class CorrespondenceSet:
    pairs: tuple[MatchedPair, ...]
    strategy: str
    tau: float
    metric: str

    def to_json(self) -> dict:
        return {
            "pairs": [
                {
                    "fix_id": p.fix.id,
                    "mov_id": p.mov.id,
                    "similarity": p.similarity,
                    "prompt": p.prompt,
                }
                for p in self.pairs
            ],
            "strategy": self.strategy,
            "tau": self.tau,
            "metric": self.metric,
        }


def match_pipeline(
    fix_resp: PromptResponse,
    mov_resp: PromptResponse,
    tau: float = DEFAULT_TAU,
    strategy: str = "mutual_nn",
    metric: str = "cosine",
    cross_prompt: bool = False,
    slice_window: int | None = None,
) -> CorrespondenceSet:
    """Pair regions between two prompt responses.

    By default regions only compete within their own prompt; cross_prompt
    lifts that and matches everything against everything.  slice_window, when
    set, invalidates pairs whose slice indices differ by more than the window
    (records without a slice index are never window-filtered).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if not fix_resp.records or not mov_resp.records:
        raise ValueError("both responses need at least one region to match")

    fix_protos = prototypes_for(fix_resp)
    mov_protos = prototypes_for(mov_resp)
    fix_by_id = {r.id: r for r in fix_resp.records}
    mov_by_id = {r.id: r for r in mov_resp.records}

    if cross_prompt:
        groups = [(None, fix_protos, mov_protos)]
    else:
        prompts = []
        for p in fix_protos:
            if p.prompt not in prompts:
                prompts.append(p.prompt)
        groups = [
            (
                prompt,
                [p for p in fix_protos if p.prompt == prompt],
                [p for p in mov_protos if p.prompt == prompt],
            )
            for prompt in prompts
        ]

    matched = []
    for _, f_group, m_group in groups:
        if not f_group or not m_group:
            continue
        sim = similarity_matrix(f_group, m_group, metric=metric)
        if slice_window is not None:
            window = np.ones_like(sim.valid)
            for i, pf in enumerate(f_group):
                for j, pm in enumerate(m_group):
                    if pf.slice_index is not None and pm.slice_index is not None:
                        window[i, j] = (
                            abs(pf.slice_index - pm.slice_index) <= slice_window
                        )
            sim = SimilarityMatrix(
                values=np.where(window, sim.values, 0.0),
                valid=sim.valid & window,
                metric=sim.metric,
                fix_ids=sim.fix_ids,
                mov_ids=sim.mov_ids,
            )
        for i, j, value in STRATEGIES[strategy](sim, tau):
            fix_rec = fix_by_id[sim.fix_ids[i]]
            mov_rec = mov_by_id[sim.mov_ids[j]]
            matched.append(
                MatchedPair(
                    fix=fix_rec, mov=mov_rec,
                    similarity=value, prompt=fix_rec.prompt,
                )
            )

    matched.sort(key=lambda p: (p.fix.id, p.mov.id))
    return CorrespondenceSet(
        pairs=tuple(matched), strategy=strategy, tau=tau, metric=metric
    )
