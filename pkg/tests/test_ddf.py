"""Warping, the pair loss, its gradient, and the descent loop.

The gradient is checked against central finite differences of the loss at
displacements kept away from integer values, where the interpolation is
smooth.  Warping is checked against explicit slicing for integer
translations.  The recovery cases reuse the painted-scene generator so the
masks come from an independent construction.
"""

import numpy as np
import pytest

from promptreg import volio
from promptreg.ddf import (
    EPSILON,
    DisplacementField,
    OptimizeConfig,
    gradient,
    loss,
    optimize,
    read_ddf,
    soft_dice,
    soften_mask,
    warp,
    write_ddf,
)
from promptreg.fixture import fixture_generate


def translate_oracle(values, t):
    """output(x) = values(x + t) for integer t, zero outside the image."""
    out = np.zeros_like(values, dtype=np.float64)
    src = []
    dst = []
    for n, step in zip(values.shape, t):
        lo = max(0, -step)
        hi = min(n, n - step)
        dst.append(slice(lo, hi))
        src.append(slice(lo + step, hi + step))
    out[tuple(dst)] = values[tuple(src)]
    return out


def fd_gradient(pairs, theta, lam, picks, h=1e-3):
    """Central differences of loss() at a sample of field components."""
    out = {}
    for idx in picks:
        plus = theta.copy()
        minus = theta.copy()
        plus[idx] += h
        minus[idx] -= h
        out[idx] = (loss(pairs, plus, lam)[0] - loss(pairs, minus, lam)[0]) / (
            2.0 * h
        )
    return out


def smooth_theta(rng, shape):
    """Displacements in +-[0.05, 0.45], clear of interpolation kinks."""
    raw = (rng.random(shape) - 0.5) * 0.8
    return np.sign(raw) * np.clip(np.abs(raw), 0.05, 0.45)


def disk_scene(shift, center=(20.0, 24.0), radius=3.0, dims=(48, 48)):
    scene = fixture_generate(
        {
            "dims": list(dims),
            "shapes": [
                {
                    "kind": "disk",
                    "center": list(center),
                    "radius": radius,
                    "shift": list(shift),
                    "prompt": "hole",
                }
            ],
        },
        seed=5,
    )
    shape = scene.shapes[0]
    return (
        shape.mask_fix.voxels.astype(np.float64),
        shape.mask_mov.voxels.astype(np.float64),
    )


class TestWarp:
    def test_zero_field_is_identity(self):
        rng = np.random.default_rng(3)
        values = rng.random((7, 9))
        theta = np.zeros((7, 9, 2))
        assert np.array_equal(warp(values, theta), values)

    @pytest.mark.parametrize("t", [(1, 0), (0, 2), (-2, 1), (3, -3)])
    def test_integer_translation_matches_slicing(self, t):
        rng = np.random.default_rng(4)
        values = rng.random((12, 11))
        theta = np.tile(np.array(t, dtype=np.float64), (12, 11, 1))
        assert np.allclose(warp(values, theta), translate_oracle(values, t))

    def test_integer_translation_3d(self):
        rng = np.random.default_rng(5)
        values = rng.random((6, 7, 8))
        t = (1, 0, -2)
        theta = np.tile(np.array(t, dtype=np.float64), (6, 7, 8, 1))
        assert np.allclose(warp(values, theta), translate_oracle(values, t))

    def test_half_voxel_shift_averages_neighbors(self):
        values = np.arange(6, dtype=np.float64)[:, None] * np.ones((6, 3))
        theta = np.zeros((6, 3, 2))
        theta[..., 0] = 0.5
        out = warp(values, theta)
        # interior rows: mean of row i and i+1; last row: half its own
        # value because the far corner falls outside and contributes zero
        assert np.allclose(out[:-1], (values[:-1] + values[1:]) / 2.0)
        assert np.allclose(out[-1], values[-1] / 2.0)

    def test_accepts_mask_objects(self):
        mask = volio.BinaryMask(np.eye(4, dtype=np.uint8), spacing=(1.0, 1.0))
        theta = np.zeros((4, 4, 2))
        assert np.array_equal(warp(mask, theta), np.eye(4))

    def test_dims_mismatch_rejected(self):
        with pytest.raises(ValueError, match="do not match"):
            warp(np.zeros((4, 4)), np.zeros((5, 4, 2)))

    def test_field_shape_rejected(self):
        with pytest.raises(ValueError, match="dims"):
            warp(np.zeros((4, 4)), np.zeros((4, 4, 3)))


class TestSoftDice:
    def test_self_overlap_is_one(self):
        mask = np.zeros((5, 5))
        mask[1:4, 2:4] = 1.0
        assert soft_dice(mask, mask) == 1.0

    def test_disjoint_is_near_zero(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        a[0, 0] = 1.0
        b[3, 3] = 1.0
        assert soft_dice(a, b) == pytest.approx(EPSILON / (2.0 + EPSILON))

    def test_half_overlap(self):
        a = np.zeros((4, 4))
        b = np.zeros((4, 4))
        a[0, :2] = 1.0  # 2 voxels
        b[0, 1:3] = 1.0  # 2 voxels, 1 shared
        expected = (2.0 * 1.0 + EPSILON) / (4.0 + EPSILON)
        assert soft_dice(a, b) == pytest.approx(expected, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        a = rng.random((5, 6))
        b = rng.random((5, 6))
        assert soft_dice(a, b) == pytest.approx(soft_dice(b, a), abs=1e-15)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="disagree"):
            soft_dice(np.zeros((3, 3)), np.zeros((4, 3)))


class TestLoss:
    def test_hand_example_at_zero_field(self):
        fix = np.array([[1.0, 1.0], [0.0, 0.0]])
        mov = np.array([[1.0, 0.0], [0.0, 1.0]])
        theta = np.zeros((2, 2, 2))
        total, roi, reg = loss([(fix, mov)], theta, lam=0.7)
        dice = (2.0 * 1.0 + EPSILON) / (4.0 + EPSILON)
        mse = 2.0 / 4.0
        assert roi == pytest.approx(0.5 * (1.0 - dice) + 0.5 * mse, abs=1e-12)
        assert reg == 0.0
        assert total == pytest.approx(roi, abs=1e-15)

    def test_lam_scales_only_the_regularizer(self):
        rng = np.random.default_rng(7)
        fix = (rng.random((6, 6)) > 0.6).astype(np.float64)
        mov = (rng.random((6, 6)) > 0.6).astype(np.float64)
        theta = smooth_theta(rng, (6, 6, 2))
        t0, roi0, _ = loss([(fix, mov)], theta, lam=0.0)
        t5, roi5, reg5 = loss([(fix, mov)], theta, lam=5.0)
        assert roi5 == pytest.approx(roi0, abs=1e-15)
        assert reg5 == pytest.approx(float((theta**2).mean()), abs=1e-15)
        assert t5 - t0 == pytest.approx(5.0 * reg5, abs=1e-12)

    def test_pair_order_irrelevant(self):
        rng = np.random.default_rng(8)
        pairs = [
            (rng.random((5, 5)), rng.random((5, 5))) for _ in range(3)
        ]
        theta = smooth_theta(rng, (5, 5, 2))
        assert loss(pairs, theta)[0] == pytest.approx(
            loss(pairs[::-1], theta)[0], abs=1e-15
        )

    def test_empty_pairs_rejected(self):
        with pytest.raises(ValueError, match="at least one"):
            loss([], np.zeros((4, 4, 2)))

    def test_pair_dims_mismatch_rejected(self):
        with pytest.raises(ValueError, match="disagree"):
            loss([(np.zeros((4, 4)), np.zeros((4, 5)))], np.zeros((4, 4, 2)))

    def test_theta_dims_mismatch_rejected(self):
        with pytest.raises(ValueError, match="do not match"):
            loss([(np.zeros((4, 4)), np.zeros((4, 4)))], np.zeros((5, 4, 2)))


class TestGradient:
    def test_matches_finite_differences_2d(self):
        rng = np.random.default_rng(9)
        fix = rng.random((16, 16))
        mov = rng.random((16, 16))
        theta = smooth_theta(rng, (16, 16, 2))
        g = gradient([(fix, mov)], theta, lam=0.1)
        picks = [
            (rng.integers(16), rng.integers(16), rng.integers(2))
            for _ in range(40)
        ]
        fd = fd_gradient([(fix, mov)], theta, 0.1, picks)
        for idx, val in fd.items():
            scale = max(abs(val), abs(g[idx]), 1e-8)
            assert abs(g[idx] - val) / scale < 1e-4

    def test_matches_finite_differences_3d(self):
        rng = np.random.default_rng(10)
        fix = rng.random((8, 8, 8))
        mov = rng.random((8, 8, 8))
        theta = smooth_theta(rng, (8, 8, 8, 3))
        g = gradient([(fix, mov)], theta, lam=0.1)
        picks = [
            (rng.integers(8), rng.integers(8), rng.integers(8), rng.integers(3))
            for _ in range(30)
        ]
        fd = fd_gradient([(fix, mov)], theta, 0.1, picks)
        for idx, val in fd.items():
            scale = max(abs(val), abs(g[idx]), 1e-8)
            assert abs(g[idx] - val) / scale < 1e-4

    def test_regularizer_gradient_alone(self):
        # all-zero masks sit at the loss floor, so only the regularizer
        # derivative 2*lam*theta / (D*N) survives
        fix = np.zeros((5, 4))
        mov = np.zeros((5, 4))
        theta = np.zeros((5, 4, 2))
        theta[2, 1, 0] = 0.3
        g = gradient([(fix, mov)], theta, lam=0.25)
        expected = np.zeros_like(theta)
        expected[2, 1, 0] = 2.0 * 0.25 * 0.3 / theta.size
        assert np.allclose(g, expected, atol=1e-15)

    def test_floor_pair_contributes_zero(self):
        # a perfectly aligned pair has no descent direction; the one-sided
        # kink value must not leak into the shared field
        fix, _ = disk_scene((3, 0))
        g = gradient([(fix, fix)], np.zeros(fix.shape + (2,)), lam=0.0)
        assert np.array_equal(g, np.zeros_like(g))

    def test_perturbed_alignment_matches_fd(self):
        fix, _ = disk_scene((3, 0))
        rng = np.random.default_rng(11)
        theta = smooth_theta(rng, fix.shape + (2,))
        g = gradient([(fix, fix)], theta, lam=0.1)
        picks = [(18, 24, 0), (20, 21, 1), (22, 26, 0)]
        fd = fd_gradient([(fix, fix)], theta, 0.1, picks)
        for idx, val in fd.items():
            scale = max(abs(val), abs(g[idx]), 1e-8)
            assert abs(g[idx] - val) / scale < 1e-4


class TestSoftenMask:
    def test_block_levels(self):
        mask = np.zeros((7, 7))
        mask[2:5, 2:5] = 1.0
        out = soften_mask(mask, 2.0)
        # center of the 3x3 block: 2 in, edge voxels: 1 in, ring outside: 1 out
        assert out[3, 3] == pytest.approx(1.0)
        assert out[2, 3] == pytest.approx(0.5 + (1.0 - 0.0) / 4.0)
        assert out[1, 3] == pytest.approx(0.5 + (0.0 - 1.0) / 4.0)
        assert out[0, 3] == pytest.approx(0.0)

    def test_width_zero_passthrough(self):
        mask = np.zeros((4, 4))
        mask[1, 1] = 1.0
        assert np.array_equal(soften_mask(mask, 0.0), mask)

    @pytest.mark.parametrize("fill", [0.0, 1.0])
    def test_degenerate_passthrough(self, fill):
        mask = np.full((4, 4), fill)
        assert np.array_equal(soften_mask(mask, 3.0), mask)

    def test_range_and_monotone_in_depth(self):
        fix, _ = disk_scene((3, 0))
        out = soften_mask(fix, 2.4)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out[20, 24] == 1.0  # disk center, deeper than the ramp
        assert out[fix > 0.5].min() >= 0.5


class TestOptimize:
    def test_translation_recovery(self):
        fix, mov = disk_scene((3, 0))
        field, report = optimize([(fix, mov)])
        theta = field.field.astype(np.float64)
        inside = fix > 0.5
        mean_disp = theta[inside].mean(axis=0)
        assert abs(mean_disp[0] - 3.0) <= 0.5
        assert abs(mean_disp[1] - 0.0) <= 0.5
        assert soft_dice(fix, warp(mov, theta)) >= 0.95
        assert report.final_dice[0] >= 0.95
        totals = report.total
        assert len(totals) == 200
        assert all(b <= a + 1e-12 for a, b in zip(totals, totals[1:]))
        assert not report.diverged

    def test_identity_pair_keeps_zero_field(self):
        fix, _ = disk_scene((3, 0))
        field, report = optimize([(fix, fix)])
        assert np.array_equal(field.field, np.zeros_like(field.field))
        assert report.final_dice[0] == 1.0
        assert len(report.total) == 200

    def test_mixed_pairs_leave_aligned_shape_alone(self):
        scene = fixture_generate(
            {
                "dims": [48, 48],
                "shapes": [
                    {
                        "kind": "disk",
                        "center": [20.0, 12.0],
                        "radius": 3.0,
                        "shift": [3, 0],
                        "prompt": "hole",
                    },
                    {
                        "kind": "disk",
                        "center": [24.0, 36.0],
                        "radius": 3.0,
                        "shift": [0, 0],
                        "prompt": "head",
                    },
                ],
            },
            seed=5,
        )
        moved, still = scene.shapes
        pairs = [
            (
                moved.mask_fix.voxels.astype(np.float64),
                moved.mask_mov.voxels.astype(np.float64),
            ),
            (
                still.mask_fix.voxels.astype(np.float64),
                still.mask_mov.voxels.astype(np.float64),
            ),
        ]
        field, report = optimize(pairs)
        theta = field.field.astype(np.float64)
        assert report.final_dice[0] >= 0.95
        assert report.final_dice[1] == 1.0
        still_zone = pairs[1][0] > 0.5
        assert np.abs(theta[still_zone]).max() == 0.0

    def test_heavier_regularization_shrinks_the_field(self):
        fix, mov = disk_scene((3, 0))
        means = []
        for lam in (0.0, 0.1, 10.0):
            field, _ = optimize([(fix, mov)], OptimizeConfig(lam=lam))
            means.append(float(np.abs(field.field).mean()))
        assert means[0] >= means[1] >= means[2]
        assert means[0] > means[2]

    def test_binary_masks_recover_poorly_without_softening(self):
        # interpolation gradients reach one voxel, so only boundary voxels
        # of a raw binary pair descend; the interior never crosses the gap
        fix, mov = disk_scene((3, 0))
        field, report = optimize([(fix, mov)], OptimizeConfig(smooth_ramp=0.0))
        assert len(report.total) == 200
        assert all(
            b <= a + 1e-12 for a, b in zip(report.total, report.total[1:])
        )
        assert report.final_dice[0] < 0.95

    def test_initial_field_is_respected(self):
        fix, mov = disk_scene((3, 0))
        init = np.zeros(fix.shape + (2,), dtype=np.float32)
        init[..., 0] = 3.0
        start = DisplacementField(
            field=init, spacing=(1.0, 1.0), lam=0.1, eta=1.0, iterations=0
        )
        field, report = optimize(
            [(fix, mov)], OptimizeConfig(iters=0, init=start)
        )
        # zero iterations hand the init back verbatim; here it is the exact
        # translation, so the raw masks align perfectly
        assert np.array_equal(field.field, init)
        assert report.final_dice[0] == 1.0

    def test_divergence_without_backtracking(self):
        fix, mov = disk_scene((3, 0))
        field, report = optimize(
            [(fix, mov)], OptimizeConfig(eta=1e30, backtracking=False, iters=50)
        )
        assert report.diverged
        assert len(report.total) < 50
        assert np.all(np.isfinite(field.field))

    def test_zero_iterations(self):
        fix, mov = disk_scene((3, 0))
        field, report = optimize([(fix, mov)], OptimizeConfig(iters=0))
        assert field.iterations == 0
        assert report.total == ()
        assert np.array_equal(field.field, np.zeros_like(field.field))

    def test_spacing_carried_from_mask_objects(self):
        mask = volio.BinaryMask(
            np.pad(np.ones((2, 2), np.uint8), 2), spacing=(0.5, 2.0)
        )
        field, _ = optimize([(mask, mask)], OptimizeConfig(iters=1))
        assert field.spacing == (0.5, 2.0)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"lam": -0.1},
            {"eta": 0.0},
            {"iters": -1},
            {"max_halvings": -2},
            {"smooth_ramp": -1.0},
        ],
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            OptimizeConfig(**kwargs)

    def test_init_dims_mismatch_rejected(self):
        fix, mov = disk_scene((3, 0))
        wrong = DisplacementField(
            field=np.zeros((10, 10, 2), np.float32),
            spacing=(1.0, 1.0),
            lam=0.1,
            eta=1.0,
            iterations=0,
        )
        with pytest.raises(ValueError, match="init"):
            optimize([(fix, mov)], OptimizeConfig(init=wrong))


class TestFieldContainer:
    def make_field(self):
        rng = np.random.default_rng(12)
        values = rng.standard_normal((6, 5, 2)).astype(np.float32)
        return DisplacementField(
            field=values, spacing=(1.0, 2.5), lam=0.1, eta=1.0, iterations=42
        )

    def test_round_trip(self, tmp_path):
        field = self.make_field()
        write_ddf(field, tmp_path / "disp")
        back = read_ddf(tmp_path / "disp")
        assert np.array_equal(back.field, field.field)
        assert back.spacing == field.spacing
        assert back.lam == field.lam
        assert back.eta == field.eta
        assert back.iterations == 42

    def test_plain_embedding_rejected(self, tmp_path):
        grid = volio.EmbeddingGrid(
            np.zeros((4, 4, 2), np.float32), spacing=(1.0, 1.0)
        )
        volio.write_embedding(grid, tmp_path / "emb")
        with pytest.raises(volio.FormatError, match="not a ddf"):
            read_ddf(tmp_path / "emb")

    def test_channel_count_must_match_rank(self, tmp_path):
        grid = volio.EmbeddingGrid(
            np.zeros((4, 4, 3), np.float32), spacing=(1.0, 1.0)
        )
        volio.write_embedding(grid, tmp_path / "bad", extra={"role": "ddf"})
        with pytest.raises(volio.FormatError, match="channels"):
            read_ddf(tmp_path / "bad")

    def test_field_shape_validation(self):
        with pytest.raises(ValueError, match="dims"):
            DisplacementField(
                field=np.zeros((4, 4, 3), np.float32),
                spacing=(1.0, 1.0),
                lam=0.1,
                eta=1.0,
                iterations=0,
            )

    def test_non_finite_rejected(self):
        bad = np.zeros((4, 4, 2), np.float32)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError, match="finite"):
            DisplacementField(
                field=bad, spacing=(1.0, 1.0), lam=0.1, eta=1.0, iterations=0
            )
