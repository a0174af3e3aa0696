import numpy as np
import pytest
import torch

from resadapt.pooling import (
    maxpool,
    plan_levels,
    pool_plan,
    upsample,
    upsample_adjoint,
)

ISO = (1.0, 1.0, 1.0)
THICK = (0.5, 0.5, 3.0)


class TestPoolPlan:
    @pytest.mark.parametrize(
        "width,spacing,factors,spacing_out",
        [
            (2.0, (1.0, 1.0, 1.0), (2, 2, 2), (2.0, 2.0, 2.0)),
            (4.0, (2.0, 2.0, 2.0), (2, 2, 2), (4.0, 4.0, 4.0)),
            (8.0, (4.0, 4.0, 4.0), (2, 2, 2), (8.0, 8.0, 8.0)),
            (2.0, (0.5, 0.5, 3.0), (4, 4, 1), (2.0, 2.0, 3.0)),
            (4.0, (2.0, 2.0, 3.0), (2, 2, 1), (4.0, 4.0, 3.0)),
            (8.0, (4.0, 4.0, 3.0), (2, 2, 2), (8.0, 8.0, 6.0)),
            (16.0, (8.0, 8.0, 6.0), (2, 2, 2), (16.0, 16.0, 12.0)),
        ],
    )
    def test_reference_cases(self, width, spacing, factors, spacing_out):
        plan = pool_plan(width, spacing)
        assert plan.factors == factors
        assert plan.spacing_out == spacing_out

    def test_never_below_one(self):
        assert pool_plan(2.0, (3.0, 5.0, 8.0)).factors == (1, 1, 1)

    def test_rejects_bad_width(self):
        with pytest.raises(ValueError):
            pool_plan(0.0, ISO)


class TestPlanLevels:
    def test_isotropic_reference_table(self):
        rows = plan_levels(ISO, depth=3)
        assert [r.conv_extent for r in rows] == [(5, 5, 5)] * 4
        assert [r.pool_factors for r in rows] == [(2, 2, 2)] * 4
        assert [r.spacing_mm for r in rows] == [
            (1.0, 1.0, 1.0),
            (2.0, 2.0, 2.0),
            (4.0, 4.0, 4.0),
            (8.0, 8.0, 8.0),
        ]
        assert [r.conv_width_mm for r in rows] == [5.0, 10.0, 20.0, 40.0]
        assert [r.pool_width_mm for r in rows] == [2.0, 4.0, 8.0, 16.0]

    def test_thick_slice_reference_table(self):
        rows = plan_levels(THICK, depth=3)
        assert [r.conv_extent for r in rows] == [
            (11, 11, 1),
            (5, 5, 3),
            (5, 5, 7),
            (5, 5, 7),
        ]
        assert [r.pool_factors for r in rows] == [
            (4, 4, 1),
            (2, 2, 1),
            (2, 2, 2),
            (2, 2, 2),
        ]
        assert [r.spacing_mm for r in rows] == [
            (0.5, 0.5, 3.0),
            (2.0, 2.0, 3.0),
            (4.0, 4.0, 3.0),
            (8.0, 8.0, 6.0),
        ]

    def test_anisotropy_bounded_on_spacing_sweep(self):
        # The exact claim "ratio never increases" fails for the floor rule
        # (e.g. (2, 2.5, 2.5) at width 4 -> (4, 2.5, 2.5)); what holds is that
        # the ratio never exceeds max(ratio_in, 2).
        values = (0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0)
        for sx in values:
            for sy in values:
                for sz in values:
                    s = (sx, sy, sz)
                    if max(s) / min(s) > 6.0:
                        continue
                    for row in plan_levels(s, depth=3):
                        ratio_in = max(row.spacing_mm) / min(row.spacing_mm)
                        out = tuple(
                            a * k for a, k in zip(row.spacing_mm, row.pool_factors)
                        )
                        ratio_out = max(out) / min(out)
                        assert ratio_out <= max(ratio_in, 2.0) + 1e-12

    @pytest.mark.parametrize("spacing", [ISO, THICK, (0.5, 0.5, 1.0), (1.0, 1.0, 3.0)])
    def test_anisotropy_non_increasing_on_reference_spacings(self, spacing):
        for row in plan_levels(spacing, depth=3):
            ratio_in = max(row.spacing_mm) / min(row.spacing_mm)
            out = tuple(a * k for a, k in zip(row.spacing_mm, row.pool_factors))
            ratio_out = max(out) / min(out)
            if ratio_in > 1.0:
                assert ratio_out <= ratio_in + 1e-12


def reference_maxpool(grid, factors):
    c = grid.shape[0]
    dims = grid.shape[1:]
    out_dims = tuple(int(np.ceil(n / k)) for n, k in zip(dims, factors))
    out = np.full((c,) + out_dims, -np.inf)
    for ch in range(c):
        for ox in range(out_dims[0]):
            for oy in range(out_dims[1]):
                for oz in range(out_dims[2]):
                    block = grid[
                        ch,
                        ox * factors[0] : (ox + 1) * factors[0],
                        oy * factors[1] : (oy + 1) * factors[1],
                        oz * factors[2] : (oz + 1) * factors[2],
                    ]
                    out[ch, ox, oy, oz] = block.max()
    return out


class TestGridOps:
    @pytest.mark.parametrize("dims", [(4, 4, 4), (5, 6, 7), (5, 5, 1)])
    @pytest.mark.parametrize("factors", [(2, 2, 2), (2, 2, 1), (3, 2, 1)])
    def test_maxpool_matches_reference(self, dims, factors):
        rng = np.random.default_rng(17)
        grid = rng.standard_normal((3,) + dims)
        np.testing.assert_array_equal(
            maxpool(grid, factors), reference_maxpool(grid, factors)
        )

    def test_maxpool_composition_when_dims_divide(self):
        rng = np.random.default_rng(18)
        grid = rng.standard_normal((2, 8, 8, 4))
        once = maxpool(maxpool(grid, (2, 2, 2)), (2, 2, 1))
        combined = maxpool(grid, (4, 4, 2))
        np.testing.assert_array_equal(once, combined)

    def test_upsample_repeats_blocks(self):
        grid = np.arange(8.0).reshape(1, 2, 2, 2)
        up = upsample(grid, (2, 2, 2))
        assert up.shape == (1, 4, 4, 4)
        for i in range(4):
            for j in range(4):
                for k in range(4):
                    assert up[0, i, j, k] == grid[0, i // 2, j // 2, k // 2]

    def test_upsample_crops_and_pads_to_target(self):
        grid = np.ones((1, 3, 3, 2))
        out = upsample(grid, (2, 2, 2), target_dims=(5, 7, 4))
        assert out.shape == (1, 5, 7, 4)
        assert np.all(out[0, :5, :6, :4] == 1.0)  # cropped x, padded y
        assert np.all(out[0, :, 6, :] == 0.0)

    def test_upsample_inverts_maxpool_on_block_constant_fields(self):
        rng = np.random.default_rng(19)
        coarse = rng.standard_normal((2, 3, 4, 2))
        fine = upsample(coarse, (2, 2, 3))
        np.testing.assert_array_equal(maxpool(fine, (2, 2, 3)), coarse)

    @pytest.mark.parametrize("target", [(6, 6, 6), (5, 6, 7), (7, 8, 5)])
    def test_adjoint_identity(self, target):
        rng = np.random.default_rng(20)
        src_dims = (3, 3, 3)
        factors = (2, 2, 2)
        x = torch.from_numpy(rng.standard_normal((2,) + src_dims))
        y = torch.from_numpy(rng.standard_normal((2,) + target))
        ux = upsample(x, factors, target_dims=target)
        uty = upsample_adjoint(y, factors, source_dims=src_dims)
        assert (ux * y).sum().item() == pytest.approx((x * uty).sum().item(), rel=1e-12)

    def test_rejects_bad_factors(self):
        with pytest.raises(ValueError):
            maxpool(np.zeros((1, 4, 4, 4)), (0, 2, 2))
        with pytest.raises(ValueError):
            upsample(np.zeros((1, 4, 4, 4)), (2, -1, 2))
