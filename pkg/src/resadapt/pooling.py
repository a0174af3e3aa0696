"""Physical-width pooling plans and the grid ops they drive.

Pooling is specified in millimeters; on each axis the kernel is the largest
voxel count that still fits inside the physical width, never below 1, so
coarse axes pool less and the grid drifts toward isotropy as levels descend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .kernels import _check_spacing, kernel_extent


@dataclass(frozen=True)
class PoolPlan:
    """One pooling step: physical width, per-axis factors, spacings in and out."""

    pool_width_mm: float
    factors: tuple[int, int, int]
    spacing_in: tuple[float, float, float]
    spacing_out: tuple[float, float, float]


def pool_plan(pool_width_mm: float, spacing_mm) -> PoolPlan:
    """Per-axis pooling factors max(1, floor(width/spacing)) and the coarse spacing."""
    if pool_width_mm <= 0.0:
        raise ValueError(f"pool_width_mm must be positive, got {pool_width_mm}")
    s = _check_spacing(spacing_mm)
    factors = tuple(max(1, int(np.floor(pool_width_mm / sa))) for sa in s)
    out = tuple(sa * k for sa, k in zip(s, factors))
    return PoolPlan(float(pool_width_mm), factors, s, out)


@dataclass(frozen=True)
class LevelPlan:
    """Grid geometry of one resolution level of the network."""

    level: int
    spacing_mm: tuple[float, float, float]
    conv_width_mm: float
    conv_extent: tuple[int, int, int]
    pool_width_mm: float
    pool_factors: tuple[int, int, int]


def plan_levels(
    spacing_mm,
    depth: int = 3,
    conv_width0_mm: float = 5.0,
    pool_width0_mm: float = 2.0,
) -> list[LevelPlan]:
    """Level-by-level kernel extents and pooling factors for one input spacing.

    Physical widths double per level. Rows cover levels 0..depth; the network
    applies the pooling of levels 0..depth-1 (the deepest row's pooling column
    is informational).
    """
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    s = _check_spacing(spacing_mm)
    rows = []
    for level in range(depth + 1):
        conv_w = conv_width0_mm * (2.0**level)
        pool_w = pool_width0_mm * (2.0**level)
        plan = pool_plan(pool_w, s)
        rows.append(
            LevelPlan(
                level=level,
                spacing_mm=s,
                conv_width_mm=conv_w,
                conv_extent=kernel_extent(conv_w, s),
                pool_width_mm=pool_w,
                pool_factors=plan.factors,
            )
        )
        s = plan.spacing_out
    return rows


def _as_torch(grid):
    if isinstance(grid, np.ndarray):
        return torch.from_numpy(grid), True
    return grid, False


def maxpool(grid, factors):
    """Blockwise max over (kx, ky, kz) windows; ragged edges pad with -inf.

    grid is (channels, x, y, z); output spatial dims are ceil(n/k).
    """
    x, was_numpy = _as_torch(grid)
    if x.ndim != 4:
        raise ValueError(f"grid must be (channels, x, y, z), got shape {tuple(x.shape)}")
    k = tuple(int(f) for f in factors)
    if any(f < 1 for f in k):
        raise ValueError(f"factors must be >= 1, got {factors}")
    y = torch.nn.functional.max_pool3d(x[None], kernel_size=k, stride=k, ceil_mode=True)[0]
    return y.numpy() if was_numpy else y


def upsample(grid, factors, target_dims=None):
    """Nearest-neighbor upsampling by integer factors, then end-crop/zero-pad.

    Each voxel becomes a (kx, ky, kz) block; if target_dims is given the
    result is cropped or zero-padded at the high end of each axis, undoing the
    ragged-edge behavior of maxpool.
    """
    x, was_numpy = _as_torch(grid)
    if x.ndim != 4:
        raise ValueError(f"grid must be (channels, x, y, z), got shape {tuple(x.shape)}")
    k = tuple(int(f) for f in factors)
    if any(f < 1 for f in k):
        raise ValueError(f"factors must be >= 1, got {factors}")
    for ax, f in enumerate(k):
        x = x.repeat_interleave(f, dim=1 + ax)
    if target_dims is not None:
        x = _crop_or_pad_end(x, tuple(int(n) for n in target_dims))
    return x.numpy() if was_numpy else x


def _crop_or_pad_end(x, target_dims):
    # crop first
    x = x[:, : target_dims[0], : target_dims[1], : target_dims[2]]
    pad = []
    for ax in (2, 1, 0):  # F.pad lists last axis first
        pad.extend([0, max(0, target_dims[ax] - x.shape[1 + ax])])
    if any(pad):
        x = torch.nn.functional.pad(x, pad)
    return x


def upsample_adjoint(grid, factors, source_dims):
    """Transpose of upsample(.., factors, target_dims=grid dims): block sums.

    Useful for checking <upsample(x), y> == <x, upsample_adjoint(y)>.
    """
    y, was_numpy = _as_torch(grid)
    if y.ndim != 4:
        raise ValueError(f"grid must be (channels, x, y, z), got shape {tuple(y.shape)}")
    k = tuple(int(f) for f in factors)
    src = tuple(int(n) for n in source_dims)
    full = tuple(n * f for n, f in zip(src, k))
    # adjoint of end-crop is end-pad and vice versa
    y = _crop_or_pad_end(y, full)
    c = y.shape[0]
    y = y.reshape(c, src[0], k[0], src[1], k[1], src[2], k[2])
    y = y.sum(dim=(2, 4, 6))
    return y.numpy() if was_numpy else y
