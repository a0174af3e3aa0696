"""Whole-volume prediction from overlapping patches with Gaussian blending."""

from __future__ import annotations

import itertools
import warnings

import numpy as np
import torch

from .data import Volume, normalize_volume, window_voxels
from .network import NetworkInstance


def tile_starts(dim: int, patch: int, overlap_fraction: float) -> list:
    """Start offsets covering [0, dim) with stride patch*(1-overlap).

    The final start is clamped so the last patch ends exactly at the volume
    boundary. dim <= patch yields a single start at 0.
    """
    if dim <= patch:
        return [0]
    stride = max(1, int(round(patch * (1.0 - overlap_fraction))))
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def gaussian_window(patch_dims) -> np.ndarray:
    """Separable Gaussian importance window, sigma = patch_dim/8 per axis."""
    axes = []
    for p in patch_dims:
        center = (p - 1) / 2.0
        sigma = p / 8.0
        x = np.arange(p, dtype=np.float64)
        axes.append(np.exp(-0.5 * ((x - center) / sigma) ** 2))
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def sliding_window_predict(
    model,
    volume: Volume,
    patch_dims=None,
    overlap_fraction: float = 0.5,
    threshold: float = 0.5,
    window_mm=None,
) -> tuple:
    """Predict a whole volume; returns (binary mask Volume, probability Volume).

    The window is given either as voxel counts (`patch_dims`) or as a physical
    extent (`window_mm`) converted to voxels for the volume's grid; a physical
    window keeps the model's spatial context constant across resolutions,
    which is what a network trained at one spacing expects when applied at
    another. The volume is intensity-normalized, tiled by `tile_starts` on
    each axis, and each patch's sigmoid logits are accumulated under the
    Gaussian window; probability = weighted sum / total weight. Patches are
    evaluated and merged in a fixed lexicographic order, so results are
    deterministic. For the adaptive network the instance is realized at the
    volume's spacing. Volumes smaller than the patch are zero-padded (with a
    warning) and the result is cropped back.
    """
    if not (0.0 <= overlap_fraction < 1.0):
        raise ValueError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if volume.channels != 1:
        raise ValueError(f"expected a single-channel volume, got {volume.channels}")
    if (patch_dims is None) == (window_mm is None):
        raise ValueError("give exactly one of patch_dims and window_mm")
    if window_mm is not None:
        if len(tuple(window_mm)) != 3 or any(w <= 0 for w in window_mm):
            raise ValueError(f"bad window_mm {window_mm}")
        patch_dims = window_voxels(window_mm, volume.spacing_mm)
    patch = tuple(int(p) for p in patch_dims)
    if len(patch) != 3 or any(p < 1 for p in patch):
        raise ValueError(f"bad patch_dims {patch_dims}")

    inst = model if isinstance(model, NetworkInstance) else model.instance(volume.spacing_mm)
    dtype = next(iter(inst.parameters())).dtype

    arr = normalize_volume(volume).data[0].astype(np.float64)
    orig_dims = arr.shape
    pad = [(0, max(0, p - d)) for d, p in zip(orig_dims, patch)]
    if any(hi > 0 for _, hi in pad):
        warnings.warn(
            f"volume dims {orig_dims} smaller than patch {patch}; zero-padded"
        )
        arr = np.pad(arr, pad)

    window = gaussian_window(patch)
    weighted = np.zeros(arr.shape, dtype=np.float64)
    total = np.zeros(arr.shape, dtype=np.float64)
    starts = [tile_starts(d, p, overlap_fraction) for d, p in zip(arr.shape, patch)]
    with torch.no_grad():
        for sx, sy, sz in itertools.product(*starts):
            sl = (
                slice(sx, sx + patch[0]),
                slice(sy, sy + patch[1]),
                slice(sz, sz + patch[2]),
            )
            x = torch.from_numpy(arr[sl].copy()).to(dtype)[None]
            logits = inst.forward(x)
            prob = torch.sigmoid(logits)[0].double().cpu().numpy()
            weighted[sl] += window * prob
            total[sl] += window
    probability = weighted / total
    probability = probability[tuple(slice(0, d) for d in orig_dims)]
    mask = (probability >= threshold).astype(np.float32)
    prob_vol = Volume(
        probability.astype(np.float32)[None],
        spacing_mm=volume.spacing_mm,
        origin_mm=volume.origin_mm,
    )
    mask_vol = Volume(
        mask[None], spacing_mm=volume.spacing_mm, origin_mm=volume.origin_mm
    )
    return mask_vol, prob_vol
