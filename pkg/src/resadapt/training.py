"""Soft-Dice training loop: Adam, lesion-biased patch sampling, early stopping.

The loop is single threaded and bitwise deterministic for a fixed seed and
thread count. `TrainConfig.prefetch_patches` materializes each epoch's patch
tensors on a helper thread ahead of the optimizer steps; the sampling draws
are unchanged but bitwise reproducibility is no longer guaranteed in that
mode.
"""

from __future__ import annotations

import csv
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import Volume, normalize_volume, window_voxels

# Probability that a training patch is centered on a foreground voxel.
LESION_BIAS = 0.5


class NanGradientError(RuntimeError):
    """A gradient contained NaN or Inf; the optimizer state was not touched."""


@dataclass
class TrainConfig:
    patch_voxels: tuple = (32, 32, 32)
    # physical patch extent in mm; when set it overrides patch_voxels, and
    # each case samples round(mm/spacing) voxels per axis so mixed-resolution
    # training gives every case the same spatial context
    patch_mm: tuple | None = None
    batch_size: int = 1
    lr: float = 5e-3
    patience_epochs: int = 30
    max_epochs: int = 200
    seed: int = 0
    loss_epsilon: float = 1.0
    prefetch_patches: bool = False
    # random axis flips (and, on grids square in-plane, xy transposes) of
    # training patches; validation patches are never augmented
    augment_flips: bool = False

    def __post_init__(self):
        self.patch_voxels = tuple(int(v) for v in self.patch_voxels)
        if len(self.patch_voxels) != 3 or any(v < 1 for v in self.patch_voxels):
            raise ValueError(f"bad patch_voxels {self.patch_voxels}")
        if self.patch_mm is not None:
            self.patch_mm = tuple(float(v) for v in self.patch_mm)
            if len(self.patch_mm) != 3 or any(v <= 0 for v in self.patch_mm):
                raise ValueError(f"bad patch_mm {self.patch_mm}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.lr <= 0 or self.loss_epsilon <= 0:
            raise ValueError("lr and loss_epsilon must be positive")
        if self.patience_epochs < 0:
            raise ValueError("patience_epochs must be >= 0")

    def case_patch(self, spacing_mm) -> tuple:
        """Patch voxel dims for one case's grid."""
        if self.patch_mm is None:
            return self.patch_voxels
        return window_voxels(self.patch_mm, spacing_mm)


# ---------------------------------------------------------------------------
# loss


def soft_dice_loss(pred, target, epsilon: float = 1.0):
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps), differentiable in pred."""
    if not isinstance(pred, torch.Tensor):
        pred = torch.as_tensor(pred)
    if not isinstance(target, torch.Tensor):
        target = torch.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    target = target.to(pred.dtype)
    inter = (pred * target).sum()
    total = pred.sum() + target.sum()
    return 1.0 - (2.0 * inter + epsilon) / (total + epsilon)


# ---------------------------------------------------------------------------
# Adam


def adam_init(params) -> dict:
    return {
        "step": 0,
        "m": [torch.zeros_like(p) for p in params],
        "v": [torch.zeros_like(p) for p in params],
    }


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, applied in place; returns the state.

    All gradients are validated before anything is mutated, so a raised
    NanGradientError leaves parameters and state untouched.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads length mismatch")
    for i, g in enumerate(grads):
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise NanGradientError(
                f"non-finite gradient for parameter {i} with shape {tuple(g.shape)}"
            )
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            m = beta1 * state["m"][i] + (1.0 - beta1) * g
            v = beta2 * state["v"][i] + (1.0 - beta2) * (g * g)
            state["m"][i] = m
            state["v"][i] = v
            denom = torch.sqrt(v / bc2) + eps
            p.copy_(p - lr * (m / bc1) / denom)
    return state


# ---------------------------------------------------------------------------
# patch sampling


@dataclass
class _Case:
    intensity: np.ndarray  # (X, Y, Z) float32, normalized, padded to patch
    target: np.ndarray  # (X, Y, Z) float32 in {0, 1}
    spacing_mm: tuple
    foreground: np.ndarray  # (n, 3) indices of target > 0.5


def _prepare_case(vol: Volume, mask: Volume, patch: tuple) -> tuple:
    """Normalize, binarize, and zero-pad up to the patch dims; flags padding."""
    arr = normalize_volume(vol).data[0]
    tgt = (mask.data[0] > 0.5).astype(np.float32)
    pad = [(0, max(0, p - d)) for d, p in zip(arr.shape, patch)]
    padded = any(hi > 0 for _, hi in pad)
    if padded:
        arr = np.pad(arr, pad)
        tgt = np.pad(tgt, pad)
    case = _Case(
        intensity=np.ascontiguousarray(arr, dtype=np.float32),
        target=tgt,
        spacing_mm=tuple(float(v) for v in vol.spacing_mm),
        foreground=np.argwhere(tgt > 0.5),
    )
    return case, padded


def _sample_start(rng: np.random.Generator, case: _Case, patch: tuple) -> tuple:
    dims = case.intensity.shape
    if len(case.foreground) > 0 and rng.random() < LESION_BIAS:
        center = case.foreground[int(rng.integers(len(case.foreground)))]
        return tuple(
            int(np.clip(c - p // 2, 0, d - p)) for c, p, d in zip(center, patch, dims)
        )
    return tuple(int(rng.integers(0, d - p + 1)) for p, d in zip(patch, dims))


def _random_symmetry(rng: np.random.Generator, can_transpose: bool) -> tuple:
    """Draw (transpose_xy, flip_x, flip_y, flip_z) for one training patch."""
    transpose = bool(can_transpose and rng.integers(2))
    return (transpose,) + tuple(bool(rng.integers(2)) for _ in range(3))


def _apply_symmetry(arr: np.ndarray, op: tuple) -> np.ndarray:
    transpose, fx, fy, fz = op
    if transpose:
        arr = np.swapaxes(arr, 0, 1)
    sl = tuple(
        slice(None, None, -1) if f else slice(None) for f in (fx, fy, fz)
    )
    return arr[sl]


def _extract(case: _Case, start: tuple, patch: tuple, dtype, op=None) -> tuple:
    sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
    xi = case.intensity[sl]
    yi = case.target[sl]
    if op is not None:
        xi = _apply_symmetry(xi, op)
        yi = _apply_symmetry(yi, op)
    x = torch.from_numpy(xi.copy()).to(dtype)[None]
    y = torch.from_numpy(yi.copy()).to(dtype)[None]
    return x, y


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: object
    history: list  # dict rows: epoch, train_loss, val_loss, lr, seconds
    best_epoch: int
    best_val_loss: float
    diagnostics: list = field(default_factory=list)
    val_patches: list = field(default_factory=list)  # (x, y, spacing_mm) per val case


def train(config: TrainConfig, model, dataset, val_split: float = 0.25, log=None) -> TrainResult:
    """Train on (intensity Volume, mask Volume) pairs; see module docstring.

    Each epoch draws one lesion-biased patch per training case (batch_size
    patches per optimizer step, all from that case), steps Adam, then scores
    the soft-Dice loss on one fixed patch per validation case. Training stops
    when the validation loss has not strictly improved for more than
    patience_epochs consecutive epochs; the best weights are restored.
    """
    if len(dataset) < 2:
        raise ValueError("need at least 2 cases (one train, one validation)")
    if not (0.0 < val_split < 1.0):
        raise ValueError(f"val_split must be in (0, 1), got {val_split}")
    dtype = next(iter(model.parameters())).dtype
    rng = np.random.default_rng(config.seed)

    cases = []
    patches = []
    for i, (vol, mask) in enumerate(dataset):
        patch = config.case_patch(vol.spacing_mm)
        case, padded = _prepare_case(vol, mask, patch)
        if padded:
            warnings.warn(
                f"case {i}: volume dims {vol.dims} smaller than patch {patch}; zero-padded"
            )
        cases.append(case)
        patches.append(patch)

    perm = rng.permutation(len(cases))
    n_val = max(1, int(round(val_split * len(cases))))
    n_val = min(n_val, len(cases) - 1)
    val_idx = sorted(int(i) for i in perm[:n_val])
    train_idx = sorted(int(i) for i in perm[n_val:])

    # One fixed validation patch per val case, centered on a foreground voxel.
    val_patches = []
    for i in val_idx:
        case = cases[i]
        patch = patches[i]
        dims = case.intensity.shape
        if len(case.foreground) > 0:
            center = case.foreground[int(rng.integers(len(case.foreground)))]
        else:
            center = [d // 2 for d in dims]
        start = tuple(
            int(np.clip(c - p // 2, 0, d - p)) for c, p, d in zip(center, patch, dims)
        )
        x, y = _extract(case, start, patch, dtype)
        val_patches.append((x, y, case.spacing_mm))

    params = list(model.parameters())
    state = adam_init(params)
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_val = float("inf")
    best_epoch = 0
    bad_epochs = 0
    history = []
    diagnostics = []

    def validate() -> float:
        losses = []
        with torch.no_grad():
            for x, y, spacing in val_patches:
                inst = model.instance(spacing)
                prob = torch.sigmoid(inst.forward(x))
                losses.append(float(soft_dice_loss(prob, y, config.loss_epsilon)))
        return sum(losses) / len(losses)

    executor = ThreadPoolExecutor(max_workers=1) if config.prefetch_patches else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            picks = []
            for i in train_idx:
                patch = patches[i]
                can_transpose = (
                    patch[0] == patch[1]
                    and cases[i].spacing_mm[0] == cases[i].spacing_mm[1]
                )
                for _ in range(config.batch_size):
                    start = _sample_start(rng, cases[i], patch)
                    op = (
                        _random_symmetry(rng, can_transpose)
                        if config.augment_flips
                        else None
                    )
                    picks.append((i, start, op))
            if executor is not None:
                fetched = [
                    executor.submit(_extract, cases[i], s, patches[i], dtype, op)
                    for i, s, op in picks
                ]
            step_losses = []
            for step in range(len(train_idx)):
                batch = picks[step * config.batch_size : (step + 1) * config.batch_size]
                case = cases[batch[0][0]]
                patch = patches[batch[0][0]]
                inst = model.instance(case.spacing_mm)
                model.zero_grad(set_to_none=True)
                loss_sum = None
                for j in range(config.batch_size):
                    k = step * config.batch_size + j
                    if executor is not None:
                        x, y = fetched[k].result()
                    else:
                        x, y = _extract(case, batch[j][1], patch, dtype, batch[j][2])
                    prob = torch.sigmoid(inst.forward(x))
                    loss = soft_dice_loss(prob, y, config.loss_epsilon)
                    loss_sum = loss if loss_sum is None else loss_sum + loss
                loss_mean = loss_sum / config.batch_size
                loss_mean.backward()
                grads = [p.grad for p in params]
                try:
                    adam_step(params, grads, state, lr=config.lr)
                except NanGradientError as err:
                    msg = f"epoch {epoch} step {step}: {err}; remaining steps skipped"
                    diagnostics.append(msg)
                    warnings.warn(msg)
                    break
                model.invalidate_realizations()
                step_losses.append(float(loss_mean.detach()))

            train_loss = (
                sum(step_losses) / len(step_losses) if step_losses else float("nan")
            )
            val_loss = validate()
            history.append(
                {
                    "epoch": epoch,
                    "train_loss": train_loss,
                    "val_loss": val_loss,
                    "lr": config.lr,
                    "seconds": time.perf_counter() - t0,
                }
            )
            if log is not None:
                log(
                    f"epoch {epoch:4d}  train {train_loss:.4f}  val {val_loss:.4f}"
                )
            if val_loss < best_val:
                best_val = val_loss
                best_epoch = epoch
                bad_epochs = 0
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            else:
                bad_epochs += 1
                if bad_epochs > config.patience_epochs:
                    break
    finally:
        if executor is not None:
            executor.shutdown()

    model.load_state_dict(best_state)
    model.invalidate_realizations()
    return TrainResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        diagnostics=diagnostics,
        val_patches=val_patches,
    )


# ---------------------------------------------------------------------------
# history files

_HISTORY_COLUMNS = ["epoch", "train_loss", "val_loss", "lr", "seconds"]


def write_history(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_HISTORY_COLUMNS)
        for row in history:
            w.writerow([row[c] for c in _HISTORY_COLUMNS])


def read_history(path) -> list:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != _HISTORY_COLUMNS:
        raise ValueError(f"bad history header in {path}")
    out = []
    for row in rows[1:]:
        out.append(
            {
                "epoch": int(row[0]),
                "train_loss": float(row[1]),
                "val_loss": float(row[2]),
                "lr": float(row[3]),
                "seconds": float(row[4]),
            }
        )
    return out
