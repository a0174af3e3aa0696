"""Acceptance checklist: one test per criterion, one visible PASS line each.

Criteria 1-8 are fast functional gates (planning table, signature dimension,
weight sharing across spacings, rotation equivariance, gradient correctness,
multi-resolution kernel consistency, exact statistics, resampler quality).
Criteria 9-10 run the desk-scale cross-resolution experiment end to end and
dominate the runtime; the whole module stays within its stated budgets.

Run with plain pytest; the PASS/FAIL lines bypass output capture.
"""

import math
import time
from itertools import combinations

import numpy as np
import pytest
import torch

from resadapt.data import (
    Volume,
    generate_dataset,
    load_split,
    resample,
)
from resadapt.evaluation import dice, report, wilcoxon_signed_rank
from resadapt.harmonics import (
    IrrepsSignature,
    proper_cube_rotations,
    wigner_rotation,
)
from resadapt.inference import sliding_window_predict
from resadapt.kernels import PhysicalKernelSpec, realize, rotate_grid
from resadapt.network import BaselineUNet, ResAdaptiveUNet, UNetConfig
from resadapt.pooling import plan_levels
from resadapt.training import TrainConfig, train


@pytest.fixture
def announce(capsys):
    def _announce(num, ok, detail):
        verdict = "PASS" if ok else "FAIL"
        with capsys.disabled():
            print(f"\nACCEPTANCE {num:2d}: {verdict} - {detail}")
        assert ok, f"acceptance criterion {num} failed: {detail}"

    return _announce


# --- criterion 1: level planning table -------------------------------------

# (conv extent, pool factors, spacing entering the level) for each level,
# frozen independently from the physical rules: extent 2*floor((w/2)/s)+1,
# pool max(1, floor(p/s)), widths doubling per level
PLAN_EXPECTED = {
    (1.0, 1.0, 1.0): [
        ((5, 5, 5), (2, 2, 2), (1.0, 1.0, 1.0)),
        ((5, 5, 5), (2, 2, 2), (2.0, 2.0, 2.0)),
        ((5, 5, 5), (2, 2, 2), (4.0, 4.0, 4.0)),
        ((5, 5, 5), (2, 2, 2), (8.0, 8.0, 8.0)),
    ],
    (0.5, 0.5, 3.0): [
        ((11, 11, 1), (4, 4, 1), (0.5, 0.5, 3.0)),
        ((5, 5, 3), (2, 2, 1), (2.0, 2.0, 3.0)),
        ((5, 5, 7), (2, 2, 2), (4.0, 4.0, 3.0)),
        ((5, 5, 7), (2, 2, 2), (8.0, 8.0, 6.0)),
    ],
}


def test_criterion_1_level_plan(announce):
    t0 = time.time()
    mismatches = []
    for spacing, rows in PLAN_EXPECTED.items():
        plan = plan_levels(spacing, depth=3, conv_width0_mm=5.0, pool_width0_mm=2.0)
        assert len(plan) == len(rows)
        for lvl, (extent, factors, space) in zip(plan, rows):
            if (lvl.conv_extent, lvl.pool_factors, lvl.spacing_mm) != (
                extent,
                factors,
                space,
            ):
                mismatches.append((spacing, lvl.level))
    dt = time.time() - t0
    announce(
        1,
        not mismatches and dt < 1.0,
        f"level plans exact for both spacings ({dt:.2f} s)",
    )


def test_criterion_2_signature_dimension(announce):
    sig = IrrepsSignature.parse("8x0e+4x1e+2x2e")
    announce(
        2,
        sig.total_dim == 30,
        f"8x0e+4x1e+2x2e has total scalar dimension {sig.total_dim}",
    )


def test_criterion_3_parameters_shared_across_spacings(announce):
    t0 = time.time()
    net = ResAdaptiveUNet(UNetConfig(), seed=0)
    inst_iso = net.instance((1.0, 1.0, 1.0))
    inst_aniso = net.instance((0.5, 0.5, 3.0))
    params_iso = list(inst_iso.parameters())
    params_aniso = list(inst_aniso.parameters())
    same_objects = len(params_iso) == len(params_aniso) and all(
        a is b for a, b in zip(params_iso, params_aniso)
    )
    same_values = all(torch.equal(a, b) for a, b in zip(params_iso, params_aniso))
    dt = time.time() - t0
    announce(
        3,
        same_objects and same_values and dt < 1.0,
        f"{len(params_iso)} parameter tensors identical at (1,1,1) and "
        f"(0.5,0.5,3) ({dt:.2f} s)",
    )


def _block_rotation(sig, rot):
    mats = []
    for mult, ir in sig.blocks:
        d = wigner_rotation(ir.degree, rot)
        for _ in range(mult):
            mats.append(d)
    out = np.zeros((sig.total_dim, sig.total_dim))
    off = 0
    for d in mats:
        n = d.shape[0]
        out[off : off + n, off : off + n] = d
        off += n
    return out


def test_criterion_4_rotation_equivariance(announce):
    t0 = time.time()
    net = ResAdaptiveUNet(UNetConfig(), seed=4).double()
    inst = net.instance((1.0, 1.0, 1.0))
    gen = torch.Generator().manual_seed(4)
    x = torch.randn(1, 16, 16, 16, dtype=torch.float64, generator=gen)
    worst_net = 0.0
    with torch.no_grad():
        base = inst.forward(x)
        scale = base.abs().max().item()
        for rot in proper_cube_rotations():
            got = inst.forward(rotate_grid(x, rot))
            want = rotate_grid(base, rot)
            # exclude the one-voxel boundary ring
            diff = (got - want)[:, 1:-1, 1:-1, 1:-1].abs().max().item()
            worst_net = max(worst_net, diff / max(scale, 1e-30))

    # kernel-level steerability of a full-signature spec at the same spacing
    sig = IrrepsSignature.parse("8x0e+4x1e+2x2e")
    spec = PhysicalKernelSpec(sig, sig, 5.0, num_basis=5)
    spec.init_weights(torch.Generator().manual_seed(5), dtype=torch.float64)
    k = realize(spec, (1.0, 1.0, 1.0)).tensor.numpy()
    kscale = np.abs(k).max()
    worst_kernel = 0.0
    for rot in proper_cube_rotations():
        d_in = _block_rotation(spec.sig_in, rot)
        d_out = _block_rotation(spec.sig_out, rot)
        lhs = rotate_grid(k, rot.T)
        rhs = np.einsum(
            "ab,bcv,dc->adv", d_out, k.reshape(k.shape[:2] + (-1,)), d_in
        )
        worst_kernel = max(
            worst_kernel,
            np.abs(lhs.reshape(rhs.shape) - rhs).max() / max(kscale, 1e-30),
        )
    dt = time.time() - t0
    announce(
        4,
        worst_net <= 1e-4 and worst_kernel <= 1e-5 and dt < 120.0,
        f"24 rotations: network rel err {worst_net:.2e}, kernel rel err "
        f"{worst_kernel:.2e} ({dt:.1f} s)",
    )


def test_criterion_5_gradients_match_finite_differences(announce):
    t0 = time.time()
    net = ResAdaptiveUNet(UNetConfig(), seed=5).double()
    inst = net.instance((1.0, 1.0, 1.0))
    rng = np.random.default_rng(5)
    x = torch.from_numpy(rng.standard_normal((1, 8, 8, 8)))
    probe = torch.from_numpy(rng.standard_normal((1, 8, 8, 8)))

    def loss_value():
        net.invalidate_realizations()
        return (inst.forward(x) * probe).sum()

    loss = loss_value()
    net.zero_grad()
    loss.backward()
    params = [p for p in net.parameters() if p.grad is not None]
    h = 1e-5
    worst = 0.0
    checked = 0
    for p in params[:: max(1, len(params) // 12)]:
        flat = p.detach().view(-1)
        grad = p.grad.view(-1)
        idx = int(rng.integers(flat.numel()))
        with torch.no_grad():
            orig = flat[idx].item()
            flat[idx] = orig + h
            up = loss_value().item()
            flat[idx] = orig - h
            down = loss_value().item()
            flat[idx] = orig
        fd = (up - down) / (2 * h)
        ad = grad[idx].item()
        mag = max(abs(fd), abs(ad))
        if mag > 1e-6:
            worst = max(worst, abs(fd - ad) / mag)
        else:
            worst = max(worst, abs(fd - ad) / 1e-2)
        checked += 1
    dt = time.time() - t0
    announce(
        5,
        checked >= 10 and worst <= 1e-4 and dt < 120.0,
        f"{checked} coordinates, max relative error {worst:.2e} ({dt:.1f} s)",
    )


def test_criterion_6_kernel_realizations_bitwise_consistent(announce):
    sig = IrrepsSignature.parse("8x0e+4x1e+2x2e")
    spec = PhysicalKernelSpec(sig, sig, 5.0, num_basis=5)
    spec.init_weights(torch.Generator().manual_seed(6), dtype=torch.float32)
    coarse = realize(spec, (1.0, 1.0, 1.0)).tensor
    fine = realize(spec, (0.5, 0.5, 0.5)).tensor
    ok = (
        coarse.shape[2:] == (5, 5, 5)
        and fine.shape[2:] == (11, 11, 11)
        and torch.equal(fine[:, :, 1::2, 1::2, 1::2], coarse)
    )
    announce(
        6,
        ok,
        "realizations at (1,1,1) and (0.5,0.5,0.5) bitwise equal at shared "
        "physical offsets",
    )


def _wilcoxon_enumeration(x, y):
    # independent oracle: literal 2^n sign-flip enumeration over doubled
    # midranks (integers, so tail comparisons stay exact)
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    d = d[d != 0.0]
    n = d.size
    a = np.abs(d)
    ranks2 = np.array(
        [2 * int((a < v).sum()) + int((a == v).sum()) + 1 for v in a]
    )
    w_plus2 = int(ranks2[d > 0].sum())
    w2 = min(w_plus2, int(ranks2.sum()) - w_plus2)
    count = 0
    for bits in range(2 ** n):
        t = sum(int(r) for k, r in enumerate(ranks2) if bits >> k & 1)
        if t <= w2:
            count += 1
    return w2 / 2.0, min(1.0, 2.0 * count / 2.0 ** n)


def test_criterion_7_exact_statistics(announce):
    t0 = time.time()
    rng = np.random.default_rng(7)
    cases = 0
    worst = 0.0
    for rep in range(100):
        n = int(rng.integers(3, 11))
        if rep % 2 == 0:
            x = rng.standard_normal(n)
            y = rng.standard_normal(n)
        else:
            x = rng.integers(0, 4, n).astype(float)
            y = rng.integers(0, 4, n).astype(float)
        res = wilcoxon_signed_rank(x, y, mode="exact")
        w_ref, p_ref = _wilcoxon_enumeration(x, y)
        if res.n_effective == 0:
            assert res.p_value == 1.0 and res.degenerate
        else:
            assert res.statistic == w_ref
            worst = max(worst, abs(res.p_value - p_ref))
            assert res.p_value == p_ref
        cases += 1

    a = np.zeros((4, 4, 4), dtype=np.float32)
    b = np.zeros((4, 4, 4), dtype=np.float32)
    a[:2], b[:2] = 1.0, 1.0
    dice_ok = (
        dice(a, a) == 1.0
        and dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
        and dice(a, 1.0 - a) == 0.0
        and dice(a, np.ones_like(a)) == 2.0 * 32 / (32 + 64)
    )
    dt = time.time() - t0
    announce(
        7,
        cases == 100 and worst == 0.0 and dice_ok and dt < 30.0,
        f"exact p equals enumeration on {cases} datasets; Dice edge cases "
        f"exact ({dt:.1f} s)",
    )


def test_criterion_8_bspline_resampler(announce):
    rng = np.random.default_rng(8)
    vol = Volume(
        rng.standard_normal((1, 12, 10, 8)).astype(np.float32),
        spacing_mm=(1.0, 1.5, 2.0),
    )
    ident = resample(vol, (1.0, 1.5, 2.0), method="bspline3")
    err_ident = float(np.abs(ident.data - vol.data).max())

    # linear ramp along each axis, checked away from the mirrored border
    # (the cubic prefilter tail decays ~0.268^d, so keep a wide margin)
    xs = np.arange(40, dtype=np.float64)
    ramp = (
        xs[:, None, None] + 2.0 * xs[None, :, None] + 0.5 * xs[None, None, :]
    )
    rvol = Volume(ramp[None].astype(np.float64), spacing_mm=(2.0, 2.0, 2.0))
    fine = resample(rvol, (1.0, 1.0, 1.0), method="bspline3")
    gx = np.arange(fine.dims[0]) * 0.5
    want = (
        gx[:, None, None] + 2.0 * gx[None, :, None] + 0.5 * gx[None, None, :]
    )
    interior = (slice(0, 1), slice(24, -24), slice(24, -24), slice(24, -24))
    err_ramp = float(np.abs(fine.data[interior] - want[None][interior]).max())

    const = Volume(np.full((1, 9, 9, 9), 3.25, dtype=np.float32), (1.0, 1.0, 1.0))
    finer = resample(const, (0.6, 0.6, 0.6), method="bspline3")
    const_exact = bool((finer.data == 3.25).all())

    announce(
        8,
        err_ident < 1e-6 and err_ramp < 1e-6 and const_exact,
        f"identity err {err_ident:.1e}, interior ramp err {err_ramp:.1e}, "
        "constants exact",
    )


# --- criteria 9-10: desk-scale cross-resolution experiment ------------------

SEEN_KEY = "1x1x1"
UNSEEN_KEY = "0.5x0.5x1"
THICK_KEY = "1x1x3"

DESK_ADAPTIVE = UNetConfig(
    kind="resadaptive",
    depth=2,
    base_signature="4x0e+2x1e",
    convs_per_level=2,
    kernel_width_mm=5.0,
    pool_width_mm=2.0,
    num_radial_basis=5,
)
DESK_BASELINE = UNetConfig(
    kind="baseline", depth=2, base_channels=10, convs_per_level=2, kernel_voxels=3
)
# each arm trains to its own convergence within the runtime budget: the voxel
# baselines need roughly twice the optimizer steps of the adaptive net to
# plateau, and training the control arms longer is conservative with respect
# to the cross-resolution gap being demonstrated
ADAPTIVE_EPOCHS = 60
BASELINE_EPOCHS = 150
NET_SEED = 42
TRAIN_SEED = 100


@pytest.fixture(scope="module")
def phantom_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("phantoms")
    t0 = time.time()
    manifest = generate_dataset(out, seed=2024, n_train=30, n_val=10, n_test=20)
    return out, manifest, time.time() - t0


def _desk_train(model, dataset, epochs):
    cfg = TrainConfig(
        patch_voxels=(32, 32, 32),
        lr=0.01,
        patience_epochs=epochs,
        max_epochs=epochs,
        seed=TRAIN_SEED,
        augment_flips=True,
    )
    return train(cfg, model, dataset, val_split=0.25)


def _pairs(triples):
    return [(img, mask) for _, img, mask in triples]


def _resampled_pairs(triples):
    return [
        (
            resample(img, (1.0, 1.0, 1.0), method="bspline3"),
            resample(mask, (1.0, 1.0, 1.0), method="nearest"),
        )
        for _, img, mask in triples
    ]


def _mean_dice(model, cases, truth_by_id=None, to_1mm=False):
    # every arm is scored with the same physical inference window, equal to
    # the 32 mm physical extent of the training patches; a fixed-voxel window
    # would shrink the models' spatial context on finer grids
    scores = []
    for cid, img, msk in cases:
        if to_1mm:
            img = resample(img, (1.0, 1.0, 1.0), method="bspline3")
            msk = truth_by_id[cid]
        mask, _ = sliding_window_predict(model, img, window_mm=(32.0, 32.0, 32.0))
        scores.append(dice(mask, msk))
    return float(np.mean(scores))


def test_criterion_9_cross_resolution_experiment(phantom_dataset, announce):
    ddir, manifest, gen_seconds = phantom_dataset
    t0 = time.time()

    train_pool = load_split(ddir, manifest, "train", SEEN_KEY) + load_split(
        ddir, manifest, "val", SEEN_KEY
    )
    arms = {}
    arms["native"] = BaselineUNet(DESK_BASELINE, seed=NET_SEED)
    _desk_train(arms["native"], _pairs(train_pool), BASELINE_EPOCHS)
    arms["resampled_1mm"] = BaselineUNet(DESK_BASELINE, seed=NET_SEED)
    _desk_train(arms["resampled_1mm"], _resampled_pairs(train_pool), BASELINE_EPOCHS)
    arms["adaptive"] = ResAdaptiveUNet(DESK_ADAPTIVE, seed=NET_SEED)
    _desk_train(arms["adaptive"], _pairs(train_pool), ADAPTIVE_EPOCHS)

    test_unseen = load_split(ddir, manifest, "test", UNSEEN_KEY)
    test_seen = load_split(ddir, manifest, "test", SEEN_KEY)
    seen_truth = {cid: msk for cid, _, msk in test_seen}

    unseen = {
        "adaptive": _mean_dice(arms["adaptive"], test_unseen),
        "native": _mean_dice(arms["native"], test_unseen),
        "resampled_1mm": _mean_dice(
            arms["resampled_1mm"], test_unseen, seen_truth, to_1mm=True
        ),
    }
    seen = {
        "adaptive": _mean_dice(arms["adaptive"], test_seen),
        "native": _mean_dice(arms["native"], test_seen),
    }

    gap_unseen = unseen["adaptive"] - unseen["native"]
    gap_seen = abs(seen["adaptive"] - seen["native"])
    minutes = (time.time() - t0 + gen_seconds) / 60.0
    announce(
        9,
        gap_unseen >= 0.05 and gap_seen <= 0.03 and minutes <= 60.0,
        f"unseen {UNSEEN_KEY}: adaptive {unseen['adaptive']:.3f} vs native "
        f"{unseen['native']:.3f} (gap {gap_unseen:+.3f}, need >= +0.05), "
        f"resampled-1mm {unseen['resampled_1mm']:.3f}; seen {SEEN_KEY}: "
        f"adaptive {seen['adaptive']:.3f} vs native {seen['native']:.3f} "
        f"(|gap| {gap_seen:.3f}, need <= 0.03); {minutes:.1f} min",
    )


def test_criterion_10_mixed_resolution_training(phantom_dataset, announce):
    ddir, manifest, _ = phantom_dataset
    t0 = time.time()
    cases = []
    for key in (SEEN_KEY, UNSEEN_KEY, THICK_KEY):
        cases += _pairs(load_split(ddir, manifest, "train", key))
    model = ResAdaptiveUNet(DESK_ADAPTIVE, seed=NET_SEED)
    result = _desk_train(model, cases, 25)
    minutes = (time.time() - t0) / 60.0
    announce(
        10,
        result.best_val_loss < 0.3
        and model.realization_count == 3
        and minutes <= 30.0,
        f"joint training on {len(cases)} cases over three spacings: best val "
        f"loss {result.best_val_loss:.3f} (need < 0.3), "
        f"{model.realization_count} cached realizations; {minutes:.1f} min",
    )
