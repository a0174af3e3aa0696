"""Command-line pipeline: plan, synth-data, train, predict, evaluate, kernel-dump.

Exit codes: 0 success, 1 usage error, 2 unreadable or inconsistent data.
All subcommands are deterministic given identical inputs and --seed; the
seconds column of training history files is the only timing-dependent output.
"""

from __future__ import annotations

import argparse
import csv
import json
import struct
import sys

import torch

from .data import (
    DEFAULT_SPACINGS,
    Volume,
    VolumeFormatError,
    load_manifest,
    load_split,
    generate_dataset,
    read_volume,
    resample,
    spacing_key,
    write_volume,
)
from .evaluation import dice, report
from .inference import sliding_window_predict
from .kernels import realize, write_kernel_dump
from .network import (
    BaselineUNet,
    ResAdaptiveUNet,
    UNetConfig,
    load_model,
    save_model,
)
from .pooling import plan_levels
from .training import TrainConfig, train, write_history


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parse_floats(text: str, n: int, what: str) -> tuple:
    parts = text.split(",")
    if len(parts) != n:
        raise _UsageError(f"{what} needs {n} comma-separated values, got {text!r}")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise _UsageError(f"cannot parse {what} from {text!r}")


def _parse_ints(text: str, n: int, what: str) -> tuple:
    vals = _parse_floats(text, n, what)
    out = tuple(int(v) for v in vals)
    if any(float(o) != v for o, v in zip(out, vals)):
        raise _UsageError(f"{what} must be integers, got {text!r}")
    return out


def _load_model_file(path):
    try:
        return load_model(path)
    except FileNotFoundError:
        raise
    except (ValueError, KeyError, TypeError, struct.error, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"cannot read model file {path}: {e}")


# ---------------------------------------------------------------------------
# plan


def _cmd_plan(args) -> int:
    spacing = _parse_floats(args.spacing, 3, "--spacing")
    rows = plan_levels(
        spacing,
        depth=args.depth,
        conv_width0_mm=args.width,
        pool_width0_mm=args.pool_width,
    )
    if args.csv:
        w = csv.writer(sys.stdout)
        w.writerow(
            ["level", "spacing_mm", "kernel_width_mm", "kernel_voxels",
             "pool_width_mm", "pool_factors"]
        )
        for r in rows:
            w.writerow(
                [
                    r.level,
                    "x".join(f"{v:g}" for v in r.spacing_mm),
                    f"{r.conv_width_mm:g}",
                    "x".join(str(v) for v in r.conv_extent),
                    f"{r.pool_width_mm:g}",
                    "x".join(str(v) for v in r.pool_factors),
                ]
            )
        return 0
    print(f"{'level':<7}{'spacing (mm)':<16}{'kernel (vox)':<14}"
          f"{'pool (mm)':<11}{'pool factors':<13}")
    for r in rows:
        print(
            f"{r.level:<7}"
            f"{'x'.join(f'{v:g}' for v in r.spacing_mm):<16}"
            f"{'x'.join(str(v) for v in r.conv_extent):<14}"
            f"{r.pool_width_mm:<11g}"
            f"{'x'.join(str(v) for v in r.pool_factors):<13}"
        )
    return 0


# ---------------------------------------------------------------------------
# synth-data


def _cmd_synth_data(args) -> int:
    if args.spacings:
        spacings = tuple(
            _parse_floats(part, 3, "--spacings") for part in args.spacings.split(";")
        )
    else:
        spacings = DEFAULT_SPACINGS
    manifest = generate_dataset(
        args.out,
        seed=args.seed,
        n_train=args.train,
        n_val=args.val,
        n_test=args.test,
        spacings=spacings,
        box_mm=args.box_mm,
    )
    n = len(manifest["cases"])
    keys = [spacing_key(sp) for sp in spacings]
    print(f"wrote {n} cases x {len(keys)} spacings ({', '.join(keys)}) to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


_TRAIN_FLAG_FIELDS = {
    "lr": "lr",
    "max_epochs": "max_epochs",
    "patience": "patience_epochs",
    "batch_size": "batch_size",
    "loss_epsilon": "loss_epsilon",
    "seed": "seed",
    "augment": "augment_flips",
}


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        try:
            with open(args.config) as f:
                loaded = json.load(f)
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as e:
            raise VolumeFormatError(f"unparseable config {args.config}: {e}")
        if not isinstance(loaded, dict):
            raise VolumeFormatError(f"config {args.config} must be a JSON object")
        valid = set(TrainConfig.__dataclass_fields__)
        unknown = set(loaded) - valid
        if unknown:
            raise VolumeFormatError(
                f"unknown config keys {sorted(unknown)}; valid: {sorted(valid)}"
            )
        values.update(loaded)
    for flag, field_name in _TRAIN_FLAG_FIELDS.items():
        v = getattr(args, flag)
        if v is not None:
            values[field_name] = v
    if args.patch is not None:
        values["patch_voxels"] = _parse_ints(args.patch, 3, "--patch")
    elif "patch_voxels" in values:
        values["patch_voxels"] = tuple(values["patch_voxels"])
    if args.patch_mm is not None:
        values["patch_mm"] = _parse_floats(args.patch_mm, 3, "--patch-mm")
    elif values.get("patch_mm") is not None:
        values["patch_mm"] = tuple(values["patch_mm"])
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as e:
        raise _UsageError(f"bad training configuration: {e}")


def _network_config(args) -> UNetConfig:
    try:
        return UNetConfig(
            kind=args.model,
            depth=args.depth,
            base_signature=args.signature,
            base_channels=args.channels,
            convs_per_level=args.convs_per_level,
            kernel_width_mm=args.kernel_width,
            kernel_voxels=args.kernel_voxels,
            pool_width_mm=args.pool_width,
            num_radial_basis=args.radial_basis,
        )
    except ValueError as e:
        raise _UsageError(f"bad network configuration: {e}")


def _cmd_train(args) -> int:
    tc = _train_config(args)
    nc = _network_config(args)
    manifest = load_manifest(args.data)
    if args.keys:
        keys = args.keys.split(",")
    else:
        keys = [spacing_key(sp) for sp in manifest["spacings"]]
    target = (
        _parse_floats(args.resample_to, 3, "--resample-to")
        if args.resample_to
        else None
    )

    dataset = []
    for key in keys:
        for split in ("train", "val"):
            for _, img, mask in load_split(args.data, manifest, split, key):
                if target is not None:
                    img = resample(img, target, method="bspline3")
                    mask = resample(mask, target, method="nearest")
                dataset.append((img, mask))
    if not dataset:
        raise VolumeFormatError(f"no training cases found in {args.data}")

    model = (
        ResAdaptiveUNet(nc, seed=tc.seed)
        if nc.kind == "resadaptive"
        else BaselineUNet(nc, seed=tc.seed)
    )
    log = None if args.quiet else lambda msg: print(msg)
    result = train(tc, model, dataset, val_split=args.val_split, log=log)
    save_model(args.out, model)
    if args.history:
        write_history(args.history, result.history)
    print(
        f"trained {nc.kind} on {len(dataset)} cases "
        f"({len(keys)} spacing{'s' if len(keys) != 1 else ''}); "
        f"best val loss {result.best_val_loss:.4f} at epoch {result.best_epoch}; "
        f"model written to {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# predict


def _cmd_predict(args) -> int:
    model = _load_model_file(args.model)
    vol = read_volume(args.input)
    if args.window_mm is not None:
        patch, window = None, _parse_floats(args.window_mm, 3, "--window-mm")
    else:
        patch, window = _parse_ints(args.patch, 3, "--patch"), None
    if not (0.0 <= args.overlap < 1.0):
        raise _UsageError(f"--overlap must be in [0, 1), got {args.overlap}")
    if not (0.0 < args.threshold < 1.0):
        raise _UsageError(f"--threshold must be in (0, 1), got {args.threshold}")
    mask, prob = sliding_window_predict(
        model,
        vol,
        patch,
        overlap_fraction=args.overlap,
        threshold=args.threshold,
        window_mm=window,
    )
    write_volume(args.out, mask)
    if args.prob:
        write_volume(args.prob, prob)
    voxels = int(mask.data.sum())
    print(f"predicted {args.input} -> {args.out} ({voxels} foreground voxels)")
    return 0


# ---------------------------------------------------------------------------
# evaluate


def _cmd_evaluate(args) -> int:
    import os

    manifest = load_manifest(args.truth)
    preds = []
    for spec_text in args.pred:
        if "=" in spec_text:
            name, d = spec_text.split("=", 1)
        else:
            name, d = os.path.basename(spec_text.rstrip("/")), spec_text
        if not name:
            raise _UsageError(f"bad --pred {spec_text!r}; use NAME=DIR")
        preds.append((name, d))
    keys = args.key
    results = {}
    for key in keys:
        per_model = {}
        truths = load_split(args.truth, manifest, args.split, key)
        if not truths:
            raise VolumeFormatError(
                f"no cases in split {args.split!r} at spacing {key!r}"
            )
        for name, d in preds:
            scores = {}
            for case_id, _, mask in truths:
                pred_path = os.path.join(d, f"{case_id}.rvol")
                pred_mask = read_volume(pred_path)
                scores[case_id] = dice(pred_mask, mask)
            per_model[name] = scores
        results[key] = per_model
    table = report(results, alpha=args.alpha)
    if args.csv:
        w = csv.writer(sys.stdout)
        for row in table.csv_rows():
            w.writerow(row)
    else:
        print(table.render())
    if args.out:
        with open(args.out, "w", newline="") as f:
            w = csv.writer(f)
            for row in table.csv_rows():
                w.writerow(row)
    return 0


# ---------------------------------------------------------------------------
# kernel-dump


def _adaptive_conv_layers(model: ResAdaptiveUNet) -> list:
    layers = []
    for k, level in enumerate(model.encoder):
        for j, conv in enumerate(level):
            layers.append((f"encoder.{k}.{j}", conv))
    for i, level in enumerate(model.decoder):
        k = model.config.depth - 1 - i
        for j, conv in enumerate(level):
            layers.append((f"decoder.{k}.{j}", conv))
    return layers


def _cmd_kernel_dump(args) -> int:
    model = _load_model_file(args.model)
    if not isinstance(model, ResAdaptiveUNet):
        raise VolumeFormatError(
            f"{args.model} is a {model.config.kind!r} model with no physical kernels"
        )
    layers = _adaptive_conv_layers(model)
    if args.list:
        for i, (name, conv) in enumerate(layers):
            print(
                f"{i:3d}  {name:16s} {str(conv.spec.sig_in):24s} -> "
                f"{str(conv.spec.sig_out):28s} width {conv.spec.width_mm:g} mm"
            )
        return 0
    spacing = _parse_floats(args.spacing, 3, "--spacing")
    if not (0 <= args.layer < len(layers)):
        raise _UsageError(
            f"--layer must be in [0, {len(layers) - 1}]; use --list to see layers"
        )
    name, conv = layers[args.layer]
    with torch.no_grad():
        real = realize(conv.spec, spacing)
    write_kernel_dump(args.out, real)
    print(
        f"wrote layer {args.layer} ({name}) realized at "
        f"{'x'.join(f'{v:g}' for v in spacing)} mm, extent "
        f"{'x'.join(str(v) for v in real.extent)}, to {args.out}"
    )
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> _Parser:
    p = _Parser(prog="resadapt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("plan", help="print kernel extents and pooling per level")
    sp.add_argument("--spacing", required=True, help="voxel spacing in mm, e.g. 1,1,3")
    sp.add_argument("--width", type=float, default=5.0, help="level-0 kernel width (mm)")
    sp.add_argument("--pool-width", type=float, default=2.0, help="level-0 pool width (mm)")
    sp.add_argument("--depth", type=int, default=3)
    sp.add_argument("--csv", action="store_true")
    sp.set_defaults(func=_cmd_plan)

    sp = sub.add_parser("synth-data", help="generate a synthetic lesion dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--train", type=int, default=10)
    sp.add_argument("--val", type=int, default=4)
    sp.add_argument("--test", type=int, default=8)
    sp.add_argument("--spacings", default=None,
                    help="semicolon-separated spacing triples, e.g. '1,1,1;0.5,0.5,1'")
    sp.add_argument("--box-mm", type=float, default=48.0)
    sp.set_defaults(func=_cmd_synth_data)

    sp = sub.add_parser("train", help="train a model on a dataset directory")
    sp.add_argument("--model", choices=["resadaptive", "baseline"], required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="output model file")
    sp.add_argument("--history", default=None, help="training history CSV")
    sp.add_argument("--keys", default=None,
                    help="comma-separated spacing keys to train on (default: all)")
    sp.add_argument("--resample-to", default=None,
                    help="resample training volumes to this spacing (mm)")
    sp.add_argument("--val-split", type=float, default=0.25)
    sp.add_argument("--config", default=None, help="JSON file of training settings")
    sp.add_argument("--quiet", action="store_true")
    # training settings (unset flags fall back to --config, then defaults)
    sp.add_argument("--lr", type=float, default=None, help="learning rate (default 5e-3)")
    sp.add_argument("--max-epochs", type=int, default=None, dest="max_epochs")
    sp.add_argument("--patience", type=int, default=None,
                    help="epochs without improvement before stopping (default 30)")
    sp.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    sp.add_argument("--patch", default=None,
                    help="patch voxels, e.g. 32,32,32 (the default)")
    sp.add_argument("--patch-mm", default=None, dest="patch_mm",
                    help="physical patch extent in mm, e.g. 32,32,32; "
                         "overrides --patch so cases at different spacings "
                         "train with the same spatial context")
    sp.add_argument("--loss-epsilon", type=float, default=None, dest="loss_epsilon")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--augment", action="store_const", const=True, default=None,
                    help="random flip/transpose augmentation of training patches")
    # network settings
    sp.add_argument("--depth", type=int, default=3)
    sp.add_argument("--signature", default="8x0e+4x1e+2x2e")
    sp.add_argument("--channels", type=int, default=30)
    sp.add_argument("--convs-per-level", type=int, default=2, dest="convs_per_level")
    sp.add_argument("--kernel-width", type=float, default=5.0, dest="kernel_width")
    sp.add_argument("--kernel-voxels", type=int, default=5, dest="kernel_voxels")
    sp.add_argument("--pool-width", type=float, default=2.0, dest="pool_width")
    sp.add_argument("--radial-basis", type=int, default=5, dest="radial_basis")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("predict", help="segment one volume with a trained model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", required=True, dest="input")
    sp.add_argument("--out", required=True, help="output binary mask volume")
    sp.add_argument("--prob", default=None, help="optional probability volume")
    sp.add_argument("--patch", default="32,32,32")
    sp.add_argument("--window-mm", default=None, dest="window_mm",
                    help="physical window in mm, e.g. 32,32,32; overrides "
                         "--patch and keeps context constant across spacings")
    sp.add_argument("--overlap", type=float, default=0.5)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.set_defaults(func=_cmd_predict)

    sp = sub.add_parser("evaluate", help="score predictions against ground truth")
    sp.add_argument("--pred", action="append", required=True,
                    help="NAME=DIR of predicted masks (<case_id>.rvol); repeatable")
    sp.add_argument("--truth", required=True, help="dataset directory with manifest.json")
    sp.add_argument("--split", default="test")
    sp.add_argument("--key", action="append", required=True,
                    help="spacing key of the grids to score, e.g. 1x1x1; repeatable")
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--out", default=None, help="write the report as CSV")
    sp.add_argument("--csv", action="store_true", help="print CSV instead of a table")
    sp.set_defaults(func=_cmd_evaluate)

    sp = sub.add_parser("kernel-dump", help="realize one layer's kernel and save it")
    sp.add_argument("--model", required=True)
    sp.add_argument("--spacing", default="1,1,1")
    sp.add_argument("--layer", type=int, default=0)
    sp.add_argument("--out", default="kernel.rkrn")
    sp.add_argument("--list", action="store_true", help="list layers and exit")
    sp.set_defaults(func=_cmd_kernel_dump)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (VolumeFormatError, FileNotFoundError, NotADirectoryError, IsADirectoryError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
