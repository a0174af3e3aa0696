"""U-Nets over physically parameterized kernels, and a plain voxel baseline.

The adaptive net stores one set of physical kernel weights; realizing it at a
voxel spacing produces an instance whose discrete kernels, pooling factors,
and upsampling factors are derived from that spacing. Instances share the
weight tensors, so training through any instance updates them all.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import NORMALIZATION, Volume
from .harmonics import Irrep, IrrepsSignature
from .kernels import RADIAL_FAMILY, PhysicalKernelSpec, realize
from .pooling import LevelPlan, plan_levels, upsample

_MAGIC_MODEL = b"RNET0001"
_NORM_EPS = 1e-5


@dataclass
class UNetConfig:
    """Architecture settings shared by both network kinds.

    kind 'resadaptive' uses base_signature / kernel_width_mm / pool_width_mm /
    num_radial_basis; kind 'baseline' uses base_channels / kernel_voxels.
    Feature counts and physical widths double at every level.
    """

    kind: str = "resadaptive"
    depth: int = 3
    base_signature: str = "8x0e+4x1e+2x2e"
    base_channels: int = 30
    convs_per_level: int = 2
    kernel_width_mm: float = 5.0
    kernel_voxels: int = 5
    pool_width_mm: float = 2.0
    num_radial_basis: int = 5

    def __post_init__(self):
        if self.kind not in ("resadaptive", "baseline"):
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.convs_per_level < 1:
            raise ValueError(f"convs_per_level must be >= 1, got {self.convs_per_level}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def _scaled_signature(base: IrrepsSignature, factor: int) -> IrrepsSignature:
    return IrrepsSignature(tuple((m * factor, ir) for m, ir in base.blocks))


def _with_gates(sig: IrrepsSignature) -> IrrepsSignature:
    g = sig.gate_multiplicity()
    if g == 0:
        return sig
    return sig + IrrepsSignature(((g, Irrep(0)),))


def _block_sizes(sig: IrrepsSignature) -> list[int]:
    return [m * ir.dim for m, ir in sig.blocks]


def _norm_normalize(x: torch.Tensor, sig: IrrepsSignature) -> torch.Tensor:
    """Divide each irrep copy by its mean component norm over the patch."""
    parts = torch.split(x, _block_sizes(sig), dim=0)
    out = []
    for (mult, ir), part in zip(sig.blocks, parts):
        v = part.reshape(mult, ir.dim, *part.shape[1:])
        norm = torch.sqrt(torch.clamp((v * v).sum(dim=1), min=1e-30))
        denom = norm.mean(dim=(1, 2, 3), keepdim=True) + _NORM_EPS
        out.append((v / denom[:, None]).reshape(part.shape))
    return torch.cat(out, dim=0)


def _add_scalar_bias(x: torch.Tensor, sig: IrrepsSignature, bias: torch.Tensor) -> torch.Tensor:
    parts = torch.split(x, _block_sizes(sig), dim=0)
    out = []
    used = 0
    for (mult, ir), part in zip(sig.blocks, parts):
        if ir.degree == 0:
            out.append(part + bias[used : used + mult].reshape(mult, 1, 1, 1))
            used += mult
        else:
            out.append(part)
    return torch.cat(out, dim=0)


def _gated_nonlinearity(
    x: torch.Tensor, sig_features: IrrepsSignature
) -> torch.Tensor:
    """SiLU on scalar copies; non-scalar copies scaled by their sigmoid gate.

    x carries sig_features plus one trailing scalar block holding the gates
    (one per non-scalar copy, in block order); the gates are consumed.
    """
    gate_mult = sig_features.gate_multiplicity()
    dim_f = sig_features.total_dim
    feats, gates = x[:dim_f], x[dim_f:]
    assert gates.shape[0] == gate_mult
    parts = torch.split(feats, _block_sizes(sig_features), dim=0)
    out = []
    used = 0
    for (mult, ir), part in zip(sig_features.blocks, parts):
        if ir.degree == 0:
            out.append(F.silu(part))
        else:
            g = torch.sigmoid(gates[used : used + mult])
            used += mult
            v = part.reshape(mult, ir.dim, *part.shape[1:])
            out.append((v * g[:, None]).reshape(part.shape))
    return torch.cat(out, dim=0)


def _pool_blocks(x: torch.Tensor, sig: IrrepsSignature, factors) -> torch.Tensor:
    """Max pooling that respects irreps: scalars pool plainly, higher degrees
    gather all components of the copy whose norm is largest in each window."""
    k = tuple(int(f) for f in factors)
    if k == (1, 1, 1):
        return x
    parts = torch.split(x, _block_sizes(sig), dim=0)
    out = []
    for (mult, ir), part in zip(sig.blocks, parts):
        if ir.degree == 0:
            out.append(F.max_pool3d(part[None], k, stride=k, ceil_mode=True)[0])
        else:
            v = part.reshape(mult, ir.dim, *part.shape[1:])
            norm = torch.sqrt(torch.clamp((v * v).sum(dim=1), min=1e-30))
            _, idx = F.max_pool3d(
                norm[None], k, stride=k, ceil_mode=True, return_indices=True
            )
            idx = idx[0]
            odims = idx.shape[1:]
            flat = v.reshape(mult, ir.dim, -1)
            gathered = flat.gather(
                2, idx.reshape(mult, 1, -1).expand(mult, ir.dim, -1)
            )
            out.append(gathered.reshape(mult * ir.dim, *odims))
    return torch.cat(out, dim=0)


class _AdaptiveConv(nn.Module):
    """One physical-kernel conv: kernel synthesis, norm, bias, gated nonlinearity."""

    def __init__(
        self,
        sig_in: IrrepsSignature,
        sig_out: IrrepsSignature,
        width_mm: float,
        num_basis: int,
        generator: torch.Generator,
    ):
        super().__init__()
        self.sig_in = sig_in
        self.sig_out = sig_out
        self.sig_conv = _with_gates(sig_out)
        self.spec = PhysicalKernelSpec(sig_in, self.sig_conv, width_mm, num_basis)
        self.spec.init_weights(generator)
        self.weights = nn.ParameterList(nn.Parameter(w) for w in self.spec.weights)
        self.spec.weights = list(self.weights)
        self.bias = nn.Parameter(torch.zeros(self.sig_conv.scalar_multiplicity()))
        self._cache: dict = {}

    def realized(self, spacing_mm, version: int):
        grad = torch.is_grad_enabled()
        hit = self._cache.get(spacing_mm)
        if hit is not None and hit[0] == version and hit[1] == grad:
            return hit[2]
        real = realize(self.spec, spacing_mm)
        self._cache[spacing_mm] = (version, grad, real)
        return real

    def forward(self, x: torch.Tensor, spacing_mm, version: int) -> torch.Tensor:
        real = self.realized(spacing_mm, version)
        pad = tuple(n // 2 for n in real.extent)
        y = F.conv3d(x[None], real.tensor, padding=pad)[0]
        y = _norm_normalize(y, self.sig_conv)
        y = _add_scalar_bias(y, self.sig_conv, self.bias)
        return _gated_nonlinearity(y, self.sig_out)


class NetworkInstance:
    """A network realized for one grid spacing (or the baseline's voxel grid)."""

    def __init__(self, model: nn.Module, spacing_mm, plans: list[LevelPlan] | None):
        self.model = model
        self.spacing_mm = spacing_mm
        self.plans = plans

    def forward(self, patch, spacing_mm=None):
        """Run the network on a (1, X, Y, Z) tensor or single-channel Volume."""
        is_volume = isinstance(patch, Volume)
        if is_volume:
            if spacing_mm is None:
                spacing_mm = patch.spacing_mm
            x = torch.from_numpy(np.ascontiguousarray(patch.data))
        else:
            x = patch
        if spacing_mm is not None and self.spacing_mm is not None:
            got = tuple(float(v) for v in spacing_mm)
            if got != self.spacing_mm:
                raise ValueError(
                    f"patch spacing {got} does not match instance spacing {self.spacing_mm}"
                )
        if x.ndim != 4 or x.shape[0] != 1:
            raise ValueError(f"patch must be (1, x, y, z), got shape {tuple(x.shape)}")
        logits = self.model._forward_at(x, self)
        if is_volume:
            return Volume(
                logits.detach().cpu().numpy().astype(np.float32),
                spacing_mm=self.spacing_mm or patch.spacing_mm,
                origin_mm=patch.origin_mm,
            )
        return logits

    def parameters(self):
        return self.model.parameters()


class ResAdaptiveUNet(nn.Module):
    """U-Net whose kernels live in physical space; see module docstring."""

    def __init__(self, config: UNetConfig, seed: int = 0):
        super().__init__()
        if config.kind != "resadaptive":
            raise ValueError("config.kind must be 'resadaptive'")
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        base = IrrepsSignature.parse(config.base_signature)
        sigs = [_scaled_signature(base, 2**k) for k in range(config.depth + 1)]
        self.level_sigs = sigs
        width0 = config.kernel_width_mm
        nb = config.num_radial_basis
        one_scalar = IrrepsSignature.parse("1x0e")

        enc = []
        for k in range(config.depth + 1):
            level = []
            for j in range(config.convs_per_level):
                if k == 0 and j == 0:
                    sig_in = one_scalar
                elif j == 0:
                    sig_in = sigs[k - 1]
                else:
                    sig_in = sigs[k]
                level.append(
                    _AdaptiveConv(sig_in, sigs[k], width0 * 2**k, nb, gen)
                )
            enc.append(nn.ModuleList(level))
        self.encoder = nn.ModuleList(enc)

        dec = []
        for k in range(config.depth - 1, -1, -1):
            level = []
            for j in range(config.convs_per_level):
                sig_in = (sigs[k + 1] + sigs[k]) if j == 0 else sigs[k]
                level.append(
                    _AdaptiveConv(sig_in, sigs[k], width0 * 2**k, nb, gen)
                )
            dec.append(nn.ModuleList(level))
        self.decoder = nn.ModuleList(dec)  # stored deepest-first

        n_scalar = sigs[0].blocks[0][0] if sigs[0].blocks[0][1].degree == 0 else 0
        if n_scalar == 0:
            raise ValueError("base signature must start with a scalar block")
        self.n_scalar0 = n_scalar
        head_w = torch.empty(1, n_scalar)
        head_w.normal_(0.0, 1.0 / np.sqrt(n_scalar), generator=gen)
        self.head_weight = nn.Parameter(head_w)
        self.head_bias = nn.Parameter(torch.zeros(1))

        self._version = 0
        self._instances: dict = {}

    # -- instances ---------------------------------------------------------

    def instance(self, spacing_mm) -> NetworkInstance:
        key = tuple(float(v) for v in spacing_mm)
        if key not in self._instances:
            plans = plan_levels(
                key,
                depth=self.config.depth,
                conv_width0_mm=self.config.kernel_width_mm,
                pool_width0_mm=self.config.pool_width_mm,
            )
            self._instances[key] = NetworkInstance(self, key, plans)
        return self._instances[key]

    @property
    def realization_count(self) -> int:
        return len(self._instances)

    def invalidate_realizations(self) -> None:
        """Mark kernel caches stale after a weight update."""
        self._version += 1

    # -- forward -----------------------------------------------------------

    def _forward_at(self, x: torch.Tensor, inst: NetworkInstance) -> torch.Tensor:
        plans = inst.plans
        v = self._version
        skips = []
        for k, level in enumerate(self.encoder):
            spacing = plans[k].spacing_mm
            for conv in level:
                x = conv(x, spacing, v)
            if k < self.config.depth:
                skips.append(x)
                x = _pool_blocks(x, self.level_sigs[k], plans[k].pool_factors)
        for i, level in enumerate(self.decoder):
            k = self.config.depth - 1 - i
            skip = skips[k]
            x = upsample(x, plans[k].pool_factors, target_dims=skip.shape[1:])
            x = torch.cat([x, skip], dim=0)
            spacing = plans[k].spacing_mm
            for conv in level:
                x = conv(x, spacing, v)
        scalars = x[: self.n_scalar0]
        w = self.head_weight.to(scalars.dtype)
        b = self.head_bias.to(scalars.dtype)
        logits = torch.tensordot(w, scalars, dims=([1], [0])) + b.reshape(1, 1, 1, 1)
        return logits

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


class BaselineUNet(nn.Module):
    """Plain voxel-space U-Net: conv + instance norm + SiLU, 2x max pooling."""

    def __init__(self, config: UNetConfig, seed: int = 0):
        super().__init__()
        if config.kind != "baseline":
            raise ValueError("config.kind must be 'baseline'")
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        ch = [config.base_channels * 2**k for k in range(config.depth + 1)]
        self.channels = ch
        kv = config.kernel_voxels

        def conv(cin, cout, kernel):
            layer = nn.Conv3d(cin, cout, kernel, padding=kernel // 2)
            fan_in = cin * kernel**3
            bound = 1.0 / np.sqrt(fan_in)
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=gen)
                layer.bias.uniform_(-bound, bound, generator=gen)
            return layer

        enc = []
        for k in range(config.depth + 1):
            level = []
            for j in range(config.convs_per_level):
                cin = 1 if (k == 0 and j == 0) else (ch[k - 1] if j == 0 else ch[k])
                level.append(conv(cin, ch[k], kv))
            enc.append(nn.ModuleList(level))
        self.encoder = nn.ModuleList(enc)

        dec = []
        for k in range(config.depth - 1, -1, -1):
            level = []
            for j in range(config.convs_per_level):
                cin = ch[k + 1] + ch[k] if j == 0 else ch[k]
                level.append(conv(cin, ch[k], kv))
            dec.append(nn.ModuleList(level))
        self.decoder = nn.ModuleList(dec)
        self.head = conv(ch[0], 1, 1)

    def instance(self, spacing_mm=None) -> NetworkInstance:
        return NetworkInstance(self, None, None)

    def _forward_at(self, x: torch.Tensor, inst: NetworkInstance) -> torch.Tensor:
        def act(t):
            return F.silu(F.instance_norm(t[None], eps=_NORM_EPS)[0])

        skips = []
        for k, level in enumerate(self.encoder):
            for c in level:
                x = act(c(x[None])[0])
            if k < self.config.depth:
                skips.append(x)
                x = F.max_pool3d(x[None], 2, stride=2, ceil_mode=True)[0]
        for i, level in enumerate(self.decoder):
            k = self.config.depth - 1 - i
            skip = skips[k]
            x = upsample(x, (2, 2, 2), target_dims=skip.shape[1:])
            x = torch.cat([x, skip], dim=0)
            for c in level:
                x = act(c(x[None])[0])
        return self.head(x[None])[0]

    def invalidate_realizations(self) -> None:
        pass

    @property
    def realization_count(self) -> int:
        return 0

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_resadaptive(config: UNetConfig, spacing_mm, seed: int = 0) -> NetworkInstance:
    """Create a fresh adaptive net and realize it at one spacing."""
    return ResAdaptiveUNet(config, seed=seed).instance(spacing_mm)


def build_baseline(config: UNetConfig, seed: int = 0) -> NetworkInstance:
    return BaselineUNet(config, seed=seed).instance()


def forward(net: NetworkInstance, patch):
    """Apply an instance to a patch (tensor or Volume); see NetworkInstance.forward."""
    return net.forward(patch)


def count_parameters(model) -> int:
    if isinstance(model, NetworkInstance):
        model = model.model
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# model files


def save_model(path, model) -> None:
    """Magic, JSON manifest (config + named weight shapes), float32 payload."""
    if isinstance(model, NetworkInstance):
        model = model.model
    state = model.state_dict()
    names = list(state.keys())
    manifest = {
        "format_version": 1,
        "kind": model.config.kind,
        "config": model.config.to_dict(),
        "radial_family": RADIAL_FAMILY,
        "normalization": NORMALIZATION,
        "weights": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC_MODEL)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(state[n].detach().cpu().numpy().astype("<f4").tobytes())


def load_model(path):
    """Rebuild the module from a model file; returns ResAdaptiveUNet or BaselineUNet."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC_MODEL:
            raise ValueError(f"bad model magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        manifest = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    config = UNetConfig.from_dict(manifest["config"])
    model = (
        ResAdaptiveUNet(config) if config.kind == "resadaptive" else BaselineUNet(config)
    )
    state = {}
    off = 0
    for entry in manifest["weights"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        off += count * 4
        state[entry["name"]] = torch.from_numpy(arr.reshape(shape).copy())
    model.load_state_dict(state)
    return model
