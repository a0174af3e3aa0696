"""Physically parameterized steerable kernels and their realization on voxel grids.

A kernel is defined in continuous space as a sum over coupling paths of
radial-profile x spherical-harmonic terms, with learnable weights indexed by
(path, output copy, input copy, radial basis). Realizing it on a grid samples
the continuous kernel at voxel-center offsets, so the same weights yield a
matched family of discrete kernels across voxel spacings.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .harmonics import MAX_DEGREE, IrrepsSignature, cg_coefficients, _sh_block

RADIAL_FAMILY = "raised_cosine.v1"

_MAGIC_KERNEL = b"RKRN0001"


def _check_spacing(spacing_mm) -> tuple[float, float, float]:
    s = tuple(float(v) for v in spacing_mm)
    if len(s) != 3:
        raise ValueError(f"spacing must have 3 entries, got {len(s)}")
    if any(v <= 0.0 for v in s):
        raise ValueError(f"spacing entries must be positive, got {s}")
    return s


def kernel_extent(width_mm: float, spacing_mm) -> tuple[int, int, int]:
    """Odd voxel extent of a width_mm kernel on a grid: 2*floor((width/2)/s)+1 per axis.

    Voxel centers strictly inside the kernel radius are included; an axis
    whose spacing exceeds the radius degenerates to a single sample.
    """
    if width_mm <= 0.0:
        raise ValueError(f"width_mm must be positive, got {width_mm}")
    s = _check_spacing(spacing_mm)
    half = width_mm / 2.0
    return tuple(2 * int(np.floor(half / sa)) + 1 for sa in s)


@dataclass(frozen=True)
class RadialBasis:
    """Raised-cosine bumps on [0, radius): num_basis overlapping C^1 bumps.

    Bump i is 0.5*(1+cos(pi*(r-c_i)/h)) on |r-c_i| < h and exactly zero
    outside, with centers c_i = radius*i/num_basis and half-width
    h = radius/num_basis. They sum to 1 on [0, c_last] and every bump peaks
    at 1 on its center, so the profile value is exactly 0 at r >= radius.
    """

    num_basis: int
    radius_mm: float

    def __post_init__(self):
        if self.num_basis < 1:
            raise ValueError(f"num_basis must be >= 1, got {self.num_basis}")
        if self.radius_mm <= 0.0:
            raise ValueError(f"radius_mm must be positive, got {self.radius_mm}")

    @property
    def centers(self) -> np.ndarray:
        return self.radius_mm * np.arange(self.num_basis) / self.num_basis

    @property
    def half_width(self) -> float:
        return self.radius_mm / self.num_basis


def radial_eval(basis: RadialBasis, radius) -> np.ndarray:
    """Evaluate all bumps at one or many radii; shape (..., num_basis)."""
    r = np.asarray(radius, dtype=np.float64)
    if np.any(r < 0.0):
        raise ValueError("radius must be non-negative")
    return _radial_block(basis, r[..., None])


def _radial_block(basis: RadialBasis, r: np.ndarray) -> np.ndarray:
    # r broadcasts against the trailing centers axis
    h = basis.half_width
    t = (r - basis.centers) / h
    vals = 0.5 * (1.0 + np.cos(np.pi * t))
    return np.where(np.abs(t) < 1.0, vals, 0.0)


@dataclass(frozen=True)
class CouplingPath:
    """One (input block, filter degree, output block) route through the kernel."""

    block_in: int
    block_out: int
    degree_in: int
    degree_f: int
    degree_out: int
    mult_in: int
    mult_out: int


def _enumerate_paths(sig_in: IrrepsSignature, sig_out: IrrepsSignature) -> tuple[CouplingPath, ...]:
    paths = []
    for bo, (mo, iro) in enumerate(sig_out.blocks):
        for bi, (mi, iri) in enumerate(sig_in.blocks):
            lo, li = iro.degree, iri.degree
            for lf in range(abs(li - lo), min(MAX_DEGREE, li + lo) + 1):
                paths.append(CouplingPath(bi, bo, li, lf, lo, mi, mo))
    return tuple(paths)


class PhysicalKernelSpec:
    """A continuous-space kernel: signatures, physical width, radial resolution, weights.

    Weights are a list of torch tensors aligned with .paths, each shaped
    (mult_out, mult_in, num_basis). They are created unset; call
    init_weights() or assign externally (the network registers them as
    parameters).
    """

    def __init__(
        self,
        sig_in: IrrepsSignature,
        sig_out: IrrepsSignature,
        width_mm: float,
        num_basis: int = 5,
    ):
        if width_mm <= 0.0:
            raise ValueError(f"width_mm must be positive, got {width_mm}")
        if num_basis < 1:
            raise ValueError(f"num_basis must be >= 1, got {num_basis}")
        self.sig_in = sig_in
        self.sig_out = sig_out
        self.width_mm = float(width_mm)
        self.num_basis = int(num_basis)
        self.paths = _enumerate_paths(sig_in, sig_out)
        self.weights: list[torch.Tensor] | None = None
        self._tables: dict = {}

    @property
    def radial_basis(self) -> RadialBasis:
        return RadialBasis(self.num_basis, self.width_mm / 2.0)

    @property
    def num_parameters(self) -> int:
        return sum(p.mult_out * p.mult_in * self.num_basis for p in self.paths)

    def init_weights(self, generator: torch.Generator | None = None,
                     dtype: torch.dtype = torch.float32) -> None:
        # variance scaled by the total fan-in of each output block so deep
        # stacks keep unit-order activations
        fan_in = {}
        for p in self.paths:
            fan_in[p.block_out] = fan_in.get(p.block_out, 0) + p.mult_in * self.num_basis
        self.weights = []
        for p in self.paths:
            std = 1.0 / np.sqrt(fan_in[p.block_out])
            w = torch.empty((p.mult_out, p.mult_in, self.num_basis), dtype=dtype)
            w.normal_(0.0, std, generator=generator)
            self.weights.append(w)

    def describe(self) -> dict:
        return {
            "sig_in": str(self.sig_in),
            "sig_out": str(self.sig_out),
            "width_mm": self.width_mm,
            "num_basis": self.num_basis,
            "radial_family": RADIAL_FAMILY,
        }


@dataclass
class KernelRealization:
    """A kernel sampled on a voxel grid, ready for cross-correlation."""

    spec: PhysicalKernelSpec
    spacing_mm: tuple[float, float, float]
    extent: tuple[int, int, int]
    tensor: torch.Tensor  # (dim_out, dim_in, nx, ny, nz)


def _realization_tables(spec: PhysicalKernelSpec, s, dtype: torch.dtype):
    """Weight-independent sampling tables for one spacing, cached on the spec.

    Returns (extent, taps) where taps[path][b] broadcasts as
    (1, do, 1, di, nvox) against the (mo, 1, mi, 1, 1) weight slice.
    """
    key = (s, str(dtype))
    hit = spec._tables.get(key)
    if hit is not None:
        return hit
    extent = kernel_extent(spec.width_mm, s)

    # voxel-center offsets, exact per-axis index*spacing products
    axes = [
        ((np.arange(n) - n // 2).astype(np.float64)) * sa
        for n, sa in zip(extent, s)
    ]
    r2 = (
        (axes[0] ** 2)[:, None, None]
        + (axes[1] ** 2)[None, :, None]
        + (axes[2] ** 2)[None, None, :]
    )
    r = np.sqrt(r2).ravel()
    nvox = r.size
    ox = np.broadcast_to(axes[0][:, None, None], extent).ravel()
    oy = np.broadcast_to(axes[1][None, :, None], extent).ravel()
    oz = np.broadcast_to(axes[2][None, None, :], extent).ravel()
    center = r == 0.0
    safe_r = np.where(center, 1.0, r)
    dirs = np.stack([ox, oy, oz], axis=1) / safe_r[:, None]

    # angular tables per degree; the r=0 sample has no direction: degree 0
    # keeps its constant value, higher degrees are zeroed
    sh = {}
    for l in range(MAX_DEGREE + 1):
        tab = _sh_block(l, dirs)
        if l > 0:
            tab = np.where(center[:, None], 0.0, tab)
        sh[l] = tab

    radial = _radial_block(spec.radial_basis, r[:, None])  # (nvox, num_basis)

    coupled = {}
    for p in spec.paths:
        ckey = (p.degree_in, p.degree_f, p.degree_out)
        if ckey in coupled:
            continue
        c = cg_coefficients(*ckey)
        y = sh[p.degree_f]
        # fixed-order accumulation over the filter components
        acc = np.zeros((c.shape[0], c.shape[2], nvox), dtype=np.float64)
        for mf in range(c.shape[1]):
            acc += c[:, mf, :][:, :, None] * y[:, mf][None, None, :]
        coupled[ckey] = acc

    taps = []
    for p in spec.paths:
        ang = coupled[(p.degree_in, p.degree_f, p.degree_out)]  # (di, do, nvox)
        per_basis = []
        for b in range(spec.num_basis):
            tap = torch.from_numpy(
                np.ascontiguousarray(ang * radial[:, b][None, None, :])
            ).to(dtype)
            per_basis.append(tap.permute(1, 0, 2)[None, :, None, :, :])
        taps.append(per_basis)
    spec._tables[key] = (extent, taps)
    return extent, taps


def realize(
    spec: PhysicalKernelSpec,
    spacing_mm,
    dtype: torch.dtype | None = None,
    renormalize: bool = False,
) -> KernelRealization:
    """Sample the continuous kernel at voxel-center offsets of a grid.

    The returned tensor is differentiable with respect to spec.weights. Values
    at coincident physical offsets are bitwise identical across spacings: all
    per-voxel quantities are computed elementwise and reductions run in fixed
    order over path / basis / harmonic indices, never over voxels.

    renormalize=True scales the result by the voxel volume, approximating the
    continuous convolution integral instead of a plain tap sum.
    """
    if spec.weights is None:
        raise ValueError("kernel weights are unset; call init_weights() first")
    s = _check_spacing(spacing_mm)
    if dtype is None:
        dtype = spec.weights[0].dtype
    extent, taps = _realization_tables(spec, s, dtype)
    nx, ny, nz = extent
    nvox = nx * ny * nz
    dim_out, dim_in = spec.sig_out.total_dim, spec.sig_in.total_dim

    # per (block_out, block_in) sums over filter degrees, accumulated in the
    # fixed path order and assembled with cat (keeps autograd functional)
    blocks: dict[tuple[int, int], torch.Tensor] = {}
    for p, w, per_basis in zip(spec.paths, spec.weights, taps):
        do = 2 * p.degree_out + 1
        di = 2 * p.degree_in + 1
        w = w.to(dtype)
        block = torch.zeros((p.mult_out, do, p.mult_in, di, nvox), dtype=dtype)
        for b in range(spec.num_basis):
            # (mo, mi) x (di, do, nvox) -> (mo, do, mi, di, nvox), elementwise
            block = block + w[:, None, :, None, None, b] * per_basis[b]
        block = block.reshape(p.mult_out * do, p.mult_in * di, nvox)
        key = (p.block_out, p.block_in)
        blocks[key] = block if key not in blocks else blocks[key] + block

    rows = []
    for bo in range(len(spec.sig_out.blocks)):
        rows.append(
            torch.cat([blocks[(bo, bi)] for bi in range(len(spec.sig_in.blocks))], dim=1)
        )
    out = torch.cat(rows, dim=0)

    if renormalize:
        out = out * (s[0] * s[1] * s[2])
    tensor = out.reshape(dim_out, dim_in, nx, ny, nz)
    return KernelRealization(spec=spec, spacing_mm=s, extent=extent, tensor=tensor)


def rotate_grid(grid, rot):
    """Rotate the last three (spatial) axes of an array by a signed permutation.

    rot must be a signed permutation matrix (the grid symmetries); the grid is
    rotated about its box center, so output[..., u] = grid[..., rot^T u].
    Works on numpy arrays and torch tensors.
    """
    mat = np.asarray(rot)
    if mat.shape != (3, 3) or not np.all(np.isin(np.round(mat), (-1, 0, 1))):
        raise ValueError("rot must be a signed permutation matrix")
    lead = grid.ndim - 3
    perm = []
    flips = []
    for row in range(3):
        col = int(np.argmax(np.abs(mat[row])))
        perm.append(lead + col)
        if mat[row, col] < 0:
            flips.append(lead + row)
    axes = list(range(lead)) + perm
    if isinstance(grid, torch.Tensor):
        out = grid.permute(*axes)
        return torch.flip(out, flips) if flips else out
    out = np.transpose(grid, axes)
    for ax in flips:
        out = np.flip(out, axis=ax)
    return np.ascontiguousarray(out)


def convolve(realization: KernelRealization, features, spacing_mm=None):
    """Cross-correlate a (C_in, X, Y, Z) grid with a realized kernel, zero padded.

    Output has the same spatial shape and C_out channels. When spacing_mm is
    given it must match the realization's grid. Accepts numpy or torch input
    and returns the same kind.
    """
    if spacing_mm is not None:
        if _check_spacing(spacing_mm) != realization.spacing_mm:
            raise ValueError(
                f"features spacing {tuple(spacing_mm)} does not match "
                f"realization spacing {realization.spacing_mm}"
            )
    was_numpy = isinstance(features, np.ndarray)
    x = torch.from_numpy(features) if was_numpy else features
    if x.ndim != 4:
        raise ValueError(f"features must be (channels, x, y, z), got shape {tuple(x.shape)}")
    if x.shape[0] != realization.spec.sig_in.total_dim:
        raise ValueError(
            f"features have {x.shape[0]} channels, kernel expects "
            f"{realization.spec.sig_in.total_dim}"
        )
    k = realization.tensor
    x = x.to(k.dtype)
    pad = tuple(n // 2 for n in realization.extent)
    y = torch.nn.functional.conv3d(x[None], k, padding=pad)[0]
    return y.numpy() if was_numpy else y


def write_kernel_dump(path, realization: KernelRealization) -> None:
    """Serialize a realized kernel: magic, JSON header, float32 payload x-fastest."""
    header = dict(realization.spec.describe())
    header["spacing_mm"] = list(realization.spacing_mm)
    header["extent"] = list(realization.extent)
    header["dtype"] = "float32"
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    arr = realization.tensor.detach().cpu().numpy().astype("<f4")
    # disk order: out, in, z, y, x so that x varies fastest
    arr = np.ascontiguousarray(arr.transpose(0, 1, 4, 3, 2))
    with open(path, "wb") as f:
        f.write(_MAGIC_KERNEL)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(arr.tobytes())


def read_kernel_dump(path):
    """Load a kernel dump; returns (header dict, (dim_out, dim_in, nx, ny, nz) array)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC_KERNEL:
            raise ValueError(f"bad kernel dump magic {magic!r}")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    dim_out = IrrepsSignature.parse(header["sig_out"]).total_dim
    dim_in = IrrepsSignature.parse(header["sig_in"]).total_dim
    nx, ny, nz = header["extent"]
    arr = np.frombuffer(payload, dtype="<f4").reshape(dim_out, dim_in, nz, ny, nx)
    return header, np.ascontiguousarray(arr.transpose(0, 1, 4, 3, 2))
