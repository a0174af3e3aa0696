"""Real spherical harmonics, rotation matrices and coupling coefficients for degrees 0..2.

Conventions used throughout the package:

* harmonics are real and orthonormal over the unit sphere,
* components of degree l are ordered m = -l..l,
* the degree-1 triple is stored in (y, z, x) order, so rotating a degree-1
  feature is the usual 3-vector rotation conjugated by that permutation,
* only proper rotations are supported (det +1); all features transform as
  even (geometric) quantities.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

MAX_DEGREE = 2

_SQRT_PI = float(np.sqrt(np.pi))
_C0 = 0.5 / _SQRT_PI                    # 1/sqrt(4 pi)
_C1 = float(np.sqrt(3.0)) / 2.0 / _SQRT_PI
_C2A = float(np.sqrt(15.0)) / 2.0 / _SQRT_PI
_C2B = float(np.sqrt(5.0)) / 4.0 / _SQRT_PI
_C2C = float(np.sqrt(15.0)) / 4.0 / _SQRT_PI


@dataclass(frozen=True)
class Irrep:
    """A single rotation type: degree l in 0..2, parity fixed to 'e'."""

    degree: int
    parity: str = "e"

    def __post_init__(self):
        if self.degree < 0 or self.degree > MAX_DEGREE:
            raise ValueError(f"degree must be in 0..{MAX_DEGREE}, got {self.degree}")
        if self.parity != "e":
            raise ValueError(f"only even parity is supported, got {self.parity!r}")

    @property
    def dim(self) -> int:
        return 2 * self.degree + 1

    def __str__(self) -> str:
        return f"{self.degree}{self.parity}"


_SIG_BLOCK = re.compile(r"^(\d+)x(\d)(e)$")


@dataclass(frozen=True)
class IrrepsSignature:
    """An ordered list of (multiplicity, irrep) blocks, e.g. 8x0e+4x1e+2x2e.

    The block order is the wire format: features of a grid with this
    signature are laid out block by block, copy by copy, with the 2l+1
    components of each copy contiguous.
    """

    blocks: tuple[tuple[int, Irrep], ...]

    def __post_init__(self):
        for mult, ir in self.blocks:
            if mult < 1:
                raise ValueError(f"multiplicity must be >= 1, got {mult}")
            if not isinstance(ir, Irrep):
                raise TypeError("blocks must hold Irrep instances")

    @classmethod
    def parse(cls, text: str) -> "IrrepsSignature":
        """Parse '8x0e+4x1e+2x2e' style strings (whitespace tolerated)."""
        blocks = []
        for part in text.replace(" ", "").split("+"):
            m = _SIG_BLOCK.match(part)
            if m is None:
                raise ValueError(f"cannot parse signature block {part!r}")
            blocks.append((int(m.group(1)), Irrep(int(m.group(2)), m.group(3))))
        if not blocks:
            raise ValueError("empty signature")
        return cls(tuple(blocks))

    @property
    def total_dim(self) -> int:
        return sum(mult * ir.dim for mult, ir in self.blocks)

    @property
    def num_copies(self) -> int:
        return sum(mult for mult, _ in self.blocks)

    def scalar_multiplicity(self) -> int:
        return sum(mult for mult, ir in self.blocks if ir.degree == 0)

    def gate_multiplicity(self) -> int:
        """Number of gate scalars needed: one per copy of each non-scalar block."""
        return sum(mult for mult, ir in self.blocks if ir.degree > 0)

    def iter_copies(self):
        """Yield (offset, Irrep) for every copy in wire order."""
        off = 0
        for mult, ir in self.blocks:
            for _ in range(mult):
                yield off, ir
                off += ir.dim

    def __str__(self) -> str:
        return "+".join(f"{mult}x{ir}" for mult, ir in self.blocks)

    def __add__(self, other: "IrrepsSignature") -> "IrrepsSignature":
        return IrrepsSignature(self.blocks + other.blocks)


def sh_eval(degree: int, direction) -> np.ndarray:
    """Real orthonormal spherical harmonics of one degree at a unit direction.

    Returns the (2*degree+1,) component vector in m = -l..l order. The input
    must be unit length within 1e-9.
    """
    if degree < 0 or degree > MAX_DEGREE:
        raise ValueError(f"degree must be in 0..{MAX_DEGREE}, got {degree}")
    d = np.asarray(direction, dtype=np.float64)
    if d.shape != (3,):
        raise ValueError(f"direction must have shape (3,), got {d.shape}")
    norm = float(np.sqrt(d @ d))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"direction must be unit length, got norm {norm!r}")
    return _sh_block(degree, d[None, :])[0]


def _sh_block(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Vectorized harmonics: dirs (N,3) of unit vectors -> (N, 2l+1)."""
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    if degree == 0:
        return np.full((dirs.shape[0], 1), _C0)
    if degree == 1:
        return _C1 * np.stack([y, z, x], axis=1)
    return np.stack(
        [
            _C2A * x * y,
            _C2A * y * z,
            _C2B * (3.0 * z * z - 1.0),
            _C2A * x * z,
            _C2C * (x * x - y * y),
        ],
        axis=1,
    )


# Basis change taking (x,y,z) vectors to the (y,z,x) component order.
_P_YZX = np.array(
    [
        [0.0, 1.0, 0.0],
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0],
    ]
)


def _check_rotation(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rot.shape}")
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-8:
        raise ValueError("matrix is not orthogonal within 1e-8")
    if np.linalg.det(rot) < 0.0:
        raise ValueError("improper rotation (det < 0) is not supported")
    return rot


@lru_cache(maxsize=None)
def _m2_rows() -> np.ndarray:
    """Rows extracting the 5 degree-2 components from vec(d d^T), d=(x,y,z).

    Row k satisfies Y_2[k](d) = M[k] @ kron(d, d) for unit d. The rows are
    mutually orthogonal with squared norm 15/(8 pi), so
    sqrt(8 pi / 15) * M has orthonormal rows.
    """
    m = np.zeros((5, 9))
    # kron(d, d) index (3*i + j) holds d_i * d_j with (x,y,z) indexing.
    xx, xy, xz = 0, 1, 2
    yx, yy, yz = 3, 4, 5
    zx, zy, zz = 6, 7, 8
    m[0, xy] = m[0, yx] = _C2A / 2.0
    m[1, yz] = m[1, zy] = _C2A / 2.0
    # 3 z^2 - 1 = 2 zz - xx - yy on the unit sphere.
    m[2, zz] = 2.0 * _C2B
    m[2, xx] = -_C2B
    m[2, yy] = -_C2B
    m[3, xz] = m[3, zx] = _C2A / 2.0
    m[4, xx] = _C2C
    m[4, yy] = -_C2C
    return m


def wigner_rotation(degree: int, rot) -> np.ndarray:
    """The (2l+1)x(2l+1) matrix rotating degree-l components, D(R).

    Satisfies sh_eval(l, R @ d) == D(R) @ sh_eval(l, d) and composes as
    D(R1 @ R2) == D(R1) @ D(R2).
    """
    if degree < 0 or degree > MAX_DEGREE:
        raise ValueError(f"degree must be in 0..{MAX_DEGREE}, got {degree}")
    rot = _check_rotation(rot)
    if degree == 0:
        return np.ones((1, 1))
    if degree == 1:
        return _P_YZX @ rot @ _P_YZX.T
    m = _m2_rows()
    scale = 8.0 * np.pi / 15.0
    return scale * (m @ np.kron(rot, rot) @ m.T)


def rotate_features(signature: IrrepsSignature, rot, features: np.ndarray) -> np.ndarray:
    """Apply the block-diagonal rotation of a signature to a feature vector.

    features has the signature's total_dim along its first axis; trailing
    axes are carried along unchanged.
    """
    feats = np.asarray(features)
    if feats.shape[0] != signature.total_dim:
        raise ValueError(
            f"feature dim {feats.shape[0]} does not match signature dim {signature.total_dim}"
        )
    rot = _check_rotation(rot)
    out = np.empty_like(feats, dtype=np.float64)
    dmats = {l: wigner_rotation(l, rot) for l in {ir.degree for _, ir in signature.blocks}}
    for off, ir in signature.iter_copies():
        block = feats[off : off + ir.dim]
        out[off : off + ir.dim] = np.tensordot(dmats[ir.degree], block, axes=(1, 0))
    return out


@lru_cache(maxsize=None)
def _probe_rotations() -> tuple[np.ndarray, ...]:
    """A fixed set of generic rotations used to pin down coupling tensors."""
    rng = np.random.default_rng(20240817)
    rots = []
    for _ in range(6):
        g = rng.standard_normal((3, 3))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))
        if np.linalg.det(q) < 0.0:
            q[:, [0, 1]] = q[:, [1, 0]]
        rots.append(q)
    return tuple(rots)


@lru_cache(maxsize=None)
def _cg_cached(l_in: int, l_f: int, l_out: int) -> np.ndarray:
    dims = (2 * l_in + 1, 2 * l_f + 1, 2 * l_out + 1)
    if max(l_in, l_f, l_out) > MAX_DEGREE:
        return np.zeros(dims)
    if not (abs(l_in - l_f) <= l_out <= l_in + l_f):
        return np.zeros(dims)
    # C is the one-dimensional joint null space of D(l_in) x D(l_f) x D(l_out) - I
    # over generic rotations; stacking several probes isolates it.
    rows = []
    n = dims[0] * dims[1] * dims[2]
    for rot in _probe_rotations():
        k = np.kron(
            np.kron(wigner_rotation(l_in, rot), wigner_rotation(l_f, rot)),
            wigner_rotation(l_out, rot),
        )
        rows.append(k - np.eye(n))
    a = np.concatenate(rows, axis=0)
    _, s, vh = np.linalg.svd(a)
    if s[-1] > 1e-10:
        raise RuntimeError(
            f"no invariant coupling found for ({l_in},{l_f},{l_out}); "
            f"smallest singular value {s[-1]:g}"
        )
    c = vh[-1].reshape(dims)
    # Fix the overall sign deterministically, then normalize.
    flat = c.ravel()
    pivot = flat[np.abs(flat) > 0.5 * np.abs(flat).max()][0]
    c = c * np.sign(pivot)
    c = c * np.sqrt((2 * l_out + 1) / np.sum(c * c))
    c.setflags(write=False)
    return c


def cg_coefficients(l_in: int, l_f: int, l_out: int) -> np.ndarray:
    """Coupling tensor C[m_in, m_f, m_out] for combining two degrees into a third.

    Invariant under simultaneous rotation of all three indices and normalized
    so that sum(C**2) == 2*l_out + 1. Returns an all-zero tensor when the
    triangle inequality fails or any degree exceeds 2.
    """
    for name, l in (("l_in", l_in), ("l_f", l_f), ("l_out", l_out)):
        if l < 0:
            raise ValueError(f"{name} must be >= 0, got {l}")
    return np.array(_cg_cached(l_in, l_f, l_out))


def proper_cube_rotations() -> list[np.ndarray]:
    """The 24 proper rotations mapping an isotropic voxel grid to itself."""
    rots = []
    for perm in (
        (0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0),
    ):
        for signs in np.ndindex(2, 2, 2):
            rot = np.zeros((3, 3))
            for row, (axis, s) in enumerate(zip(perm, signs)):
                rot[row, axis] = 1.0 if s == 0 else -1.0
            if np.linalg.det(rot) > 0.0:
                rots.append(rot)
    return rots


def proper_prism_rotations() -> list[np.ndarray]:
    """The 8 proper rotations preserving a grid with sx == sy != sz.

    Four rotations about z plus four two-fold rotations about in-plane axes
    (which flip z); these are the grid symmetries available when only the two
    in-plane axes are interchangeable.
    """
    rots = []
    for rot in proper_cube_rotations():
        if abs(rot[2, 2]) == 1.0:  # z axis maps to +/- z
            rots.append(rot)
    return rots
