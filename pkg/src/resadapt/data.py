"""Volumes on disk, synthetic scenes, rasterization, and grid resampling.

Volumes are (channels, nx, ny, nz) float32 arrays with a voxel spacing and an
origin; voxel center i sits at origin + i * spacing per axis. Scenes are
analytic functions of physical position, so the same scene can be rasterized
at any spacing with exactly agreeing values at coincident voxel centers.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

_MAGIC_VOLUME = b"RVOL0001"

# cubic B-spline prefilter pole and the init horizon for the causal pass
_POLE = float(np.sqrt(3.0) - 2.0)
_HORIZON = int(np.ceil(np.log(1e-8) / np.log(abs(_POLE))))


class VolumeFormatError(ValueError):
    """Raised when a volume or model file does not parse."""


@dataclass
class Volume:
    """A multichannel grid in physical space."""

    data: np.ndarray  # (channels, nx, ny, nz)
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be 4-d, got shape {self.data.shape}")
        self.spacing_mm = tuple(float(v) for v in self.spacing_mm)
        self.origin_mm = tuple(float(v) for v in self.origin_mm)
        if len(self.spacing_mm) != 3 or any(v <= 0 for v in self.spacing_mm):
            raise ValueError(f"bad spacing {self.spacing_mm}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        return tuple(n * s for n, s in zip(self.dims, self.spacing_mm))


def write_volume(path, vol: Volume) -> None:
    """Write magic, JSON header, float32 little-endian payload with x fastest."""
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing_mm),
        "origin_mm": list(vol.origin_mm),
        "channels": vol.channels,
        "dtype": "float32",
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    arr = np.ascontiguousarray(vol.data.astype("<f4").transpose(0, 3, 2, 1))
    with open(path, "wb") as f:
        f.write(_MAGIC_VOLUME)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(arr.tobytes())


def _read_header(f) -> dict:
    magic = f.read(8)
    if magic != _MAGIC_VOLUME:
        raise VolumeFormatError(f"bad volume magic {magic!r}")
    raw = f.read(4)
    if len(raw) != 4:
        raise VolumeFormatError("truncated volume header")
    (hlen,) = struct.unpack("<I", raw)
    try:
        return json.loads(f.read(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise VolumeFormatError(f"unparseable volume header: {e}") from e


def read_volume_header(path) -> dict:
    with open(path, "rb") as f:
        return _read_header(f)


def read_volume(path) -> Volume:
    with open(path, "rb") as f:
        header = _read_header(f)
        payload = f.read()
    dims = tuple(header["dims"])
    channels = header["channels"]
    expected = channels * dims[0] * dims[1] * dims[2] * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload has {len(payload)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(
        channels, dims[2], dims[1], dims[0]
    )
    return Volume(
        data=np.ascontiguousarray(arr.transpose(0, 3, 2, 1)),
        spacing_mm=tuple(header["spacing_mm"]),
        origin_mm=tuple(header.get("origin_mm", (0.0, 0.0, 0.0))),
    )


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class PhantomScene:
    """An analytic head phantom: tissue ellipsoid, lesion bumps, cosine texture.

    The lesion field is sum_j amp_j * exp(-alpha_j * rho_j^2) with rho the
    ellipsoidal distance to lesion j and alpha_j = ln(amp_j / tau); an
    isolated lesion therefore crosses the mask threshold tau exactly at its
    nominal radius. Texture is a fixed sum of random-direction cosines, so
    every field is smooth, deterministic, and evaluable at any point.
    """

    box_mm: float
    brain_center: tuple[float, float, float]
    brain_radii: tuple[float, float, float]
    lesion_centers: np.ndarray  # (L, 3)
    lesion_radii: np.ndarray  # (L, 3)
    lesion_amps: np.ndarray  # (L,)
    tau: float = 0.35
    tissue_level: float = 1.0
    texture_omegas: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    texture_phases: np.ndarray = field(default_factory=lambda: np.zeros(0))
    texture_amps: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def lesion_field(self, points: np.ndarray) -> np.ndarray:
        """Sum of lesion bumps at (N, 3) physical points."""
        out = np.zeros(points.shape[0])
        for c, r, a in zip(self.lesion_centers, self.lesion_radii, self.lesion_amps):
            alpha = np.log(a / self.tau)
            rho2 = ((points - c) / r) ** 2
            rho2 = rho2[:, 0] + rho2[:, 1] + rho2[:, 2]
            out = out + a * np.exp(-alpha * rho2)
        return out

    def brain_weight(self, points: np.ndarray) -> np.ndarray:
        """Soft indicator of the tissue ellipsoid (sharp but C-infinity edge)."""
        rho2 = ((points - np.asarray(self.brain_center)) / self.brain_radii) ** 2
        rho2 = rho2[:, 0] + rho2[:, 1] + rho2[:, 2]
        return 1.0 / (1.0 + np.exp(np.clip(40.0 * (rho2 - 1.0), -60.0, 60.0)))

    def texture(self, points: np.ndarray) -> np.ndarray:
        out = np.zeros(points.shape[0])
        # fixed-order accumulation keeps values bitwise reproducible at
        # coincident points across rasterizations of different sizes
        for w, phi, a in zip(self.texture_omegas, self.texture_phases, self.texture_amps):
            out = out + a * np.cos(points[:, 0] * w[0] + points[:, 1] * w[1]
                                   + points[:, 2] * w[2] + phi)
        return out

    def intensity(self, points: np.ndarray) -> np.ndarray:
        return self.brain_weight(points) * (
            self.tissue_level + self.texture(points) + self.lesion_field(points)
        )

    def mask(self, points: np.ndarray) -> np.ndarray:
        return (self.lesion_field(points) >= self.tau).astype(np.float32)


def make_scene(seed: int, box_mm: float = 48.0, num_lesions: int | None = None) -> PhantomScene:
    """Draw a randomized scene: ellipsoid, 3-8 lesions inside it, two texture bands."""
    rng = np.random.default_rng(seed)
    half = box_mm / 2.0
    center = half + rng.uniform(-0.05, 0.05, 3) * box_mm
    radii = rng.uniform(0.36, 0.44, 3) * box_mm
    if num_lesions is None:
        num_lesions = int(rng.integers(3, 9))
    centers, sizes, amps = [], [], []
    attempts = 0
    while len(centers) < num_lesions:
        attempts += 1
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        hi = 0.7 if attempts < 200 else 0.2
        rho = rng.uniform(0.0, hi) ** (1.0 / 3.0)
        c = center + u * rho * radii
        r = rng.uniform(2.0, 5.0) * rng.uniform(0.8, 1.2, 3)
        # keep the lesion plus its overlap halo inside the ellipsoid: bound
        # the ellipsoidal distance by the bounding-box corner
        margin = np.sqrt(np.sum(((np.abs(c - center) + 1.3 * r) / radii) ** 2))
        if margin > 0.95:
            continue
        centers.append(c)
        sizes.append(r)
        amps.append(rng.uniform(0.65, 1.0))
    # coarse confounder band (bright blobs wider than lesions) + fine band;
    # all wavelengths stay above twice the coarsest isotropic spacing so the
    # same physical content is representable on every training grid
    omegas, phases, amps_t = [], [], []
    for count, lam_lo, lam_hi, amp in ((40, 6.0, 12.0, 0.35), (20, 3.5, 5.0, 0.15)):
        for _ in range(count):
            u = rng.standard_normal(3)
            u /= np.linalg.norm(u)
            lam = rng.uniform(lam_lo, lam_hi)
            omegas.append(u * (2.0 * np.pi / lam))
            phases.append(rng.uniform(0.0, 2.0 * np.pi))
            amps_t.append(amp / np.sqrt(count / 2.0))
    return PhantomScene(
        box_mm=box_mm,
        brain_center=tuple(center),
        brain_radii=tuple(radii),
        lesion_centers=np.array(centers),
        lesion_radii=np.array(sizes),
        lesion_amps=np.array(amps),
        texture_omegas=np.array(omegas),
        texture_phases=np.array(phases),
        texture_amps=np.array(amps_t),
    )


def rasterize(scene: PhantomScene, spacing_mm) -> tuple[Volume, Volume]:
    """Sample intensity and mask at voxel centers i * spacing (origin 0).

    Grid dims are ceil(box / spacing) per axis, so different spacings cover
    the same physical box and share voxel centers wherever index*spacing
    products coincide.
    """
    s = tuple(float(v) for v in spacing_mm)
    dims = tuple(int(np.ceil(scene.box_mm / sa)) for sa in s)
    coords = [np.arange(n, dtype=np.float64) * sa for n, sa in zip(dims, s)]
    px = np.broadcast_to(coords[0][:, None, None], dims).ravel()
    py = np.broadcast_to(coords[1][None, :, None], dims).ravel()
    pz = np.broadcast_to(coords[2][None, None, :], dims).ravel()
    points = np.stack([px, py, pz], axis=1)
    img = scene.intensity(points).reshape(dims).astype(np.float32)
    msk = scene.mask(points).reshape(dims).astype(np.float32)
    return (
        Volume(img[None], spacing_mm=s),
        Volume(msk[None], spacing_mm=s),
    )


# ---------------------------------------------------------------------------
# resampling


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n - 2
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def _prefilter_lines(lines: np.ndarray) -> np.ndarray:
    """Cubic B-spline prefilter along the last axis, mirror boundary.

    Works on the residual against each line's first sample, which makes
    constant lines exact fixed points of the whole transform.
    """
    n = lines.shape[-1]
    if n < 2:
        return lines.copy()
    mu = lines[..., :1]
    c = (lines - mu) * 6.0
    out = np.empty_like(c)
    # causal init: truncated mirror sum
    horizon = min(_HORIZON + 1, 2 * n - 2)
    taps = _mirror_index(np.arange(horizon), n)
    acc = np.zeros(c.shape[:-1])
    for k in range(horizon - 1, -1, -1):
        acc = acc * _POLE + c[..., taps[k]]
    out[..., 0] = acc
    for k in range(1, n):
        out[..., k] = c[..., k] + _POLE * out[..., k - 1]
    last = (_POLE / (_POLE * _POLE - 1.0)) * (out[..., n - 1] + _POLE * out[..., n - 2])
    out[..., n - 1] = last
    for k in range(n - 2, -1, -1):
        out[..., k] = _POLE * (out[..., k + 1] - out[..., k])
    return out + mu


def _spline_axis(data: np.ndarray, axis: int, u: np.ndarray) -> np.ndarray:
    """Evaluate the cubic spline along one axis at fractional source indices u."""
    moved = np.moveaxis(data, axis, -1)
    coeff = _prefilter_lines(moved.astype(np.float64))
    n = coeff.shape[-1]
    base = np.floor(u).astype(np.int64)
    f = u - base
    w0 = (1.0 - f) ** 3 / 6.0
    w2 = (-3.0 * f**3 + 3.0 * f**2 + 3.0 * f + 1.0) / 6.0
    w3 = f**3 / 6.0
    i0 = _mirror_index(base - 1, n)
    i1 = _mirror_index(base, n)
    i2 = _mirror_index(base + 1, n)
    i3 = _mirror_index(base + 2, n)
    anchor = coeff[..., i1]
    # difference form: weights sum to one exactly, so constants pass through
    out = (
        anchor
        + w0 * (coeff[..., i0] - anchor)
        + w2 * (coeff[..., i2] - anchor)
        + w3 * (coeff[..., i3] - anchor)
    )
    return np.moveaxis(out, -1, axis)


def _nearest_axis(data: np.ndarray, axis: int, u: np.ndarray) -> np.ndarray:
    n = data.shape[axis]
    idx = np.clip(np.floor(u + 0.5).astype(np.int64), 0, n - 1)
    return np.take(data, idx, axis=axis)


def resample(vol: Volume, target_spacing_mm, method: str = "bspline3") -> Volume:
    """Resample onto a grid with the same origin covering the same extent.

    Output dims are round(extent / target spacing) per axis. method is
    'bspline3' (prefiltered cubic interpolation, mirror boundary) for images
    or 'nearest' for label masks.
    """
    if method not in ("bspline3", "nearest"):
        raise ValueError(f"unknown resampling method {method!r}")
    t = tuple(float(v) for v in target_spacing_mm)
    if len(t) != 3 or any(v <= 0 for v in t):
        raise ValueError(f"bad target spacing {t}")
    out_dims = tuple(
        max(1, int(round(e / ta))) for e, ta in zip(vol.extent_mm, t)
    )
    data = vol.data.astype(np.float64)
    for axis in range(3):
        u = np.arange(out_dims[axis]) * t[axis] / vol.spacing_mm[axis]
        if method == "bspline3":
            data = _spline_axis(data, 1 + axis, u)
        else:
            data = _nearest_axis(data, 1 + axis, u)
    return Volume(
        data.astype(np.float32), spacing_mm=t, origin_mm=vol.origin_mm
    )


NORMALIZATION = "zscore_nonzero.v1"


def normalize_volume(vol: Volume) -> Volume:
    """Zero-mean, unit-variance intensity over nonzero voxels.

    Statistics are computed over nonzero voxels only, and exact zeros are
    left at zero so that zero padding stays neutral. Volumes with no nonzero
    voxels are returned unchanged.
    """
    data = vol.data.astype(np.float64)
    nz = data != 0.0
    if not nz.any():
        return Volume(vol.data.copy(), spacing_mm=vol.spacing_mm, origin_mm=vol.origin_mm)
    vals = data[nz]
    mean = vals.mean()
    std = max(float(vals.std()), 1e-8)
    out = data.copy()
    out[nz] = (vals - mean) / std
    return Volume(out.astype(np.float32), spacing_mm=vol.spacing_mm, origin_mm=vol.origin_mm)


# ---------------------------------------------------------------------------
# dataset generation


def spacing_key(spacing_mm) -> str:
    parts = []
    for v in spacing_mm:
        v = float(v)
        parts.append(f"{v:g}")
    return "x".join(parts)


def window_voxels(window_mm, spacing_mm) -> tuple:
    """Voxel dims of a physical window on a grid: round(mm/spacing), min 1."""
    return tuple(
        max(1, int(round(w / s))) for w, s in zip(window_mm, spacing_mm)
    )


DEFAULT_SPACINGS = ((1.0, 1.0, 1.0), (0.5, 0.5, 1.0), (1.0, 1.0, 3.0))


def generate_dataset(
    out_dir,
    seed: int = 0,
    n_train: int = 30,
    n_val: int = 10,
    n_test: int = 20,
    spacings=DEFAULT_SPACINGS,
    box_mm: float = 48.0,
) -> dict:
    """Rasterize scenes at every spacing and write volumes plus manifest.json.

    Each case is one scene shared across all spacings, so ground truth at any
    listed spacing is scene-exact rather than resampled.
    """
    import os

    os.makedirs(out_dir, exist_ok=True)
    cases = []
    counts = {"train": n_train, "val": n_val, "test": n_test}
    scene_index = 0
    for split in ("train", "val", "test"):
        for i in range(counts[split]):
            case_id = f"{split}_{i:03d}"
            scene_seed = seed * 100003 + scene_index
            scene_index += 1
            scene = make_scene(scene_seed, box_mm=box_mm)
            volumes = {}
            for sp in spacings:
                key = spacing_key(sp)
                img, msk = rasterize(scene, sp)
                img_name = f"{case_id}_{key}_img.rvol"
                msk_name = f"{case_id}_{key}_mask.rvol"
                write_volume(os.path.join(out_dir, img_name), img)
                write_volume(os.path.join(out_dir, msk_name), msk)
                volumes[key] = {"image": img_name, "mask": msk_name}
            cases.append(
                {
                    "id": case_id,
                    "split": split,
                    "scene_seed": scene_seed,
                    "volumes": volumes,
                }
            )
    manifest = {
        "seed": seed,
        "box_mm": box_mm,
        "spacings": [list(sp) for sp in spacings],
        "cases": cases,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    return manifest


def load_manifest(data_dir) -> dict:
    import os

    path = os.path.join(data_dir, "manifest.json")
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise VolumeFormatError(f"no manifest.json in {data_dir}")
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"unparseable manifest: {e}")


def load_split(data_dir, manifest: dict, split: str, key: str):
    """Load (image, mask) Volume pairs of one split at one spacing key."""
    import os

    out = []
    for case in manifest["cases"]:
        if case["split"] != split:
            continue
        if key not in case["volumes"]:
            raise VolumeFormatError(
                f"case {case['id']} has no spacing {key}; available: "
                f"{sorted(case['volumes'])}"
            )
        entry = case["volumes"][key]
        img = read_volume(os.path.join(data_dir, entry["image"]))
        msk = read_volume(os.path.join(data_dir, entry["mask"]))
        out.append((case["id"], img, msk))
    return out
