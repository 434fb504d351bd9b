"""Gaze supervision: probes, spherical KDE, and sample generation.

Raw head-pose rays are aggregated into probes (all rays originating within
a radius R of a probe center).  Each probe defines a probability density
over directions on the unit sphere via a von Mises-Fisher kernel density
estimate; averaging kernels keeps the density normalized by construction.
Training samples pair uniformly drawn directions with that density.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import DataFormatError
from .core import Vec3, WorldTransform
from .field import Aabb

log = logging.getLogger(__name__)

PROBE_MAGIC = b"NERGPRB1"
DEFAULT_KAPPA = 50.0   # ~8 degrees angular std; bandwidth is a free parameter
DEFAULT_RADIUS = 0.1   # meters
DEFAULT_RAY_CAP = 1024


def _unit_rows(v: np.ndarray, what: str, atol: float = 1e-6) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norms - 1.0) > atol):
        raise ValueError(f"{what} must be unit vectors")
    return v


@dataclass(frozen=True)
class GazeRay:
    """A head-pose sample: where the observer stood and where they faced."""

    position: Vec3
    direction: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", _unit_rows(self.direction, "gaze direction"))


@dataclass(frozen=True)
class VmfKernel:
    """von Mises-Fisher smoothing kernel on the sphere."""

    kappa: float

    def __post_init__(self) -> None:
        if not (self.kappa > 0 and np.isfinite(self.kappa)):
            raise ValueError(f"kappa must be positive and finite, got {self.kappa}")


def vmf_pdf(kernel: VmfKernel, mu: np.ndarray, omega: np.ndarray) -> float:
    """Density per steradian of the vMF distribution centered on ``mu``.

    C(k)*exp(k*mu.omega) with C(k) = k/(4*pi*sinh(k)) is rewritten as
    k*exp(k*(mu.omega - 1)) / (2*pi*(1 - e^{-2k})), which never overflows:
    the exponent is <= 0 and the denominator is evaluated with expm1.
    """
    mu = _unit_rows(mu, "mu")
    omega = _unit_rows(omega, "omega")
    return float(_vmf_many(kernel.kappa, mu[None, :], omega[None, :])[0, 0])


def _vmf_many(kappa: float, mu: np.ndarray, omegas: np.ndarray) -> np.ndarray:
    dots = omegas @ np.asarray(mu, dtype=np.float64).T  # (m, k) or (m,)
    coeff = kappa / (2.0 * np.pi * -np.expm1(-2.0 * kappa))
    return coeff * np.exp(kappa * (dots - 1.0))


@dataclass(frozen=True)
class GazeProbe:
    """All gaze rays near one point, plus the kernel that smooths them."""

    center: Vec3
    rays: np.ndarray  # (n, 3) unit directions
    kernel: VmfKernel

    def __post_init__(self) -> None:
        rays = _unit_rows(np.atleast_2d(self.rays), "probe rays")
        if rays.shape[0] < 1:
            raise ValueError("a probe needs at least one ray")
        object.__setattr__(self, "rays", rays)

    @property
    def ray_count(self) -> int:
        return self.rays.shape[0]


def probe_density(probe: GazeProbe, omega: np.ndarray) -> float:
    """KDE value at one direction: mean of the per-ray kernels."""
    omega = _unit_rows(omega, "omega")
    return float(probe_density_many(probe, omega[None, :])[0])


def probe_density_many(probe: GazeProbe, omegas: np.ndarray) -> np.ndarray:
    """KDE values for a batch of unit directions, shape (m,)."""
    vals = _vmf_many(probe.kernel.kappa, probe.rays, np.asarray(omegas, dtype=np.float64))
    return vals.mean(axis=1)


@dataclass(frozen=True)
class PlacementRecord:
    """How a probe set was built, enough to rebuild it bit-identically."""

    mode: str          # "grid" or "random"
    seed: int
    radius: float
    cap: int
    spacing: float | None = None   # grid mode
    count: int | None = None       # random mode
    volume: Aabb | None = None

    def to_json(self) -> dict:
        out = {"mode": self.mode, "seed": self.seed, "radius": self.radius, "cap": self.cap}
        if self.spacing is not None:
            out["spacing"] = self.spacing
        if self.count is not None:
            out["count"] = self.count
        if self.volume is not None:
            out["volume"] = self.volume.to_json()
        return out

    @staticmethod
    def from_json(obj: dict) -> "PlacementRecord":
        vol = Aabb.from_json(obj["volume"]) if "volume" in obj else None
        return PlacementRecord(obj["mode"], int(obj["seed"]), float(obj["radius"]),
                               int(obj["cap"]), obj.get("spacing"), obj.get("count"), vol)


@dataclass(frozen=True)
class ProbeSet:
    probes: tuple
    placement: PlacementRecord

    def __post_init__(self) -> None:
        object.__setattr__(self, "probes", tuple(self.probes))
        centers = {tuple(p.center.as_array()) for p in self.probes}
        if len(centers) != len(self.probes):
            raise ValueError("probe centers must be pairwise distinct")

    def __len__(self) -> int:
        return len(self.probes)


@dataclass(frozen=True)
class GazeSample:
    """One supervision triple: where, which direction, and its density."""

    position: Vec3
    direction: np.ndarray
    g: float

    def __post_init__(self) -> None:
        if not (self.g >= 0 and np.isfinite(self.g)):
            raise ValueError(f"gaze density must be >= 0 and finite, got {self.g}")


# ---------------------------------------------------------------------------
# probe construction


def _grid_centers(volume: Aabb, spacing: float) -> np.ndarray:
    counts = np.maximum(np.floor(volume.size / spacing).astype(int) + 1, 1)
    axes = [volume.lo[a] + np.arange(counts[a]) * spacing for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


class _RayBuckets:
    """Uniform hash grid over ray origins for radius queries."""

    def __init__(self, positions: np.ndarray, cell: float) -> None:
        self.positions = positions
        self.cell = cell
        self.buckets: dict[tuple, np.ndarray] = {}
        keys = np.floor(positions / cell).astype(np.int64)
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        sorted_keys = keys[order]
        boundaries = np.flatnonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1)) + 1
        for chunk in np.split(order, boundaries):
            self.buckets[tuple(keys[chunk[0]])] = chunk

    def within(self, center: np.ndarray, radius: float) -> np.ndarray:
        """Indices of positions within ``radius`` of ``center``."""
        lo = np.floor((center - radius) / self.cell).astype(np.int64)
        hi = np.floor((center + radius) / self.cell).astype(np.int64)
        candidates = []
        for kx in range(lo[0], hi[0] + 1):
            for ky in range(lo[1], hi[1] + 1):
                for kz in range(lo[2], hi[2] + 1):
                    got = self.buckets.get((kx, ky, kz))
                    if got is not None:
                        candidates.append(got)
        if not candidates:
            return np.empty(0, dtype=np.int64)
        idx = np.concatenate(candidates)
        d = self.positions[idx] - center
        return idx[np.einsum("ij,ij->i", d, d) <= radius * radius]


def build_probes(rays: list, placement: str = "grid", R: float = DEFAULT_RADIUS,
                 cap: int = DEFAULT_RAY_CAP, seed: int = 0, *,
                 kappa: float = DEFAULT_KAPPA, volume: Aabb | None = None,
                 spacing: float | None = None, count: int | None = None) -> ProbeSet:
    """Place probe centers, gather rays within R of each, cap, and wrap.

    Grid placement tiles ``volume`` (default: bounding box of the ray
    origins) at ``spacing`` (default R, so no ray can fall between probes).
    Random placement draws ``count`` centers uniformly in the volume.
    Probes that catch zero rays are dropped.  Over-cap probes keep a seeded
    uniform subsample without replacement.
    """
    if R <= 0:
        raise ValueError(f"radius must be positive, got {R}")
    if cap < 1:
        raise ValueError(f"ray cap must be >= 1, got {cap}")
    if placement not in ("grid", "random"):
        raise ValueError(f"placement must be 'grid' or 'random', got {placement!r}")

    kernel = VmfKernel(kappa)
    if not rays:
        record = PlacementRecord(placement, seed, R, cap, spacing, count, volume)
        return ProbeSet((), record)

    positions = np.array([r.position.as_array() for r in rays])
    directions = np.array([r.direction for r in rays])
    if volume is None:
        pad = 1e-6  # guard against zero-extent volumes from co-located rays
        volume = Aabb(positions.min(axis=0) - pad, positions.max(axis=0) + pad)

    rng = np.random.default_rng(seed)
    if placement == "grid":
        if spacing is None:
            spacing = R
        centers = _grid_centers(volume, spacing)
    else:
        if count is None:
            count = max(1, len(rays) // 64)
        centers = volume.lo + rng.random((count, 3)) * volume.size

    index = _RayBuckets(positions, cell=R)
    probes = []
    seen: set[tuple] = set()
    for c in centers:
        key = tuple(c)
        if key in seen:
            continue
        seen.add(key)
        idx = index.within(c, R)
        if idx.size == 0:
            continue
        idx = np.sort(idx)
        if idx.size > cap:
            idx = np.sort(rng.choice(idx, size=cap, replace=False))
        probes.append(GazeProbe(Vec3.from_array(c), directions[idx], kernel))

    record = PlacementRecord(placement, seed, R, cap, spacing, count, volume)
    return ProbeSet(tuple(probes), record)


def split_probe_set(probes: ProbeSet, n_train: int, n_test: int,
                    seed: int = 0) -> tuple[ProbeSet, ProbeSet]:
    """Disjoint seeded train/test subsets of a probe set."""
    if n_train < 1 or n_test < 1:
        raise ValueError("need at least one probe on each side of the split")
    if n_train + n_test > len(probes):
        raise ValueError(f"asked for {n_train}+{n_test} probes, have {len(probes)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(probes))
    train = tuple(probes.probes[i] for i in sorted(order[:n_train]))
    test = tuple(probes.probes[i] for i in sorted(order[n_train:n_train + n_test]))
    return (ProbeSet(train, probes.placement), ProbeSet(test, probes.placement))


# ---------------------------------------------------------------------------
# sphere sampling and training samples


def sample_sphere_uniform(n: int, seed: int | np.random.Generator = 0) -> np.ndarray:
    """n seeded uniform unit vectors, via normalized Gaussian draws."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    v = rng.standard_normal((n, 3))
    norms = np.linalg.norm(v, axis=1)
    while np.any(norms < 1e-12):  # essentially never; keeps the math safe
        bad = norms < 1e-12
        v[bad] = rng.standard_normal((int(bad.sum()), 3))
        norms = np.linalg.norm(v, axis=1)
    return v / norms[:, None]


def fibonacci_sphere(n: int) -> np.ndarray:
    """Deterministic low-discrepancy directions, for quadrature use."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def make_training_arrays(probes: ProbeSet, n_per_probe: int = 1024,
                         seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Flat (positions, directions, g) arrays; the array form of
    :func:`make_training_samples`, shared by training loops."""
    if len(probes) == 0:
        raise ValueError("probe set is empty")
    rng = np.random.default_rng(seed)
    pos_out = np.empty((len(probes) * n_per_probe, 3))
    dir_out = np.empty_like(pos_out)
    g_out = np.empty(len(probes) * n_per_probe)
    for i, probe in enumerate(probes.probes):
        dirs = sample_sphere_uniform(n_per_probe, rng)
        sl = slice(i * n_per_probe, (i + 1) * n_per_probe)
        pos_out[sl] = probe.center.as_array()
        dir_out[sl] = dirs
        g_out[sl] = probe_density_many(probe, dirs)
    return pos_out, dir_out, g_out


def make_training_samples(probes: ProbeSet, n_per_probe: int = 1024,
                          seed: int = 0) -> list:
    """Uniform directions per probe, labeled with the probe's KDE value."""
    pos, dirs, g = make_training_arrays(probes, n_per_probe, seed)
    return [GazeSample(Vec3.from_array(pos[i]), dirs[i], float(g[i]))
            for i in range(pos.shape[0])]


# ---------------------------------------------------------------------------
# synthetic gaze generation


def _sample_vmf(rng: np.random.Generator, mu: np.ndarray, kappa: float) -> np.ndarray:
    """One draw from vMF(mu, kappa) on the 2-sphere (inverse-CDF in cos angle)."""
    if not np.isfinite(kappa):
        return mu.copy()
    u = rng.random()
    # w = cos(angle to mu); exact inverse CDF for the 2-sphere
    w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    w = min(1.0, max(-1.0, w))
    # orthonormal frame around mu
    helper = np.array([1.0, 0.0, 0.0]) if abs(mu[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(mu, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(mu, e1)
    phi = rng.random() * 2.0 * np.pi
    s = np.sqrt(max(0.0, 1.0 - w * w))
    out = w * mu + s * (np.cos(phi) * e1 + np.sin(phi) * e2)
    return out / np.linalg.norm(out)


def synth_gaze(scene, attractors: list, n: int, observer_volume: Aabb,
               noise_kappa: float = 200.0, seed=0) -> list:
    """Synthesize head-pose rays: origins uniform in a volume, directions
    aimed at weighted attractor points and blurred by a vMF draw.

    ``attractors`` is a list of (point, weight) pairs.  When a scene is
    given, the observer volume and attractors must lie inside its bounds.
    ``noise_kappa`` of inf disables the blur.  Origins that land exactly
    on their target are redrawn.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if scene is not None:
        box = scene.aabb
        if not (box.contains(observer_volume.lo) and box.contains(observer_volume.hi)):
            raise ValueError("observer volume extends outside the scene bounds")
        for p, _ in attractors:
            if not box.contains(np.asarray(p, dtype=np.float64)):
                raise ValueError(f"attractor {p} lies outside the scene bounds")
    points = np.array([np.asarray(p, dtype=np.float64) for p, _ in attractors])
    weights = np.array([float(w) for _, w in attractors])
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("attractor weights must be >= 0 and not all zero")
    weights = weights / weights.sum()

    rng = np.random.default_rng(seed)
    rays = []
    while len(rays) < n:
        origin = observer_volume.lo + rng.random(3) * observer_volume.size
        target = points[rng.choice(len(points), p=weights)]
        to_target = target - origin
        dist = np.linalg.norm(to_target)
        if dist < 1e-9:
            continue  # degenerate draw, retry
        direction = _sample_vmf(rng, to_target / dist, noise_kappa)
        rays.append(GazeRay(Vec3.from_array(origin), direction))
    return rays


# ---------------------------------------------------------------------------
# file formats


GAZE_CSV_HEADER = "x,y,z,dx,dy,dz"


def save_gaze_rays(rays: list, path) -> None:
    lines = [GAZE_CSV_HEADER]
    for r in rays:
        p = r.position.as_array()
        d = r.direction
        lines.append(",".join(f"{v:.9g}" for v in (*p, *d)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_gaze_rays(path, transform: WorldTransform | None = None) -> list:
    """Parse the gaze CSV; positions/directions are mapped through
    ``transform`` (alignment into scene coordinates) when given.

    Malformed rows raise with their line number.  Rows whose direction is
    not unit to within 1e-3 are skipped and counted in a warning.
    """
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != GAZE_CSV_HEADER:
        raise DataFormatError(f"{path}: first line must be '{GAZE_CSV_HEADER}'")
    rays = []
    rejected = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DataFormatError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as e:
            raise DataFormatError(f"{path}:{lineno}: {e}") from e
        pos = np.array(vals[0:3])
        d = np.array(vals[3:6])
        norm = np.linalg.norm(d)
        if abs(norm - 1.0) > 1e-3:
            rejected.append(lineno)
            continue
        d = d / norm
        if transform is not None:
            pos = transform.transform_point(pos)
            d = transform.transform_dir(d)
        rays.append(GazeRay(Vec3.from_array(pos), d))
    if rejected:
        log.warning("%s: skipped %d rows with non-unit directions (lines %s)",
                    path, len(rejected), rejected[:10])
    return rays


def save_probe_set(probes: ProbeSet, path) -> None:
    """Magic + JSON header + per-probe float32 blocks (center, then rays)."""
    if len(probes) > 0:
        kappa = probes.probes[0].kernel.kappa
    else:
        kappa = DEFAULT_KAPPA
    header = {
        "placement": probes.placement.to_json(),
        "kappa": kappa,
        "probe_count": len(probes),
        "ray_counts": [p.ray_count for p in probes.probes],
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PROBE_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for p in probes.probes:
            f.write(p.center.as_array().astype("<f4").tobytes())
            f.write(np.ascontiguousarray(p.rays, dtype="<f4").tobytes())


def load_probe_set(path) -> ProbeSet:
    raw = Path(path).read_bytes()
    if raw[:8] != PROBE_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a probe set file")
    (hlen,) = struct.unpack_from("<I", raw, 8)
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataFormatError(f"{path}: bad header: {e}") from e
    kernel = VmfKernel(float(header["kappa"]))
    placement = PlacementRecord.from_json(header["placement"])
    offset = 12 + hlen
    probes = []
    for n_rays in header["ray_counts"]:
        need = (3 + 3 * n_rays) * 4
        if len(raw) - offset < need:
            raise DataFormatError(f"{path}: truncated probe block")
        block = np.frombuffer(raw, dtype="<f4", count=3 + 3 * n_rays, offset=offset)
        offset += need
        center = Vec3.from_array(block[:3].astype(np.float64))
        rays = block[3:].astype(np.float64).reshape(n_rays, 3)
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)  # restore unit norm after f32
        probes.append(GazeProbe(center, rays, kernel))
    if len(probes) != header["probe_count"]:
        raise DataFormatError(f"{path}: probe count mismatch")
    return ProbeSet(tuple(probes), placement)
