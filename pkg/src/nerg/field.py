"""Queryable volumetric density + color fields and ray-marched rendering.

A :class:`SceneField` answers point queries with (sigma, rgb); rendering
integrates those along rays with the usual discrete quadrature

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    w_i     = T_i * alpha_i

yielding color, opacity and an opacity-normalized expected termination
depth.  A density-only pass (:func:`render_depth`) shares the exact same
arithmetic for depth and opacity while skipping all color work.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ConfigurationError, DataFormatError
from .core import Ray

VOXEL_MAGIC = b"NERGVOX1"


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned bounding box, inclusive on both ends."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("aabb bounds must be 3-vectors")
        if np.any(hi <= lo):
            raise ValueError(f"aabb must have positive extent, got {lo} .. {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        m = (pts[..., 0] >= self.lo[0]) & (pts[..., 0] <= self.hi[0])
        m &= (pts[..., 1] >= self.lo[1]) & (pts[..., 1] <= self.hi[1])
        m &= (pts[..., 2] >= self.lo[2]) & (pts[..., 2] <= self.hi[2])
        return m

    def clamp(self, p: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(p, dtype=np.float64), self.lo, self.hi)

    def to_json(self) -> dict:
        return {"min": self.lo.tolist(), "max": self.hi.tolist()}

    @staticmethod
    def from_json(obj: dict) -> "Aabb":
        return Aabb(np.asarray(obj["min"], dtype=np.float64),
                    np.asarray(obj["max"], dtype=np.float64))


# ---------------------------------------------------------------------------
# primitives


def _validate_color(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (3,) or np.any(c < 0) or np.any(c > 1):
        raise ValueError(f"color must be 3 components in [0, 1], got {c}")
    return c


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    sigma: float
    albedo: np.ndarray

    def __post_init__(self) -> None:
        if self.radius <= 0 or self.sigma < 0:
            raise ValueError("sphere needs radius > 0 and sigma >= 0")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "albedo", _validate_color(self.albedo))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.center
        return np.einsum("...i,...i->...", d, d) <= self.radius ** 2

    def bounds(self) -> Aabb:
        r = self.radius
        return Aabb(self.center - r, self.center + r)

    def to_json(self) -> dict:
        return {"kind": "sphere", "center": self.center.tolist(), "radius": self.radius,
                "sigma": self.sigma, "albedo": self.albedo.tolist()}


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray
    sigma: float
    albedo: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(hi <= lo) or self.sigma < 0:
            raise ValueError("box needs hi > lo per axis and sigma >= 0")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "albedo", _validate_color(self.albedo))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        m = (pts[..., 0] >= self.lo[0]) & (pts[..., 0] <= self.hi[0])
        m &= (pts[..., 1] >= self.lo[1]) & (pts[..., 1] <= self.hi[1])
        m &= (pts[..., 2] >= self.lo[2]) & (pts[..., 2] <= self.hi[2])
        return m

    def bounds(self) -> Aabb:
        return Aabb(self.lo, self.hi)

    def to_json(self) -> dict:
        return {"kind": "box", "min": self.lo.tolist(), "max": self.hi.tolist(),
                "sigma": self.sigma, "albedo": self.albedo.tolist()}


@dataclass(frozen=True)
class Slab:
    """Region bounded along one axis and unbounded along the other two."""

    axis: int
    lo: float
    hi: float
    sigma: float
    albedo: np.ndarray

    def __post_init__(self) -> None:
        if self.axis not in (0, 1, 2):
            raise ValueError("slab axis must be 0, 1 or 2")
        if self.hi <= self.lo or self.sigma < 0:
            raise ValueError("slab needs hi > lo and sigma >= 0")
        object.__setattr__(self, "albedo", _validate_color(self.albedo))

    def contains(self, pts: np.ndarray) -> np.ndarray:
        c = pts[..., self.axis]
        return (c >= self.lo) & (c <= self.hi)

    def bounds(self) -> Aabb | None:
        return None  # unbounded; clipped by the scene aabb

    def to_json(self) -> dict:
        return {"kind": "slab", "axis": self.axis, "min": self.lo, "max": self.hi,
                "sigma": self.sigma, "albedo": self.albedo.tolist()}


Primitive = Sphere | Box | Slab


def _primitive_from_json(obj: dict) -> Primitive:
    kind = obj.get("kind")
    if kind == "sphere":
        return Sphere(np.asarray(obj["center"]), float(obj["radius"]),
                      float(obj["sigma"]), np.asarray(obj["albedo"]))
    if kind == "box":
        return Box(np.asarray(obj["min"]), np.asarray(obj["max"]),
                   float(obj["sigma"]), np.asarray(obj["albedo"]))
    if kind == "slab":
        return Slab(int(obj["axis"]), float(obj["min"]), float(obj["max"]),
                    float(obj["sigma"]), np.asarray(obj["albedo"]))
    raise DataFormatError(f"unknown primitive kind {kind!r}")


# ---------------------------------------------------------------------------
# scene fields


class SceneField:
    """Interface: point queries returning density and color, plus bounds."""

    aabb: Aabb

    def query(self, pts: np.ndarray, dirs: np.ndarray | None = None):
        """(sigma, rgb) at ``pts``; ``dirs`` is accepted for view-dependent
        fields but ignored by the constant-albedo implementations here.

        ``pts`` has shape (..., 3); returns sigma (...,) and rgb (..., 3).
        Points outside the aabb have sigma 0.
        """
        raise NotImplementedError


class AnalyticScene(SceneField):
    """Union of constant-density primitives over a background color.

    Overlapping primitives add their densities; the color at a point is the
    density-weighted mean of the overlapping albedos.
    """

    def __init__(self, primitives: list, background=(0.0, 0.0, 0.0),
                 aabb: Aabb | None = None) -> None:
        self.primitives = list(primitives)
        self.background = _validate_color(background)
        self.aabb = aabb if aabb is not None else self._default_aabb()

    def _default_aabb(self) -> Aabb:
        bounded = [p.bounds() for p in self.primitives if p.bounds() is not None]
        if not bounded:
            return Aabb(np.full(3, -1.0), np.full(3, 1.0))
        lo = np.min([b.lo for b in bounded], axis=0)
        hi = np.max([b.hi for b in bounded], axis=0)
        # slabs extend the union along their bounded axis only
        for p in self.primitives:
            if isinstance(p, Slab):
                lo[p.axis] = min(lo[p.axis], p.lo)
                hi[p.axis] = max(hi[p.axis], p.hi)
        return Aabb(lo, hi)

    def query(self, pts: np.ndarray, dirs: np.ndarray | None = None):
        pts = np.asarray(pts, dtype=np.float64)
        shape = pts.shape[:-1]
        flat = pts.reshape(-1, 3)
        inside_box = self.aabb.contains(flat)
        sigma = np.zeros(flat.shape[0], dtype=np.float64)
        for prim in self.primitives:
            sigma += prim.sigma * (prim.contains(flat) & inside_box)
        rgb = np.zeros((flat.shape[0], 3), dtype=np.float64)
        occupied = sigma > 0
        if np.any(occupied):
            # colors only matter where density exists (usually a small subset)
            sub = flat[occupied]
            weighted = np.zeros((sub.shape[0], 3), dtype=np.float64)
            for prim in self.primitives:
                part = prim.sigma * prim.contains(sub)
                weighted += part[:, None] * prim.albedo
            rgb[occupied] = weighted / sigma[occupied, None]
        return sigma.reshape(shape), rgb.reshape(shape + (3,))

    def query_sigma(self, pts: np.ndarray) -> np.ndarray:
        """Density only; same accumulation (and hence identical values) as
        :meth:`query`, skipping all color work."""
        pts = np.asarray(pts, dtype=np.float64)
        shape = pts.shape[:-1]
        flat = pts.reshape(-1, 3)
        inside_box = self.aabb.contains(flat)
        sigma = np.zeros(flat.shape[0], dtype=np.float64)
        for prim in self.primitives:
            sigma += prim.sigma * (prim.contains(flat) & inside_box)
        return sigma.reshape(shape)

    def to_json(self) -> dict:
        return {"background": self.background.tolist(),
                "aabb": self.aabb.to_json(),
                "primitives": [p.to_json() for p in self.primitives]}

    @staticmethod
    def from_json(obj: dict) -> "AnalyticScene":
        prims = [_primitive_from_json(p) for p in obj.get("primitives", [])]
        aabb = Aabb.from_json(obj["aabb"]) if "aabb" in obj else None
        return AnalyticScene(prims, obj.get("background", (0.0, 0.0, 0.0)), aabb)


def save_scene(scene: AnalyticScene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_json(), indent=2) + "\n")


def load_scene(path) -> AnalyticScene:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"scene file {path}: {e}") from e
    return AnalyticScene.from_json(obj)


class VoxelGrid(SceneField):
    """Regular grid of (sigma, rgb) cells with optional trilinear lookups."""

    def __init__(self, resolution, aabb: Aabb, sigma: np.ndarray, rgb: np.ndarray,
                 trilinear: bool = True) -> None:
        res = tuple(int(r) for r in resolution)
        if len(res) != 3 or min(res) < 2:
            raise ValueError(f"resolution must be >= 2 per axis, got {res}")
        sigma = np.ascontiguousarray(sigma, dtype=np.float32)
        rgb = np.ascontiguousarray(rgb, dtype=np.float32)
        if sigma.shape != res or rgb.shape != res + (3,):
            raise ValueError("sigma/rgb shapes do not match the resolution")
        if np.any(sigma < 0) or np.any(rgb < 0) or np.any(rgb > 1):
            raise ValueError("stored sigma must be >= 0 and rgb in [0, 1]")
        self.resolution = res
        self.aabb = aabb
        self.sigma_grid = sigma
        self.rgb_grid = rgb
        self.trilinear = bool(trilinear)

    def _grid_coords(self, pts: np.ndarray) -> np.ndarray:
        # continuous cell-center coordinates: cell i is centered at i + 0.5
        rel = (pts - self.aabb.lo) / self.aabb.size
        return rel * np.asarray(self.resolution, dtype=np.float64) - 0.5

    def _gather(self, flat_inside: np.ndarray, want_rgb: bool):
        """Interpolated (sigma, rgb_or_None) for points known to be inside."""
        g = self._grid_coords(flat_inside)
        res = np.asarray(self.resolution)
        if not self.trilinear:
            i = np.clip(np.rint(g).astype(np.int64), 0, res - 1)
            s = self.sigma_grid[i[:, 0], i[:, 1], i[:, 2]].astype(np.float64)
            c = (self.rgb_grid[i[:, 0], i[:, 1], i[:, 2]].astype(np.float64)
                 if want_rgb else None)
            return s, c
        g = np.clip(g, 0.0, res - 1.0)
        i0 = np.minimum(np.floor(g).astype(np.int64), res - 2)
        f = g - i0
        s_acc = np.zeros(g.shape[0])
        c_acc = np.zeros((g.shape[0], 3)) if want_rgb else None
        for corner in range(8):
            off = np.array([(corner >> a) & 1 for a in range(3)])
            idx = i0 + off
            w = np.prod(np.where(off == 1, f, 1.0 - f), axis=1)
            s_acc += w * self.sigma_grid[idx[:, 0], idx[:, 1], idx[:, 2]]
            if want_rgb:
                c_acc += w[:, None] * self.rgb_grid[idx[:, 0], idx[:, 1], idx[:, 2]]
        return s_acc, c_acc

    def query(self, pts: np.ndarray, dirs: np.ndarray | None = None):
        pts = np.asarray(pts, dtype=np.float64)
        flat = pts.reshape(-1, 3)
        inside = self.aabb.contains(flat)
        sigma = np.zeros(flat.shape[0], dtype=np.float64)
        rgb = np.zeros((flat.shape[0], 3), dtype=np.float64)
        if np.any(inside):
            sigma[inside], rgb[inside] = self._gather(flat[inside], True)
        return sigma.reshape(pts.shape[:-1]), rgb.reshape(pts.shape[:-1] + (3,))

    def query_sigma(self, pts: np.ndarray) -> np.ndarray:
        """Density only; values identical to :meth:`query`'s sigma."""
        pts = np.asarray(pts, dtype=np.float64)
        flat = pts.reshape(-1, 3)
        inside = self.aabb.contains(flat)
        sigma = np.zeros(flat.shape[0], dtype=np.float64)
        if np.any(inside):
            sigma[inside] = self._gather(flat[inside], False)[0]
        return sigma.reshape(pts.shape[:-1])


def bake_voxel_grid(scene: AnalyticScene, resolution, trilinear: bool = True) -> VoxelGrid:
    """Sample ``scene`` at cell centers into a :class:`VoxelGrid`."""
    res = tuple(int(r) for r in resolution)
    if len(res) != 3 or min(res) < 2:
        raise ValueError(f"resolution must be >= 2 per axis, got {res}")
    aabb = scene.aabb
    axes = [aabb.lo[a] + (np.arange(res[a]) + 0.5) * aabb.size[a] / res[a] for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    sigma, rgb = scene.query(centers)
    return VoxelGrid(res, aabb,
                     sigma.reshape(res).astype(np.float32),
                     rgb.reshape(res + (3,)).astype(np.float32),
                     trilinear=trilinear)


def save_voxel_grid(grid: VoxelGrid, path) -> None:
    """Header (magic, resolution, aabb, flags) + float32 cells, x fastest."""
    nx, ny, nz = grid.resolution
    header = struct.pack("<3I6fI", nx, ny, nz,
                         *grid.aabb.lo.astype(np.float32), *grid.aabb.hi.astype(np.float32),
                         1 if grid.trilinear else 0)
    cells = np.concatenate([grid.sigma_grid[..., None], grid.rgb_grid], axis=-1)
    # stored z-slowest so that x varies fastest in the flat stream
    payload = np.ascontiguousarray(cells.transpose(2, 1, 0, 3), dtype="<f4")
    with open(path, "wb") as f:
        f.write(VOXEL_MAGIC)
        f.write(header)
        f.write(payload.tobytes())


def load_voxel_grid(path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if raw[:8] != VOXEL_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a voxel grid file")
    nx, ny, nz, *rest = struct.unpack_from("<3I6fI", raw, 8)
    lo, hi = np.array(rest[0:3]), np.array(rest[3:6])
    flags = rest[6]
    offset = 8 + struct.calcsize("<3I6fI")
    count = nx * ny * nz * 4
    if len(raw) - offset < count * 4:
        raise DataFormatError(f"{path}: truncated voxel payload")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    cells = data.reshape(nz, ny, nx, 4).transpose(2, 1, 0, 3)
    return VoxelGrid((nx, ny, nz), Aabb(lo, hi), cells[..., 0], cells[..., 1:4],
                     trilinear=bool(flags & 1))


# ---------------------------------------------------------------------------
# integration


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step quadrature settings for one ray march."""

    near: float = 0.0
    far: float = 10.0
    steps: int = 256
    early_stop: float = 1e-4      # stop adding weights once T drops below this
    opacity_threshold: float = 1e-2  # below this, depth falls back to background
    background_depth: float | None = None  # None means "use far"
    jitter: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.near < self.far):
            raise ConfigurationError(f"need 0 <= near < far, got {self.near}, {self.far}")
        if self.steps < 2:
            raise ConfigurationError(f"need >= 2 steps, got {self.steps}")
        if not (0.0 <= self.early_stop < 1.0):
            raise ConfigurationError("early_stop must be in [0, 1)")

    @property
    def step_size(self) -> float:
        return (self.far - self.near) / self.steps

    def sentinel_depth(self) -> float:
        return self.far if self.background_depth is None else self.background_depth


@dataclass(frozen=True)
class RenderSample:
    """Result of integrating one ray."""

    color: np.ndarray
    opacity: float
    depth: float


def _march(field_: SceneField, origins: np.ndarray, dirs: np.ndarray,
           cfg: IntegratorConfig, near: np.ndarray | None, far: np.ndarray | None,
           want_color: bool, rng: np.random.Generator | None):
    n = origins.shape[0]
    near_v = np.full(n, cfg.near) if near is None else np.asarray(near, dtype=np.float64)
    far_v = np.full(n, cfg.far) if far is None else np.asarray(far, dtype=np.float64)
    delta = (far_v - near_v) / cfg.steps  # (n,)

    offsets = np.arange(cfg.steps, dtype=np.float64) + 0.5
    t = near_v[:, None] + offsets[None, :] * delta[:, None]  # (n, steps) midpoints
    if cfg.jitter:
        if rng is None:
            rng = np.random.default_rng(0)
        t = t + (rng.random((n, cfg.steps)) - 0.5) * delta[:, None]

    pts = origins[:, None, :] + dirs[:, None, :] * t[..., None]
    if want_color:
        sigma, rgb = field_.query(pts, None)
    else:
        rgb = None
        query_sigma = getattr(field_, "query_sigma", None)
        if query_sigma is not None:
            sigma = query_sigma(pts)
        else:
            sigma, _ = field_.query(pts, None)

    alpha = -np.expm1(-sigma * delta[:, None])  # 1 - exp(-sigma*delta), (n, steps)
    one_minus = 1.0 - alpha
    trans = np.cumprod(np.concatenate([np.ones((n, 1)), one_minus], axis=1), axis=1)
    t_before = trans[:, :-1]  # T_i before segment i
    weights = t_before * alpha
    if cfg.early_stop > 0.0:
        weights = np.where(t_before >= cfg.early_stop, weights, 0.0)

    opacity = weights.sum(axis=1)
    t_final = 1.0 - opacity

    depth_num = (weights * t).sum(axis=1)
    covered = opacity > cfg.opacity_threshold
    # sentinel for rays that saw nothing: that ray's far plane by default
    sentinel = far_v if cfg.background_depth is None else np.full(n, cfg.background_depth)
    depth = np.where(covered, depth_num / np.where(covered, opacity, 1.0), sentinel)

    color = None
    if want_color:
        bg = getattr(field_, "background", np.zeros(3))
        color = (weights[..., None] * rgb).sum(axis=1) + t_final[:, None] * bg
    return color, opacity, depth, covered


def volume_render_batch(field_: SceneField, origins: np.ndarray, dirs: np.ndarray,
                        cfg: IntegratorConfig, *, near: np.ndarray | None = None,
                        far: np.ndarray | None = None,
                        rng: np.random.Generator | None = None):
    """Integrate many rays at once; returns (color, opacity, depth, covered)."""
    return _march(field_, np.asarray(origins, dtype=np.float64),
                  np.asarray(dirs, dtype=np.float64), cfg, near, far, True, rng)


def render_depth_batch(field_: SceneField, origins: np.ndarray, dirs: np.ndarray,
                       cfg: IntegratorConfig, *, near: np.ndarray | None = None,
                       far: np.ndarray | None = None,
                       rng: np.random.Generator | None = None):
    """Density-only march; depth and opacity match the full render exactly."""
    _, opacity, depth, covered = _march(field_, np.asarray(origins, dtype=np.float64),
                                        np.asarray(dirs, dtype=np.float64), cfg,
                                        near, far, False, rng)
    return depth, opacity, covered


def volume_render(field_: SceneField, ray: Ray, cfg: IntegratorConfig,
                  rng: np.random.Generator | None = None) -> RenderSample:
    """Integrate a single ray into color, opacity and depth."""
    color, opacity, depth, _ = volume_render_batch(
        field_, ray.origin.as_array()[None, :], ray.dir.vec[None, :], cfg, rng=rng)
    return RenderSample(color[0], float(opacity[0]), float(depth[0]))


def render_depth(field_: SceneField, ray: Ray, cfg: IntegratorConfig,
                 rng: np.random.Generator | None = None) -> tuple[float, float]:
    """Depth and opacity for a single ray, skipping all color work."""
    depth, opacity, _ = render_depth_batch(
        field_, ray.origin.as_array()[None, :], ray.dir.vec[None, :], cfg, rng=rng)
    return float(depth[0]), float(opacity[0])
