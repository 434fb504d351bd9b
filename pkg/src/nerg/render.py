"""Full frame pipeline: color + depth, observer-decoupled gaze, occlusion.

Per pixel: volume-render the camera ray to (color, depth, opacity), place
the visible surface point p_d at that depth, then evaluate the gaze model
for an observer that is either the camera itself (coupled) or a free point
p_o.  A decoupled observer depth-tests p_d: the expected depth is
d_o* = |p_o - p_d|, the evaluated depth d_o comes from marching the
density field from p_o toward p_d, and visibility falls off linearly over
d_f once d_o undercuts d_o* beyond a tolerance.  Background pixels carry
zero gaze.
"""

from __future__ import annotations

import io
import json
import struct
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import ConfigurationError, DataFormatError
from .core import Camera, Vec3, camera_ray_dirs
from .field import (Aabb, IntegratorConfig, SceneField, render_depth_batch,
                    volume_render_batch)
from .nerg import NergModel, predict_gaze_batch

FRAME_MAGIC = b"NERGFRM1"
_CHUNK = 65536  # pixels per batch; caps peak memory at (chunk x steps) arrays


@dataclass(frozen=True)
class ObserverState:
    """Whose eyes the gaze is evaluated through."""

    position: Vec3
    coupled: bool = True

    @staticmethod
    def coupled_to_camera() -> "ObserverState":
        return ObserverState(Vec3(0.0, 0.0, 0.0), coupled=True)

    @staticmethod
    def at(p) -> "ObserverState":
        v = p if isinstance(p, Vec3) else Vec3.from_array(np.asarray(p, dtype=np.float64))
        return ObserverState(v, coupled=False)


@dataclass(frozen=True)
class OcclusionConfig:
    """Depth-tested gaze shadowing with a linear penumbra.

    ``eps`` of None means "resolve to two integrator step sizes at render
    time", absorbing quadrature noise in the depth estimates.
    """

    enabled: bool = True
    d_f: float = 0.05
    eps: float | None = None

    def __post_init__(self) -> None:
        if not self.d_f > 0:
            raise ConfigurationError(f"fall-off d_f must be > 0, got {self.d_f}")
        if self.eps is not None and self.eps < 0:
            raise ConfigurationError(f"depth tolerance must be >= 0, got {self.eps}")

    def resolve_eps(self, integ: IntegratorConfig) -> "OcclusionConfig":
        if self.eps is not None:
            return self
        return replace(self, eps=2.0 * integ.step_size)


@dataclass(frozen=True)
class GazeFrame:
    width: int
    height: int
    rgb: np.ndarray         # (h, w, 3) in [0, 1]
    depth: np.ndarray       # (h, w)
    gaze: np.ndarray        # (h, w), >= 0
    visibility: np.ndarray  # (h, w), in [0, 1]

    def __post_init__(self) -> None:
        hw = (self.height, self.width)
        if (self.rgb.shape != hw + (3,) or self.depth.shape != hw
                or self.gaze.shape != hw or self.visibility.shape != hw):
            raise ValueError("frame buffers disagree on dimensions")
        if np.any(self.gaze < 0) or not np.all(np.isfinite(self.gaze)):
            raise ValueError("gaze buffer must be finite and >= 0")
        if np.any(self.visibility < 0) or np.any(self.visibility > 1):
            raise ValueError("visibility buffer must lie in [0, 1]")


def visibility_factor(d_o: float, d_o_star: float, cfg: OcclusionConfig) -> float:
    """clamp(1 - (d_o* - d_o - eps) / d_f, 0, 1): 1 when the evaluated depth
    reaches the expected depth (no blocker), 0 once the blocker leads by
    d_f + eps, linear in between."""
    if cfg.eps is None:
        raise ConfigurationError("eps unresolved; call resolve_eps(integrator) first")
    if d_o < 0 or d_o_star < 0:
        raise ValueError("depths must be >= 0")
    return float(_visibility(np.asarray([d_o]), np.asarray([d_o_star]), cfg)[0])


def _visibility(d_o: np.ndarray, d_o_star: np.ndarray, cfg: OcclusionConfig) -> np.ndarray:
    return np.clip(1.0 - (d_o_star - d_o - cfg.eps) / cfg.d_f, 0.0, 1.0)


def render_frame(field: SceneField, model: NergModel, cam: Camera,
                 obs: ObserverState, integ: IntegratorConfig,
                 occ: OcclusionConfig) -> GazeFrame:
    """Render color, depth, gaze density and observer visibility.

    A coupled observer never runs the occlusion pass (the two depths are
    the same ray), so its output is bit-identical with occlusion on or off.
    An observer placed exactly at the camera position IS the coupled case:
    expected and evaluated depth coincide along the shared ray, so the
    depth test is skipped rather than re-derived numerically.  A decoupled
    observer elsewhere must sit inside the scene bounds.
    """
    if not obs.coupled and np.array_equal(obs.position.as_array(), cam.position.as_array()):
        obs = ObserverState(cam.position, coupled=True)
    if not obs.coupled and not bool(field.aabb.contains(obs.position.as_array())):
        raise ValueError("decoupled observer must be inside the scene aabb")
    occ = occ.resolve_eps(integ)

    w, h = cam.width, cam.height
    px, py = np.meshgrid(np.arange(w), np.arange(h))
    all_dirs = camera_ray_dirs(cam, px.ravel(), py.ravel())
    cam_pos = cam.position.as_array()
    n = all_dirs.shape[0]

    rgb = np.zeros((n, 3))
    depth = np.zeros(n)
    gaze = np.zeros(n)
    vis = np.ones(n)

    obs_pos = cam_pos if obs.coupled else obs.position.as_array()

    for start in range(0, n, _CHUNK):
        sl = slice(start, min(start + _CHUNK, n))
        dirs = all_dirs[sl]
        m = dirs.shape[0]
        origins = np.broadcast_to(cam_pos, (m, 3))
        color, opacity, d, covered = volume_render_batch(field, origins, dirs, integ)
        rgb[sl] = color
        depth[sl] = d

        if not np.any(covered):
            continue
        p_d = origins + d[:, None] * dirs
        p_o = np.broadcast_to(obs_pos, (m, 3))

        v = np.ones(m)
        valid = covered.copy()
        if not obs.coupled:
            seg = p_d - p_o
            d_star = np.linalg.norm(seg, axis=1)
            valid &= d_star > 1e-9  # coincident surface point: flagged, g = 0
            if occ.enabled and np.any(valid):
                rows = np.flatnonzero(valid)
                obs_dirs = seg[rows] / d_star[rows, None]
                far = d_star[rows] + occ.d_f  # no blocker beyond p_d matters
                d_o, _, _ = render_depth_batch(field, p_o[rows], obs_dirs,
                                               integ, near=np.zeros(rows.size), far=far)
                v[rows] = _visibility(d_o, d_star[rows], occ)
            v[covered & ~valid] = 0.0

        if np.any(valid):
            rows = np.flatnonzero(valid)
            g = predict_gaze_batch(model, p_d[rows], p_o[rows])
            gaze[sl][rows] = np.maximum(g, 0.0) * v[rows]
        vis_chunk = np.ones(m)
        vis_chunk[covered] = v[covered]
        vis[sl] = vis_chunk

    shape = (h, w)
    return GazeFrame(w, h, rgb.reshape(shape + (3,)), depth.reshape(shape),
                     gaze.reshape(shape), vis.reshape(shape))


# ---------------------------------------------------------------------------
# colorization and image output

# Polynomial fit of the viridis colormap (degree 6 per channel); endpoints
# are the fit's own t=0 and t=1 values.
_VIRIDIS_COEFFS = np.array([
    [0.2777273272234177, 0.005407344544966578, 0.3340998053353061],
    [0.1050930431085774, 1.404613529898575, 1.384590162594685],
    [-0.3308618287255563, 0.214847559468213, 0.09509516302823659],
    [-4.634230498983486, -5.799100973351585, -19.33244095627987],
    [6.228269936347081, 14.17993336680509, 56.69055260068105],
    [4.776384997670288, -13.74514537774601, -65.35303263337234],
    [-5.435455855934631, 4.645852612178535, 26.3124352495832],
])


def colormap_lookup(t: np.ndarray, name: str = "viridis") -> np.ndarray:
    """Map t in [0, 1] to rgb rows; supported maps: viridis, gray."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    if name == "gray":
        return np.repeat(t[..., None], 3, axis=-1)
    if name != "viridis":
        raise ConfigurationError(f"unknown colormap {name!r}")
    out = np.zeros(t.shape + (3,))
    for c in reversed(_VIRIDIS_COEFFS):
        out = out * t[..., None] + c
    return np.clip(out, 0.0, 1.0)


def colorize(frame: GazeFrame, colormap: str = "viridis", alpha: float = 0.6,
             g_max: float | None = None) -> np.ndarray:
    """Blend a normalized gaze heatmap over the rendered color.

    ``g_max`` fixes the normalization range [0, g_max] so frames stay
    comparable across observer moves; None falls back to this frame's
    min-max.  An all-zero gaze buffer returns the color image untouched.
    """
    if not np.all(np.isfinite(frame.gaze)):
        raise ValueError("gaze buffer contains non-finite values")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigurationError(f"overlay alpha must be in [0, 1], got {alpha}")
    g = frame.gaze
    if alpha == 0.0 or not np.any(g > 0):
        return frame.rgb.copy()
    if g_max is not None:
        if g_max <= 0:
            raise ConfigurationError(f"g_max must be > 0, got {g_max}")
        t = np.clip(g / g_max, 0.0, 1.0)
    else:
        lo, hi = float(g.min()), float(g.max())
        if hi - lo <= 0:
            t = (g > 0).astype(np.float64)
        else:
            t = (g - lo) / (hi - lo)
    overlay = colormap_lookup(t, colormap)
    return (1.0 - alpha) * frame.rgb + alpha * overlay


def png_bytes(rgb: np.ndarray) -> bytes:
    """Quantize a float [0, 1] image to 8-bit and encode it as PNG."""
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    img = Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def save_png(rgb: np.ndarray, path) -> None:
    Path(path).write_bytes(png_bytes(rgb))


def frame_to_bytes(frame: GazeFrame) -> bytes:
    """Raw float32 planes in order rgb, depth, gaze, visibility."""
    parts = [FRAME_MAGIC, struct.pack("<2I", frame.width, frame.height)]
    for plane in (frame.rgb, frame.depth, frame.gaze, frame.visibility):
        parts.append(np.ascontiguousarray(plane, dtype="<f4").tobytes())
    return b"".join(parts)


def save_frame_buffers(frame: GazeFrame, path) -> None:
    Path(path).write_bytes(frame_to_bytes(frame))


def load_frame_buffers(path) -> GazeFrame:
    raw = Path(path).read_bytes()
    if raw[:8] != FRAME_MAGIC:
        raise DataFormatError(f"{path}: bad magic, not a frame buffer file")
    w, h = struct.unpack_from("<2I", raw, 8)
    counts = [h * w * 3, h * w, h * w, h * w]
    offset = 16
    planes = []
    for count in counts:
        if len(raw) - offset < count * 4:
            raise DataFormatError(f"{path}: truncated frame payload")
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        planes.append(data.astype(np.float64))
        offset += count * 4
    return GazeFrame(w, h, planes[0].reshape(h, w, 3), planes[1].reshape(h, w),
                     planes[2].reshape(h, w), planes[3].reshape(h, w))


# ---------------------------------------------------------------------------
# benchmarking


def bench_cameras(aabb: Aabb, n_cams: int, seed: int, width: int, height: int,
                  fov_y: float = np.deg2rad(60.0)) -> list:
    """Seeded camera poses: positions uniform in the (slightly shrunk)
    bounds, all aimed at the scene center."""
    rng = np.random.default_rng(seed)
    margin = 0.05 * aabb.size
    lo, hi = aabb.lo + margin, aabb.hi - margin
    center = aabb.center
    cams = []
    while len(cams) < n_cams:
        pos = lo + rng.random(3) * (hi - lo)
        if np.linalg.norm(pos - center) < 1e-6:
            continue  # degenerate aim, redraw
        cams.append(Camera.look_at(Vec3.from_array(pos), Vec3.from_array(center),
                                   fov_y=fov_y, width=width, height=height))
    return cams


def bench_frame_time(field: SceneField, model: NergModel,
                     resolution: tuple = (1280, 720), n_cams: int = 32,
                     seed: int = 0, integ: IntegratorConfig | None = None,
                     occ: OcclusionConfig | None = None) -> dict:
    """Wall-clock full-frame times over seeded shared camera poses.

    The camera set depends only on (resolution, n_cams, seed, scene bounds),
    so reports for different models over the same inputs share poses.
    """
    if n_cams < 1:
        raise ValueError(f"need n_cams >= 1, got {n_cams}")
    width, height = int(resolution[0]), int(resolution[1])
    if integ is None:
        integ = IntegratorConfig()
    if occ is None:
        occ = OcclusionConfig()
    cams = bench_cameras(field.aabb, n_cams, seed, width, height)
    obs = ObserverState.coupled_to_camera()
    times_ms = []
    for cam in cams:
        t0 = time.perf_counter()
        render_frame(field, model, cam, obs, integ, occ)
        times_ms.append((time.perf_counter() - t0) * 1000.0)
    arr = np.asarray(times_ms)
    return {
        "resolution": [width, height],
        "n_cams": n_cams,
        "seed": seed,
        "variant": model.variant,
        "per_camera_ms": [round(t, 3) for t in times_ms],
        "mean_ms": round(float(arr.mean()), 3),
        "p50_ms": round(float(np.percentile(arr, 50)), 3),
        "p95_ms": round(float(np.percentile(arr, 95)), 3),
    }


def save_bench_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n")
