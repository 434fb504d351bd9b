"""Geometry and coordinate primitives shared by every other module.

Conventions fixed here (and only here):
  * spherical angles: theta is the polar angle from +z in [0, pi],
    phi the azimuth from +x in [-pi, pi)
  * camera rays use pixel centers, i.e. pixel (px, py) maps to the
    continuous point (px + 0.5, py + 0.5)
  * world transforms are similarity transforms (rigid + uniform scale)

All types are immutable values and safe to share between threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ConfigurationError


def _check_finite(name: str, *values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v!r}")


@dataclass(frozen=True)
class Vec3:
    """A point or displacement in scene units (meters)."""

    x: float
    y: float
    z: float

    def __post_init__(self) -> None:
        _check_finite("Vec3 component", self.x, self.y, self.z)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Vec3":
        a = np.asarray(a, dtype=np.float64)
        return Vec3(float(a[0]), float(a[1]), float(a[2]))

    def __add__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x + other.x, self.y + other.y, self.z + other.z)

    def __sub__(self, other: "Vec3") -> "Vec3":
        return Vec3(self.x - other.x, self.y - other.y, self.z - other.z)

    def scaled(self, s: float) -> "Vec3":
        return Vec3(self.x * s, self.y * s, self.z * s)

    def norm(self) -> float:
        return math.sqrt(self.x * self.x + self.y * self.y + self.z * self.z)


def dir_from_spherical(theta: float, phi: float) -> np.ndarray:
    """Unit vector for polar angle ``theta`` and azimuth ``phi``.

    Returns (sin t cos p, sin t sin p, cos t); theta must lie in [0, pi].
    """
    if not (0.0 <= theta <= math.pi):
        raise ValueError(f"theta must be in [0, pi], got {theta}")
    st = math.sin(theta)
    return np.array([st * math.cos(phi), st * math.sin(phi), math.cos(theta)], dtype=np.float64)


def spherical_from_dir(v) -> tuple[float, float]:
    """Inverse of :func:`dir_from_spherical` for a unit vector.

    At the poles (|z| = 1) the azimuth is conventionally 0.
    """
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > 1e-6:
        raise ValueError(f"expected a unit vector, got norm {n}")
    z = min(1.0, max(-1.0, float(v[2])))
    theta = math.acos(z)
    if abs(z) >= 1.0 or (v[0] == 0.0 and v[1] == 0.0):
        return theta, 0.0
    return theta, math.atan2(float(v[1]), float(v[0]))


def normalized(v) -> np.ndarray:
    """Unit-length copy of ``v``; rejects near-zero input."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise ValueError("cannot normalize a near-zero vector")
    return v / n


@dataclass(frozen=True)
class UnitDir:
    """A direction on the unit sphere, stored as angles plus a cached vector."""

    theta: float
    phi: float
    vec: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "vec", dir_from_spherical(self.theta, self.phi))

    @staticmethod
    def from_vector(v) -> "UnitDir":
        theta, phi = spherical_from_dir(v)
        return UnitDir(theta, phi)


@dataclass(frozen=True)
class Ray:
    """Half-line ``origin + t * dir.vec`` for t >= 0."""

    origin: Vec3
    dir: UnitDir

    def point_at(self, t: float) -> Vec3:
        return Vec3.from_array(self.origin.as_array() + t * self.dir.vec)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with an orthonormal (right, up, forward) basis.

    ``fov_y`` is the full vertical field of view in radians; the horizontal
    field follows from the aspect ratio.
    """

    position: Vec3
    right: np.ndarray
    up: np.ndarray
    forward: np.ndarray
    fov_y: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (0.0 < self.fov_y < math.pi):
            raise ValueError(f"fov_y must be in (0, pi), got {self.fov_y}")
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")
        basis = np.stack([np.asarray(self.right, dtype=np.float64),
                          np.asarray(self.up, dtype=np.float64),
                          np.asarray(self.forward, dtype=np.float64)])
        if not np.allclose(basis @ basis.T, np.eye(3), atol=1e-6):
            raise ValueError("camera basis must be orthonormal")
        object.__setattr__(self, "right", basis[0])
        object.__setattr__(self, "up", basis[1])
        object.__setattr__(self, "forward", basis[2])

    @staticmethod
    def look_at(position: Vec3, target: Vec3, up_hint=(0.0, 0.0, 1.0), *,
                fov_y: float, width: int, height: int) -> "Camera":
        """Camera at ``position`` looking toward ``target``."""
        fwd = normalized(target.as_array() - position.as_array())
        hint = np.asarray(up_hint, dtype=np.float64)
        right = np.cross(fwd, hint)
        if np.linalg.norm(right) < 1e-9:
            # forward parallel to the up hint; pick any perpendicular axis
            hint = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
            right = np.cross(fwd, hint)
        right = normalized(right)
        up = np.cross(right, fwd)
        return Camera(position, right, up, fwd, fov_y, width, height)


def camera_ray(cam: Camera, px: int, py: int) -> Ray:
    """Ray through the center of pixel (px, py); py grows downward."""
    if not (0 <= px < cam.width and 0 <= py < cam.height):
        raise ValueError(f"pixel ({px}, {py}) outside {cam.width}x{cam.height} sensor")
    d = camera_ray_dirs(cam, np.array([px]), np.array([py]))[0]
    return Ray(cam.position, UnitDir.from_vector(d))


def camera_ray_dirs(cam: Camera, px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """Vectorized unit ray directions for integer pixel coordinates."""
    tan_half = math.tan(cam.fov_y / 2.0)
    aspect = cam.width / cam.height
    # NDC in [-1, 1] with the +0.5 pixel-center offset; y flipped so the
    # image's top row looks up.
    sx = ((px + 0.5) / cam.width * 2.0 - 1.0) * tan_half * aspect
    sy = (1.0 - (py + 0.5) / cam.height * 2.0) * tan_half
    d = (cam.forward[None, :]
         + sx[:, None] * cam.right[None, :]
         + sy[:, None] * cam.up[None, :])
    return d / np.linalg.norm(d, axis=1, keepdims=True)


class WorldTransform:
    """A 4x4 similarity transform (rotation + uniform scale + translation).

    Maps between the gaze-data coordinate frame and the scene frame; which
    way it points is up to the caller, and :meth:`inverse` gives the other
    direction.
    """

    def __init__(self, matrix) -> None:
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape == (16,):
            m = m.reshape(4, 4)
        if m.shape != (4, 4):
            raise ConfigurationError(f"world transform must be 4x4, got shape {m.shape}")
        a = m[:3, :3]
        det = float(np.linalg.det(a))
        if abs(det) < 1e-12:
            raise ConfigurationError("world transform is singular")
        scale = abs(det) ** (1.0 / 3.0)
        # uniform-scale rotation check: A^T A == scale^2 * I
        if not np.allclose(a.T @ a, (scale ** 2) * np.eye(3), atol=1e-6 * scale ** 2):
            raise ConfigurationError("world transform must be rigid + uniform scale")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise ConfigurationError("world transform bottom row must be [0, 0, 0, 1]")
        self.matrix = m
        self.scale = scale

    @staticmethod
    def identity() -> "WorldTransform":
        return WorldTransform(np.eye(4))

    @staticmethod
    def from_flat(values) -> "WorldTransform":
        """Row-major 16-number array, as stored in config files."""
        values = list(values)
        if len(values) != 16:
            raise ConfigurationError(f"world transform needs 16 numbers, got {len(values)}")
        return WorldTransform(np.asarray(values, dtype=np.float64).reshape(4, 4))

    def inverse(self) -> "WorldTransform":
        return WorldTransform(np.linalg.inv(self.matrix))

    def transform_point(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return self.matrix[:3, :3] @ p + self.matrix[:3, 3]

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def transform_dir(self, d) -> np.ndarray:
        """Rotate a direction; translation and scale drop out, output is unit."""
        d = np.asarray(d, dtype=np.float64)
        return normalized(self.matrix[:3, :3] @ d)

    def transform_dirs(self, dirs: np.ndarray) -> np.ndarray:
        out = np.asarray(dirs, dtype=np.float64) @ self.matrix[:3, :3].T
        return out / np.linalg.norm(out, axis=1, keepdims=True)


def transform_point(t: WorldTransform, p) -> np.ndarray:
    return t.transform_point(p)


def transform_dir(t: WorldTransform, d) -> np.ndarray:
    return t.transform_dir(d)
