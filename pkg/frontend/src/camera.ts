/**
 * Camera math for the viewer: an orbit rig around a target point, and the
 * pixel projection used to draw the observer gizmo over the served frame.
 *
 * The projection mirrors the service renderer's pinhole convention exactly:
 * rays leave the center of each pixel (the +0.5 offset), the vertical field
 * of view is `fov_deg`, the horizontal field follows from the width/height
 * aspect ratio, and pixel y grows downward (image top row looks up).
 */

import type { CameraPose, Vec3 } from "./types.js";

export function add(a: Vec3, b: Vec3): Vec3 {
  return [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
}

export function sub(a: Vec3, b: Vec3): Vec3 {
  return [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
}

export function scale(a: Vec3, s: number): Vec3 {
  return [a[0] * s, a[1] * s, a[2] * s];
}

export function dot(a: Vec3, b: Vec3): number {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}

export function cross(a: Vec3, b: Vec3): Vec3 {
  return [
    a[1] * b[2] - a[2] * b[1],
    a[2] * b[0] - a[0] * b[2],
    a[0] * b[1] - a[1] * b[0],
  ];
}

export function norm(a: Vec3): number {
  return Math.hypot(a[0], a[1], a[2]);
}

export function normalize(a: Vec3): Vec3 {
  const n = norm(a);
  if (n < 1e-12) throw new Error("cannot normalize a zero vector");
  return scale(a, 1 / n);
}

export interface CameraBasis {
  right: Vec3;
  up: Vec3;
  forward: Vec3;
}

/**
 * Orthonormal basis of a camera at `position` looking toward `target`.
 * When forward is parallel to the up hint, an arbitrary perpendicular axis
 * stands in (same fallback the renderer uses).
 */
export function lookAtBasis(position: Vec3, target: Vec3, upHint: Vec3 = [0, 0, 1]): CameraBasis {
  const forward = normalize(sub(target, position));
  let right = cross(forward, upHint);
  if (norm(right) < 1e-9) {
    const hint: Vec3 = Math.abs(forward[0]) < 0.9 ? [1, 0, 0] : [0, 1, 0];
    right = cross(forward, hint);
  }
  right = normalize(right);
  const up = cross(right, forward);
  return { right, up, forward };
}

/** Unit direction of the ray through the center of pixel (px, py). */
export function pixelRay(pose: CameraPose, width: number, height: number, px: number, py: number): Vec3 {
  const { right, up, forward } = lookAtBasis(pose.position, pose.look_at, pose.up);
  const tanHalf = Math.tan((pose.fov_deg * Math.PI) / 360);
  const aspect = width / height;
  const sx = (((px + 0.5) / width) * 2 - 1) * tanHalf * aspect;
  const sy = (1 - ((py + 0.5) / height) * 2) * tanHalf;
  return normalize(add(forward, add(scale(right, sx), scale(up, sy))));
}

export interface ProjectedPoint {
  px: number;
  py: number;
  /** Distance along the camera forward axis, > 0 in front of the camera. */
  depth: number;
}

/**
 * Image coordinates of a world point, or null when it sits at or behind the
 * camera plane. Inverse of pixelRay for points in front of the camera.
 */
export function projectPoint(pose: CameraPose, width: number, height: number, p: Vec3): ProjectedPoint | null {
  const { right, up, forward } = lookAtBasis(pose.position, pose.look_at, pose.up);
  const v = sub(p, pose.position);
  const depth = dot(v, forward);
  if (depth <= 1e-9) return null;
  const tanHalf = Math.tan((pose.fov_deg * Math.PI) / 360);
  const aspect = width / height;
  const sx = dot(v, right) / depth;
  const sy = dot(v, up) / depth;
  const px = ((sx / (tanHalf * aspect) + 1) / 2) * width - 0.5;
  const py = ((1 - sy / tanHalf) / 2) * height - 0.5;
  return { px, py, depth };
}

/**
 * Spherical orbit rig: the camera position expressed as a target point plus
 * (radius, azimuth, elevation). Elevation is clamped just short of the poles
 * so the z-up look-at basis never degenerates.
 */
export interface OrbitRig {
  target: Vec3;
  radius: number;
  azimuth: number;
  elevation: number;
}

const ELEVATION_LIMIT = Math.PI / 2 - 0.01;

export function orbitPosition(rig: OrbitRig): Vec3 {
  const ce = Math.cos(rig.elevation);
  return [
    rig.target[0] + rig.radius * ce * Math.cos(rig.azimuth),
    rig.target[1] + rig.radius * ce * Math.sin(rig.azimuth),
    rig.target[2] + rig.radius * Math.sin(rig.elevation),
  ];
}

export function rigFromPose(position: Vec3, target: Vec3): OrbitRig {
  const v = sub(position, target);
  const radius = Math.max(norm(v), 1e-6);
  const elevation = Math.asin(Math.min(1, Math.max(-1, v[2] / radius)));
  const azimuth = Math.atan2(v[1], v[0]);
  return { target, radius, azimuth, elevation };
}

export function orbit(rig: OrbitRig, dAzimuth: number, dElevation: number): OrbitRig {
  const elevation = Math.min(ELEVATION_LIMIT, Math.max(-ELEVATION_LIMIT, rig.elevation + dElevation));
  return { ...rig, azimuth: rig.azimuth + dAzimuth, elevation };
}

export function zoom(rig: OrbitRig, factor: number): OrbitRig {
  return { ...rig, radius: Math.max(1e-3, rig.radius * factor) };
}

/** Shift the orbit target in the camera's image plane. */
export function pan(rig: OrbitRig, pose: CameraPose, dx: number, dy: number): OrbitRig {
  const { right, up } = lookAtBasis(pose.position, pose.look_at, pose.up);
  const target = add(rig.target, add(scale(right, dx), scale(up, dy)));
  return { ...rig, target };
}

/**
 * World position for dragging a point in a camera-parallel plane: the ray
 * through pixel (px, py) intersected with the plane that contains
 * `planePoint` and faces the camera. Returns null for rays parallel to the
 * plane (grazing the camera forward axis).
 */
export function dragInViewPlane(
  pose: CameraPose,
  width: number,
  height: number,
  px: number,
  py: number,
  planePoint: Vec3,
): Vec3 | null {
  const { forward } = lookAtBasis(pose.position, pose.look_at, pose.up);
  const dir = pixelRay(pose, width, height, px, py);
  const denom = dot(dir, forward);
  if (Math.abs(denom) < 1e-9) return null;
  const t = dot(sub(planePoint, pose.position), forward) / denom;
  if (t <= 0) return null;
  return add(pose.position, scale(dir, t));
}
