/**
 * Viewer state and its serialization to frame requests.
 *
 * Every interactive control maps to exactly one FrameRequest field, and the
 * mapping is total: any state serializes. The observer position is kept in
 * the state even while coupled (so decoupling restores the last spot); the
 * coupled flag short-circuits it to the literal "coupled" on the wire. An
 * observer outside the scene box is clamped to the nearest boundary point,
 * which the caller can detect to show a notice.
 */

import type {
  Aabb,
  Colormap,
  FrameRequest,
  InfoResponse,
  Normalization,
  Resolution,
  Vec3,
} from "./types.js";

/**
 * Resolution tier: "full" renders at the configured resolution,
 * "interactive" at a degraded one while a drag is in progress.
 */
export type ResolutionTier = "full" | "interactive";

export interface ViewerCamera {
  position: Vec3;
  lookAt: Vec3;
  up: Vec3;
  fovDeg: number;
}

export interface ViewerState {
  camera: ViewerCamera;
  observer: Vec3;
  coupled: boolean;
  dF: number;
  occlusion: boolean;
  alpha: number;
  colormap: Colormap;
  normalization: Normalization;
  gMax: number | null;
  resolution: Resolution;
  tier: ResolutionTier;
  /** Sequence number of the request currently on the wire, if any. */
  inFlight: number | null;
}

/** Nearest point of the box to p (componentwise, since axes separate). */
export function clampToAabb(p: Vec3, aabb: Aabb): Vec3 {
  return [
    Math.min(Math.max(p[0], aabb.min[0]), aabb.max[0]),
    Math.min(Math.max(p[1], aabb.min[1]), aabb.max[1]),
    Math.min(Math.max(p[2], aabb.min[2]), aabb.max[2]),
  ];
}

export function vecEquals(a: Vec3, b: Vec3): boolean {
  return a[0] === b[0] && a[1] === b[1] && a[2] === b[2];
}

/** Halved interactive-tier resolution; never below 32 pixels a side. */
export function degradedResolution(full: Resolution): Resolution {
  return [Math.max(32, Math.round(full[0] / 2)), Math.max(32, Math.round(full[1] / 2))];
}

/**
 * Serialize the state into the request the service renders. Lossless apart
 * from the two intended reductions: a coupled observer serializes to the
 * literal "coupled", and a decoupled observer is clamped into the scene box
 * (the service rejects outside positions with a 422).
 */
export function stateToRequest(state: ViewerState, aabb: Aabb): FrameRequest {
  return {
    camera: {
      position: state.camera.position,
      look_at: state.camera.lookAt,
      up: state.camera.up,
      fov_deg: state.camera.fovDeg,
    },
    observer: state.coupled ? "coupled" : clampToAabb(state.observer, aabb),
    resolution: state.tier === "interactive" ? degradedResolution(state.resolution) : state.resolution,
    d_f: state.dF,
    occlusion: state.occlusion,
    alpha: state.alpha,
    colormap: state.colormap,
    normalization: state.normalization,
    g_max: state.gMax,
  };
}

/** Whether serializing would move the observer (worth a UI notice). */
export function observerClamped(state: ViewerState, aabb: Aabb): boolean {
  return !state.coupled && !vecEquals(state.observer, clampToAabb(state.observer, aabb));
}

/**
 * Rebuild a state from a request (the inverse of stateToRequest for
 * requests the service accepts). A "coupled" observer leaves the gizmo at
 * the center of the scene box until the user decouples.
 */
export function requestToState(request: FrameRequest, aabb: Aabb): ViewerState {
  const coupled = request.observer === "coupled";
  const center: Vec3 = [
    (aabb.min[0] + aabb.max[0]) / 2,
    (aabb.min[1] + aabb.max[1]) / 2,
    (aabb.min[2] + aabb.max[2]) / 2,
  ];
  return {
    camera: {
      position: request.camera.position,
      lookAt: request.camera.look_at,
      up: request.camera.up,
      fovDeg: request.camera.fov_deg,
    },
    observer: coupled ? center : (request.observer as Vec3),
    coupled,
    dF: request.d_f,
    occlusion: request.occlusion,
    alpha: request.alpha,
    colormap: request.colormap,
    normalization: request.normalization,
    gMax: request.g_max,
    resolution: request.resolution,
    tier: "full",
    inFlight: null,
  };
}

/** Starting state for a freshly loaded scene: service defaults, coupled
 * observer parked at the box center, camera on the default demo pose unless
 * the caller overrides it afterwards. */
export function initialState(info: InfoResponse): ViewerState {
  const { aabb, defaults } = info;
  const center: Vec3 = [
    (aabb.min[0] + aabb.max[0]) / 2,
    (aabb.min[1] + aabb.max[1]) / 2,
    (aabb.min[2] + aabb.max[2]) / 2,
  ];
  const size: Vec3 = [
    aabb.max[0] - aabb.min[0],
    aabb.max[1] - aabb.min[1],
    aabb.max[2] - aabb.min[2],
  ];
  const diag = Math.hypot(size[0], size[1], size[2]);
  const position: Vec3 = [center[0], center[1] - 0.9 * diag, center[2] + 0.45 * diag];
  return {
    camera: { position, lookAt: center, up: [0, 0, 1], fovDeg: 60 },
    observer: center,
    coupled: true,
    dF: defaults.d_f,
    occlusion: defaults.occlusion,
    alpha: defaults.alpha,
    colormap: defaults.colormap,
    normalization: defaults.normalization,
    gMax: defaults.g_max,
    resolution: [
      Math.min(defaults.resolution[0], defaults.max_resolution[0]),
      Math.min(defaults.resolution[1], defaults.max_resolution[1]),
    ],
    tier: "full",
    inFlight: null,
  };
}
