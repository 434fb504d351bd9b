/**
 * Wire types for the frame service HTTP API.
 *
 * These mirror the JSON contract published at /schema: a FrameRequest is the
 * full serialized camera + observer state, /info describes the loaded scene
 * and render defaults, and error bodies carry either a plain string detail
 * or field-level messages.
 */

export type Vec3 = [number, number, number];
export type Resolution = [number, number];

export type Colormap = "viridis" | "gray";
export type Normalization = "fixed" | "minmax";
export type Observer = "coupled" | Vec3;

export interface CameraPose {
  position: Vec3;
  look_at: Vec3;
  up: Vec3;
  fov_deg: number;
}

export interface FrameRequest {
  camera: CameraPose;
  observer: Observer;
  resolution: Resolution;
  d_f: number;
  occlusion: boolean;
  alpha: number;
  colormap: Colormap;
  normalization: Normalization;
  g_max: number | null;
}

export interface Aabb {
  min: Vec3;
  max: Vec3;
}

export interface ServiceDefaults {
  resolution: Resolution;
  max_resolution: Resolution;
  queue_depth: number;
  d_f: number;
  occlusion: boolean;
  alpha: number;
  colormap: Colormap;
  normalization: Normalization;
  g_max: number | null;
  integrator: { near: number; far: number; steps: number };
}

export interface InfoResponse {
  scene_id: string;
  checkpoint_id: string;
  variant: string;
  aabb: Aabb;
  defaults: ServiceDefaults;
}

export interface FieldError {
  field: string;
  message: string;
}

/** Validation failures: {detail: "invalid request", errors: [...]}. */
export interface ValidationErrorBody {
  detail: string;
  errors: FieldError[];
}

/** Render-path 400s: {detail: {errors: [...]}}. */
export interface RenderErrorBody {
  detail: string | { errors: FieldError[] };
}

/** Headers attached to every successful /frame and /buffers response. */
export interface FrameHeaders {
  renderMs: number;
  gazeMin: number;
  gazeMax: number;
}
