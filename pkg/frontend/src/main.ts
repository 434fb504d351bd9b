/**
 * Viewer entry point: loads /info, wires the controls, and keeps exactly
 * one frame request in flight through the FrameLoop. Configured via URL
 * query: ?service=<origin> points at the frame service (same origin by
 * default), ?camera=px,py,pz:tx,ty,tz[:fov] and ?observer=x,y,z|coupled
 * pick the starting pose.
 */

import { getInfo, ServiceError } from "./api.js";
import {
  dragInViewPlane,
  orbit,
  orbitPosition,
  pan,
  rigFromPose,
  zoom,
} from "./camera.js";
import type { OrbitRig } from "./camera.js";
import { FrameLoop } from "./frameLoop.js";
import type { DisplayedFrame } from "./frameLoop.js";
import { drawGizmo, hitsMarker } from "./gizmo.js";
import { clampToAabb, initialState } from "./state.js";
import type { ViewerState } from "./state.js";
import type { CameraPose, InfoResponse, Resolution, Vec3 } from "./types.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function parseVec3(text: string): Vec3 | null {
  const parts = text.split(",").map(Number);
  return parts.length === 3 && parts.every(Number.isFinite) ? (parts as Vec3) : null;
}

/** camera=px,py,pz:tx,ty,tz[:fov] */
function parseCameraParam(text: string): { position: Vec3; lookAt: Vec3; fovDeg?: number } | null {
  const groups = text.split(":");
  if (groups.length < 2 || groups.length > 3) return null;
  const position = parseVec3(groups[0] ?? "");
  const lookAt = parseVec3(groups[1] ?? "");
  if (!position || !lookAt) return null;
  if (groups.length === 3) {
    const fovDeg = Number(groups[2]);
    if (!Number.isFinite(fovDeg)) return null;
    return { position, lookAt, fovDeg };
  }
  return { position, lookAt };
}

function poseOf(state: ViewerState): CameraPose {
  return {
    position: state.camera.position,
    look_at: state.camera.lookAt,
    up: state.camera.up,
    fov_deg: state.camera.fovDeg,
  };
}

function resolutionTiers(full: Resolution, cap: Resolution): Resolution[] {
  const tiers: Resolution[] = [];
  for (const s of [0.5, 1, 1.5, 2]) {
    const w = Math.min(Math.round(full[0] * s), cap[0]);
    const h = Math.min(Math.round(full[1] * s), cap[1]);
    if (!tiers.some((t) => t[0] === w && t[1] === h)) tiers.push([w, h]);
  }
  return tiers;
}

async function start(): Promise<void> {
  const query = new URLSearchParams(window.location.search);
  const origin = (query.get("service") ?? window.location.origin).replace(/\/$/, "");

  const banner = el<HTMLDivElement>("banner");
  const notice = el<HTMLDivElement>("notice");
  const stats = el<HTMLDivElement>("stats");
  const frameImg = el<HTMLImageElement>("frame");
  const overlay = el<HTMLCanvasElement>("overlay");
  const coupledBox = el<HTMLInputElement>("coupled");
  const occlusionBox = el<HTMLInputElement>("occlusion");
  const falloff = el<HTMLInputElement>("falloff");
  const falloffOut = el<HTMLSpanElement>("falloff-value");
  const alpha = el<HTMLInputElement>("alpha");
  const alphaOut = el<HTMLSpanElement>("alpha-value");
  const colormap = el<HTMLSelectElement>("colormap");
  const normalization = el<HTMLSelectElement>("normalization");
  const gMaxInput = el<HTMLInputElement>("g-max");
  const resolutionSel = el<HTMLSelectElement>("resolution");
  const sceneLine = el<HTMLDivElement>("scene-line");

  let info: InfoResponse;
  try {
    info = await getInfo(origin);
  } catch (error) {
    banner.textContent = `cannot reach ${origin}: ${(error as Error).message}`;
    banner.hidden = false;
    return;
  }

  let state = initialState(info);
  const cameraParam = query.get("camera");
  if (cameraParam) {
    const parsed = parseCameraParam(cameraParam);
    if (parsed) {
      state = {
        ...state,
        camera: {
          ...state.camera,
          position: parsed.position,
          lookAt: parsed.lookAt,
          fovDeg: parsed.fovDeg ?? state.camera.fovDeg,
        },
      };
    }
  }
  const observerParam = query.get("observer");
  if (observerParam && observerParam !== "coupled") {
    const parsed = parseVec3(observerParam);
    if (parsed) {
      state = { ...state, observer: clampToAabb(parsed, info.aabb), coupled: false };
    }
  }
  let rig: OrbitRig = rigFromPose(state.camera.position, state.camera.lookAt);

  sceneLine.textContent =
    `scene ${info.scene_id} / checkpoint ${info.checkpoint_id} (${info.variant})`;

  coupledBox.checked = state.coupled;
  occlusionBox.checked = state.occlusion;
  falloff.value = String(state.dF);
  falloffOut.textContent = state.dF.toFixed(3);
  alpha.value = String(state.alpha);
  alphaOut.textContent = state.alpha.toFixed(2);
  colormap.value = state.colormap;
  normalization.value = state.normalization;
  gMaxInput.value = state.gMax === null ? "" : String(state.gMax);
  gMaxInput.disabled = state.normalization !== "fixed";
  for (const tier of resolutionTiers(state.resolution, info.defaults.max_resolution)) {
    const option = document.createElement("option");
    option.value = `${tier[0]}x${tier[1]}`;
    option.textContent = option.value;
    if (tier[0] === state.resolution[0] && tier[1] === state.resolution[1]) option.selected = true;
    resolutionSel.append(option);
  }

  let objectUrl: string | null = null;
  const showFrame = (frame: DisplayedFrame): void => {
    banner.hidden = true;
    if (objectUrl) URL.revokeObjectURL(objectUrl);
    objectUrl = URL.createObjectURL(frame.blob);
    frameImg.src = objectUrl;
    const [w, h] = frame.request.resolution;
    stats.textContent =
      `${w}x${h} in ${frame.headers.renderMs.toFixed(1)} ms, ` +
      `gaze ${frame.headers.gazeMin.toPrecision(3)} to ${frame.headers.gazeMax.toPrecision(3)}`;
    redrawOverlay();
  };

  const loop = new FrameLoop({
    origin,
    aabb: info.aabb,
    onFrame: showFrame,
    onError: (error) => {
      const fields = error instanceof ServiceError ? error.fieldErrors : [];
      banner.textContent = fields.length
        ? fields.map((f) => `${f.field}: ${f.message}`).join("; ")
        : error.message;
      banner.hidden = false;
    },
    onClamp: (clamped) => {
      notice.textContent =
        `observer clamped to the scene box at ` +
        `(${clamped.map((v) => v.toFixed(2)).join(", ")})`;
      notice.hidden = false;
      window.setTimeout(() => {
        notice.hidden = true;
      }, 2500);
    },
  });

  const push = (next: ViewerState): void => {
    state = next;
    redrawOverlay();
    loop.update(state);
  };

  function redrawOverlay(): void {
    const width = overlay.clientWidth;
    const height = overlay.clientHeight;
    if (width === 0 || height === 0) return;
    if (overlay.width !== width) overlay.width = width;
    if (overlay.height !== height) overlay.height = height;
    const ctx = overlay.getContext("2d");
    if (!ctx) return;
    drawGizmo(ctx, { width, height, pose: poseOf(state), aabb: info.aabb }, state.observer, state.coupled);
  }

  coupledBox.addEventListener("change", () => push({ ...state, coupled: coupledBox.checked }));
  occlusionBox.addEventListener("change", () => push({ ...state, occlusion: occlusionBox.checked }));
  falloff.addEventListener("input", () => {
    const dF = Math.max(1e-4, Number(falloff.value));
    falloffOut.textContent = dF.toFixed(3);
    push({ ...state, dF });
  });
  alpha.addEventListener("input", () => {
    const a = Math.min(1, Math.max(0, Number(alpha.value)));
    alphaOut.textContent = a.toFixed(2);
    push({ ...state, alpha: a });
  });
  colormap.addEventListener("change", () =>
    push({ ...state, colormap: colormap.value === "gray" ? "gray" : "viridis" }),
  );
  normalization.addEventListener("change", () => {
    const fixed = normalization.value === "fixed";
    gMaxInput.disabled = !fixed;
    const gMax = fixed ? Number(gMaxInput.value) || Math.max(1e-6, state.gMax ?? 1) : state.gMax;
    if (fixed && !gMaxInput.value) gMaxInput.value = String(gMax);
    push({ ...state, normalization: fixed ? "fixed" : "minmax", gMax });
  });
  gMaxInput.addEventListener("change", () => {
    const value = Number(gMaxInput.value);
    if (Number.isFinite(value) && value > 0) push({ ...state, gMax: value });
  });
  resolutionSel.addEventListener("change", () => {
    const parts = resolutionSel.value.split("x").map(Number);
    if (parts.length === 2 && parts.every((v) => Number.isInteger(v) && v > 0)) {
      push({ ...state, resolution: [parts[0] ?? 0, parts[1] ?? 0] });
    }
  });

  type DragMode = "orbit" | "pan" | "observer" | null;
  let dragMode: DragMode = null;
  let lastX = 0;
  let lastY = 0;

  const layout = () => ({
    width: overlay.clientWidth,
    height: overlay.clientHeight,
    pose: poseOf(state),
    aabb: info.aabb,
  });

  overlay.addEventListener("pointerdown", (ev) => {
    overlay.setPointerCapture(ev.pointerId);
    lastX = ev.offsetX;
    lastY = ev.offsetY;
    if (!state.coupled && hitsMarker(layout(), state.observer, ev.offsetX, ev.offsetY)) {
      dragMode = "observer";
    } else {
      dragMode = ev.shiftKey ? "pan" : "orbit";
    }
  });

  overlay.addEventListener("pointermove", (ev) => {
    if (dragMode === null) return;
    const dx = ev.offsetX - lastX;
    const dy = ev.offsetY - lastY;
    lastX = ev.offsetX;
    lastY = ev.offsetY;
    if (dragMode === "observer") {
      const moved = dragInViewPlane(
        poseOf(state), overlay.clientWidth, overlay.clientHeight,
        ev.offsetX, ev.offsetY, state.observer,
      );
      if (moved) {
        push({ ...state, observer: clampToAabb(moved, info.aabb), tier: "interactive" });
      }
      return;
    }
    if (dragMode === "pan") {
      const unit = rig.radius * 0.0015;
      rig = pan(rig, poseOf(state), -dx * unit, dy * unit);
    } else {
      rig = orbit(rig, -dx * 0.008, dy * 0.008);
    }
    const position = orbitPosition(rig);
    push({
      ...state,
      camera: { ...state.camera, position, lookAt: rig.target },
      tier: "interactive",
    });
  });

  const endDrag = (): void => {
    if (dragMode === null) return;
    dragMode = null;
    if (state.tier === "interactive") push({ ...state, tier: "full" });
  };
  overlay.addEventListener("pointerup", endDrag);
  overlay.addEventListener("pointercancel", endDrag);

  overlay.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    rig = zoom(rig, Math.exp(ev.deltaY * 0.001));
    push({
      ...state,
      camera: { ...state.camera, position: orbitPosition(rig), lookAt: rig.target },
    });
  }, { passive: false });

  new ResizeObserver(redrawOverlay).observe(overlay);
  push(state);
}

void start();
