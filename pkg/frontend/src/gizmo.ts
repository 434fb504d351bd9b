/**
 * Observer gizmo drawn over the served frame on a 2D canvas: the scene box
 * as a wireframe, the observer as a draggable marker with a drop line to
 * the box floor, and the coupled state as a small badge at the camera. All
 * of it reuses the renderer's pinhole projection, so the marker lands on
 * the pixel the service would render the observer at.
 */

import { projectPoint } from "./camera.js";
import type { CameraPose, Aabb, Vec3 } from "./types.js";

export interface GizmoLayout {
  width: number;
  height: number;
  pose: CameraPose;
  aabb: Aabb;
}

const BOX_EDGES: Array<[number, number]> = [
  [0, 1], [1, 3], [3, 2], [2, 0],
  [4, 5], [5, 7], [7, 6], [6, 4],
  [0, 4], [1, 5], [2, 6], [3, 7],
];

function corners(aabb: Aabb): Vec3[] {
  const out: Vec3[] = [];
  for (let i = 0; i < 8; i++) {
    out.push([
      (i & 1) === 0 ? aabb.min[0] : aabb.max[0],
      (i & 2) === 0 ? aabb.min[1] : aabb.max[1],
      (i & 4) === 0 ? aabb.min[2] : aabb.max[2],
    ]);
  }
  return out;
}

export const MARKER_RADIUS = 7;

/** Screen position of the observer marker, or null when off-screen. */
export function markerPosition(layout: GizmoLayout, observer: Vec3): { px: number; py: number } | null {
  const p = projectPoint(layout.pose, layout.width, layout.height, observer);
  return p === null ? null : { px: p.px, py: p.py };
}

/** True when pixel (px, py) grabs the observer marker. */
export function hitsMarker(layout: GizmoLayout, observer: Vec3, px: number, py: number): boolean {
  const m = markerPosition(layout, observer);
  if (m === null) return false;
  return Math.hypot(px - m.px, py - m.py) <= MARKER_RADIUS + 4;
}

export function drawGizmo(
  ctx: CanvasRenderingContext2D,
  layout: GizmoLayout,
  observer: Vec3,
  coupled: boolean,
): void {
  const { width, height } = layout;
  ctx.clearRect(0, 0, width, height);

  ctx.strokeStyle = "rgba(255, 255, 255, 0.25)";
  ctx.lineWidth = 1;
  const pts = corners(layout.aabb).map((c) => projectPoint(layout.pose, width, height, c));
  for (const [a, b] of BOX_EDGES) {
    const pa = pts[a];
    const pb = pts[b];
    if (!pa || !pb) continue;
    ctx.beginPath();
    ctx.moveTo(pa.px, pa.py);
    ctx.lineTo(pb.px, pb.py);
    ctx.stroke();
  }

  if (coupled) return;

  const m = markerPosition(layout, observer);
  if (m === null) return;
  const floor: Vec3 = [observer[0], observer[1], layout.aabb.min[2]];
  const f = projectPoint(layout.pose, width, height, floor);
  if (f !== null) {
    ctx.strokeStyle = "rgba(255, 200, 60, 0.5)";
    ctx.setLineDash([4, 4]);
    ctx.beginPath();
    ctx.moveTo(m.px, m.py);
    ctx.lineTo(f.px, f.py);
    ctx.stroke();
    ctx.setLineDash([]);
  }
  ctx.beginPath();
  ctx.arc(m.px, m.py, MARKER_RADIUS, 0, 2 * Math.PI);
  ctx.fillStyle = "rgba(255, 200, 60, 0.85)";
  ctx.fill();
  ctx.strokeStyle = "#181818";
  ctx.lineWidth = 2;
  ctx.stroke();
}
