/**
 * Typed client for the frame service: /info, POST /frame (PNG), and
 * /buffers (raw float32 planes), plus parsing of the error bodies and the
 * NERGFRM1 binary layout.
 */

import type {
  FieldError,
  FrameHeaders,
  FrameRequest,
  InfoResponse,
  Vec3,
} from "./types.js";

export class ServiceError extends Error {
  readonly status: number;
  readonly fieldErrors: FieldError[];

  constructor(status: number, message: string, fieldErrors: FieldError[] = []) {
    super(message);
    this.status = status;
    this.fieldErrors = fieldErrors;
  }
}

/** Pull a human-readable message and field errors out of an error body. */
export function parseErrorBody(status: number, body: unknown): ServiceError {
  if (typeof body === "object" && body !== null) {
    const record = body as Record<string, unknown>;
    const errors: FieldError[] = [];
    const collect = (value: unknown) => {
      if (Array.isArray(value)) {
        for (const e of value) {
          if (typeof e === "object" && e !== null && "field" in e && "message" in e) {
            errors.push(e as FieldError);
          }
        }
      }
    };
    collect(record.errors);
    const detail = record.detail;
    if (typeof detail === "object" && detail !== null) {
      collect((detail as Record<string, unknown>).errors);
    }
    const message =
      typeof detail === "string"
        ? detail
        : errors.map((e) => `${e.field}: ${e.message}`).join("; ") || `request failed (${status})`;
    return new ServiceError(status, message, errors);
  }
  return new ServiceError(status, `request failed (${status})`);
}

function frameHeaders(response: Response): FrameHeaders {
  return {
    renderMs: Number(response.headers.get("X-Render-Ms") ?? "0"),
    gazeMin: Number(response.headers.get("X-Gaze-Min") ?? "0"),
    gazeMax: Number(response.headers.get("X-Gaze-Max") ?? "0"),
  };
}

async function raise(response: Response): Promise<never> {
  let body: unknown = null;
  try {
    body = await response.json();
  } catch {
    // non-JSON error body; fall through to the generic message
  }
  throw parseErrorBody(response.status, body);
}

export async function getInfo(origin: string, fetchFn: typeof fetch = fetch): Promise<InfoResponse> {
  const response = await fetchFn(`${origin}/info`);
  if (!response.ok) await raise(response);
  return (await response.json()) as InfoResponse;
}

export interface FrameResponse {
  blob: Blob;
  headers: FrameHeaders;
}

export async function postFrame(
  origin: string,
  request: FrameRequest,
  fetchFn: typeof fetch = fetch,
  signal?: AbortSignal,
): Promise<FrameResponse> {
  const response = await fetchFn(`${origin}/frame`, {
    method: "POST",
    headers: { "content-type": "application/json" },
    body: JSON.stringify(request),
    signal,
  });
  if (!response.ok) await raise(response);
  return { blob: await response.blob(), headers: frameHeaders(response) };
}

/** Query-string form of a request, as /buffers expects it. */
export function toBuffersQuery(request: FrameRequest): string {
  const csv = (v: Vec3) => v.join(",");
  const params = new URLSearchParams({
    camera_position: csv(request.camera.position),
    camera_look_at: csv(request.camera.look_at),
    camera_up: csv(request.camera.up),
    fov_deg: String(request.camera.fov_deg),
    observer: request.observer === "coupled" ? "coupled" : csv(request.observer),
    resolution: `${request.resolution[0]}x${request.resolution[1]}`,
    d_f: String(request.d_f),
    occlusion: String(request.occlusion),
    alpha: String(request.alpha),
    colormap: request.colormap,
    normalization: request.normalization,
  });
  if (request.g_max !== null) params.set("g_max", String(request.g_max));
  return params.toString();
}

export interface FrameBuffers {
  width: number;
  height: number;
  /** Row-major (height x width x 3), values in [0, 1]. */
  rgb: Float32Array;
  depth: Float32Array;
  gaze: Float32Array;
  visibility: Float32Array;
}

const FRAME_MAGIC = "NERGFRM1";

/** Decode the NERGFRM1 layout: magic, u32 width/height, then float32
 * planes rgb / depth / gaze / visibility, all little-endian. */
export function parseFrameBuffers(data: ArrayBuffer): FrameBuffers {
  const bytes = new Uint8Array(data);
  const magic = String.fromCharCode(...bytes.subarray(0, 8));
  if (magic !== FRAME_MAGIC) {
    throw new Error(`not a frame buffer: magic ${JSON.stringify(magic)}`);
  }
  const view = new DataView(data);
  const width = view.getUint32(8, true);
  const height = view.getUint32(12, true);
  const pixels = width * height;
  const expected = 16 + pixels * 6 * 4;
  if (data.byteLength !== expected) {
    throw new Error(`frame buffer is ${data.byteLength} bytes, expected ${expected}`);
  }
  let offset = 16;
  const plane = (count: number) => {
    const out = new Float32Array(data, offset, count);
    offset += count * 4;
    return out;
  };
  return {
    width,
    height,
    rgb: plane(pixels * 3),
    depth: plane(pixels),
    gaze: plane(pixels),
    visibility: plane(pixels),
  };
}

export async function getBuffers(
  origin: string,
  request: FrameRequest,
  fetchFn: typeof fetch = fetch,
): Promise<{ buffers: FrameBuffers; headers: FrameHeaders }> {
  const response = await fetchFn(`${origin}/buffers?${toBuffersQuery(request)}`);
  if (!response.ok) await raise(response);
  return {
    buffers: parseFrameBuffers(await response.arrayBuffer()),
    headers: frameHeaders(response),
  };
}
