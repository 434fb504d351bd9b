/** Shared test scaffolding: a seeded RNG, fixture loading, a manual timer
 * scheduler, and a deferred-promise fetch mock for driving the frame loop
 * one response at a time. */

import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { dirname, join } from "node:path";

import type { ViewerState } from "../src/state.js";
import type { Aabb, InfoResponse, Vec3 } from "../src/types.js";

const FIXTURES = join(dirname(fileURLToPath(import.meta.url)), "fixtures");

export function loadFixture<T>(name: string): T {
  return JSON.parse(readFileSync(join(FIXTURES, name), "utf-8")) as T;
}

export function decodeBase64(b64: string): Uint8Array<ArrayBuffer> {
  const decoded = Buffer.from(b64, "base64");
  const out = new Uint8Array(new ArrayBuffer(decoded.length));
  out.set(decoded);
  return out;
}

/** mulberry32: tiny deterministic PRNG, good enough for property sweeps. */
export function seededRng(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function uniform(rng: () => number, lo: number, hi: number): number {
  return lo + (hi - lo) * rng();
}

export function pointIn(rng: () => number, aabb: Aabb): Vec3 {
  return [
    uniform(rng, aabb.min[0], aabb.max[0]),
    uniform(rng, aabb.min[1], aabb.max[1]),
    uniform(rng, aabb.min[2], aabb.max[2]),
  ];
}

export const DEMO_INFO = loadFixture<InfoResponse>("info_demo.json");

export function baseState(overrides: Partial<ViewerState> = {}): ViewerState {
  return {
    camera: {
      position: [0, -1.7, 1.5],
      lookAt: [0, 0.4, 0.9],
      up: [0, 0, 1],
      fovDeg: 65,
    },
    observer: [0.5, -0.5, 1.0],
    coupled: true,
    dF: 0.05,
    occlusion: true,
    alpha: 0.6,
    colormap: "viridis",
    normalization: "minmax",
    gMax: null,
    resolution: [320, 240],
    tier: "full",
    inFlight: null,
    ...overrides,
  };
}

export function flush(): Promise<void> {
  return new Promise((resolve) => setTimeout(resolve, 0));
}

export interface Deferred<T> {
  promise: Promise<T>;
  resolve: (value: T) => void;
  reject: (reason: Error) => void;
}

export function deferred<T>(): Deferred<T> {
  let resolve!: (value: T) => void;
  let reject!: (reason: Error) => void;
  const promise = new Promise<T>((res, rej) => {
    resolve = res;
    reject = rej;
  });
  return { promise, resolve, reject };
}

export interface RecordedCall {
  url: string;
  body: unknown;
  deferred: Deferred<Response>;
}

/** fetch stub that parks every call on a deferred the test settles. */
export function deferredFetch(): { fetchFn: typeof fetch; calls: RecordedCall[] } {
  const calls: RecordedCall[] = [];
  const fetchFn = ((input: RequestInfo | URL, init?: RequestInit) => {
    const call: RecordedCall = {
      url: String(input),
      body: init?.body ? JSON.parse(init.body as string) : null,
      deferred: deferred<Response>(),
    };
    calls.push(call);
    return call.deferred.promise;
  }) as typeof fetch;
  return { fetchFn, calls };
}

export function pngResponse(bytes: Uint8Array | string, gazeMax = 1): Response {
  const body = typeof bytes === "string" ? new TextEncoder().encode(bytes) : bytes;
  return new Response(body.slice(), {
    status: 200,
    headers: {
      "content-type": "image/png",
      "X-Render-Ms": "5.000",
      "X-Gaze-Min": "0",
      "X-Gaze-Max": String(gazeMax),
    },
  });
}

export interface ManualTimer {
  fn: () => void;
  ms: number;
}

/** Timer queue under test control; records every requested delay. */
export class ManualScheduler {
  pending: ManualTimer[] = [];
  delays: number[] = [];

  setTimer = (fn: () => void, ms: number): unknown => {
    const timer: ManualTimer = { fn, ms };
    this.pending.push(timer);
    this.delays.push(ms);
    return timer;
  };

  clearTimer = (handle: unknown): void => {
    this.pending = this.pending.filter((t) => t !== handle);
  };

  async runNext(): Promise<void> {
    const timer = this.pending.shift();
    if (!timer) throw new Error("no pending timer");
    timer.fn();
    await flush();
  }
}
