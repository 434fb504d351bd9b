import { describe, expect, it } from "vitest";

import { ServiceError } from "../src/api.js";
import { FrameLoop } from "../src/frameLoop.js";
import type { DisplayedFrame } from "../src/frameLoop.js";
import { stateToRequest } from "../src/state.js";
import type { ViewerState } from "../src/state.js";
import type { FrameRequest } from "../src/types.js";
import {
  baseState,
  decodeBase64,
  deferredFetch,
  DEMO_INFO,
  flush,
  loadFixture,
  ManualScheduler,
  pngResponse,
} from "./helpers.js";

const AABB = DEMO_INFO.aabb;

interface Harness {
  loop: FrameLoop;
  frames: DisplayedFrame[];
  errors: Error[];
  scheduler: ManualScheduler;
}

function makeLoop(fetchFn: typeof fetch, options: { retryBaseMs?: number } = {}): Harness {
  const frames: DisplayedFrame[] = [];
  const errors: Error[] = [];
  const scheduler = new ManualScheduler();
  const loop = new FrameLoop({
    origin: "http://service.test",
    aabb: AABB,
    onFrame: (frame) => frames.push(frame),
    onError: (error) => errors.push(error),
    fetchFn,
    setTimer: scheduler.setTimer,
    clearTimer: scheduler.clearTimer,
    settleMs: 200,
    retryBaseMs: options.retryBaseMs ?? 500,
  });
  return { loop, frames, errors, scheduler };
}

describe("request coalescing", () => {
  it("collapses a hundred drag updates into a handful of requests ending on the final state", async () => {
    const { fetchFn, calls } = deferredFetch();
    const { loop, frames, scheduler } = makeLoop(fetchFn);

    loop.update(baseState());
    expect(calls.length).toBe(1);

    // a drag burst: 100 camera positions at the interactive tier
    let finalState: ViewerState = baseState();
    for (let i = 1; i <= 100; i++) {
      finalState = baseState({
        camera: {
          position: [Math.sin(i / 20), -1.7, 1.5],
          lookAt: [0, 0.4, 0.9],
          up: [0, 0, 1],
          fovDeg: 65,
        },
        tier: "interactive",
      });
      loop.update(finalState);
    }
    // still just the initial request on the wire
    expect(calls.length).toBe(1);

    calls[0]!.deferred.resolve(pngResponse("frame-0"));
    await flush();
    // one trailing request for the latest drag state
    expect(calls.length).toBe(2);
    expect(calls[1]!.body).toEqual(stateToRequest(finalState, AABB));

    calls[1]!.deferred.resolve(pngResponse("frame-drag"));
    await flush();
    // idle now: the settle timer upgrades the same state to the full tier
    expect(scheduler.pending.length).toBe(1);
    await scheduler.runNext();
    expect(calls.length).toBe(3);

    calls[2]!.deferred.resolve(pngResponse("frame-full"));
    await flush();

    expect(calls.length).toBeLessThanOrEqual(5);
    const finalRequest = calls[2]!.body as FrameRequest;
    expect(finalRequest).toEqual(stateToRequest({ ...finalState, tier: "full" }, AABB));
    expect(finalRequest.camera.position).toEqual(finalState.camera.position);
    expect(finalRequest.resolution).toEqual(finalState.resolution);

    // displayed frames correspond to: initial, final drag state, settled full tier
    expect(frames.length).toBe(3);
    expect(frames[1]!.request).toEqual(stateToRequest(finalState, AABB));
    expect(frames[2]!.request).toEqual(finalRequest);
    const seqs = frames.map((f) => f.seq);
    expect([...seqs].sort((a, b) => a - b)).toEqual(seqs);
    expect(new Set(seqs).size).toBe(seqs.length);
  });

  it("keeps updates flowing after the burst settles", async () => {
    const { fetchFn, calls } = deferredFetch();
    const { loop, frames } = makeLoop(fetchFn);
    loop.update(baseState());
    calls[0]!.deferred.resolve(pngResponse("a"));
    await flush();
    loop.update(baseState({ alpha: 0.2 }));
    calls[1]!.deferred.resolve(pngResponse("b"));
    await flush();
    expect(frames.length).toBe(2);
    expect((frames[1]!.request as FrameRequest).alpha).toBe(0.2);
  });

  it("never displays frames out of sequence", async () => {
    const { fetchFn, calls } = deferredFetch();
    const { loop, frames } = makeLoop(fetchFn);
    for (let i = 0; i < 5; i++) {
      loop.update(baseState({ alpha: i / 10 }));
      const call = calls[calls.length - 1]!;
      call.deferred.resolve(pngResponse(`f${i}`));
      await flush();
    }
    const seqs = frames.map((f) => f.seq);
    for (let i = 1; i < seqs.length; i++) {
      expect(seqs[i]!).toBeGreaterThan(seqs[i - 1]!);
    }
  });
});

describe("failure handling", () => {
  it("shows a banner and retries the latest state with growing backoff", async () => {
    const { fetchFn, calls } = deferredFetch();
    const { loop, frames, errors, scheduler } = makeLoop(fetchFn, { retryBaseMs: 500 });

    loop.update(baseState());
    calls[0]!.deferred.reject(new TypeError("fetch failed"));
    await flush();
    expect(errors.length).toBe(1);
    expect(scheduler.delays).toEqual([500]);

    // a fresh update during the backoff window waits for the timer
    loop.update(baseState({ alpha: 0.3 }));
    expect(calls.length).toBe(1);

    await scheduler.runNext();
    expect(calls.length).toBe(2);
    expect((calls[1]!.body as FrameRequest).alpha).toBe(0.3);

    calls[1]!.deferred.reject(new TypeError("fetch failed"));
    await flush();
    expect(scheduler.delays).toEqual([500, 1000]);

    await scheduler.runNext();
    calls[2]!.deferred.resolve(pngResponse("recovered"));
    await flush();
    expect(frames.length).toBe(1);
    expect((frames[0]!.request as FrameRequest).alpha).toBe(0.3);

    // backoff resets after a success
    calls.length = 0;
    loop.update(baseState({ alpha: 0.4 }));
    calls[0]!.deferred.reject(new TypeError("fetch failed"));
    await flush();
    expect(scheduler.delays).toEqual([500, 1000, 500]);
  });

  it("retries 429 and 503 responses", async () => {
    const { fetchFn, calls } = deferredFetch();
    const { loop, errors, scheduler } = makeLoop(fetchFn);
    loop.update(baseState());
    calls[0]!.deferred.resolve(
      new Response(JSON.stringify({ detail: "render queue is full, retry later" }), { status: 429 }),
    );
    await flush();
    expect((errors[0] as ServiceError).status).toBe(429);
    expect(scheduler.pending.length).toBe(1);
    await scheduler.runNext();
    expect(calls.length).toBe(2);
  });

  it("surfaces field errors from a 400 and does not retry", async () => {
    const { fetchFn, calls } = deferredFetch();
    const { loop, errors, scheduler, frames } = makeLoop(fetchFn);
    loop.update(baseState());
    calls[0]!.deferred.resolve(
      new Response(
        JSON.stringify({
          detail: "invalid request",
          errors: [{ field: "alpha", message: "ensure this value is less than or equal to 1" }],
        }),
        { status: 400 },
      ),
    );
    await flush();
    const error = errors[0] as ServiceError;
    expect(error.status).toBe(400);
    expect(error.fieldErrors[0]?.field).toBe("alpha");
    expect(scheduler.pending.length).toBe(0);
    expect(frames.length).toBe(0);

    // the next state change goes straight out
    loop.update(baseState({ alpha: 0.9 }));
    expect(calls.length).toBe(2);
    calls[1]!.deferred.resolve(pngResponse("ok"));
    await flush();
    expect(frames.length).toBe(1);
  });

  it("notifies when a decoupled observer had to be clamped", async () => {
    const { fetchFn, calls } = deferredFetch();
    const clamps: unknown[] = [];
    const scheduler = new ManualScheduler();
    const loop = new FrameLoop({
      origin: "http://service.test",
      aabb: AABB,
      onFrame: () => {},
      onError: () => {},
      onClamp: (clamped) => clamps.push(clamped),
      fetchFn,
      setTimer: scheduler.setTimer,
      clearTimer: scheduler.clearTimer,
    });
    loop.update(baseState({ coupled: false, observer: [9, 0, 1] }));
    expect(clamps).toEqual([[2, 0, 1]]);
    expect((calls[0]!.body as FrameRequest).observer).toEqual([2, 0, 1]);
    loop.dispose();
  });
});

describe("coupled occlusion toggle (recorded fixtures)", () => {
  interface ToggleFixture {
    camera: FrameRequest["camera"];
    resolution: [number, number];
    occlusion_on: { request: FrameRequest; headers: Record<string, string>; png_base64: string };
    occlusion_off: { request: FrameRequest; headers: Record<string, string>; png_base64: string };
  }

  const TOGGLE = loadFixture<ToggleFixture>("coupled_toggle.json");

  function fixtureService(): typeof fetch {
    return (async (_url: RequestInfo | URL, init?: RequestInit) => {
      const body = JSON.parse(init!.body as string) as FrameRequest;
      const entry = body.occlusion ? TOGGLE.occlusion_on : TOGGLE.occlusion_off;
      expect(body).toEqual(entry.request);
      return new Response(decodeBase64(entry.png_base64), {
        status: 200,
        headers: { "content-type": "image/png", "X-Render-Ms": "1", ...entry.headers },
      });
    }) as typeof fetch;
  }

  it("leaves the displayed frame byte-identical when toggling occlusion", async () => {
    const { loop, frames } = makeLoop(fixtureService());
    const coupled = baseState({
      coupled: true,
      camera: {
        position: TOGGLE.camera.position,
        lookAt: TOGGLE.camera.look_at,
        up: TOGGLE.camera.up,
        fovDeg: TOGGLE.camera.fov_deg,
      },
      resolution: TOGGLE.resolution,
      occlusion: true,
    });

    loop.update(coupled);
    await flush();
    loop.update({ ...coupled, occlusion: false });
    await flush();

    expect(frames.length).toBe(2);
    expect(frames[0]!.request.occlusion).toBe(true);
    expect(frames[1]!.request.occlusion).toBe(false);
    // the only difference between the two requests is the occlusion flag
    expect({ ...frames[0]!.request, occlusion: null }).toEqual({
      ...frames[1]!.request,
      occlusion: null,
    });

    const first = new Uint8Array(await frames[0]!.blob.arrayBuffer());
    const second = new Uint8Array(await frames[1]!.blob.arrayBuffer());
    expect(first.length).toBe(second.length);
    expect(first).toEqual(second);
    // and the served gaze range is identical too
    expect(frames[0]!.headers.gazeMax).toBe(frames[1]!.headers.gazeMax);
    expect(frames[0]!.headers.gazeMin).toBe(frames[1]!.headers.gazeMin);
  });

  it("records genuinely different requests, not a replayed one", () => {
    expect(TOGGLE.occlusion_on.request.occlusion).toBe(true);
    expect(TOGGLE.occlusion_off.request.occlusion).toBe(false);
    expect(TOGGLE.occlusion_on.request.observer).toBe("coupled");
    expect(TOGGLE.occlusion_on.png_base64).toBe(TOGGLE.occlusion_off.png_base64);
  });
});
