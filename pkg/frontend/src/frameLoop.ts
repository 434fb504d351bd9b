/**
 * Latest-wins frame fetching.
 *
 * At most one request is on the wire at a time. State updates that arrive
 * while one is in flight only overwrite the "latest" slot; when the
 * response lands, one trailing request for the latest state goes out. A
 * burst of drag events therefore costs a handful of requests, and a stale
 * frame can never paint over a newer one: every request carries a sequence
 * number and only frames newer than the last displayed are shown.
 *
 * Interactive-tier states (degraded resolution while dragging) are
 * re-rendered at the full tier once updates go idle for `settleMs`.
 * Network failures and 429/503 retry the latest state with exponential
 * backoff; other 4xx are surfaced with their field messages and wait for
 * the next state change instead of retrying.
 */

import { postFrame, ServiceError } from "./api.js";
import type { FrameResponse } from "./api.js";
import { observerClamped, stateToRequest } from "./state.js";
import type { ViewerState } from "./state.js";
import type { Aabb, FrameHeaders, FrameRequest, Vec3 } from "./types.js";

export interface DisplayedFrame {
  seq: number;
  blob: Blob;
  headers: FrameHeaders;
  request: FrameRequest;
  state: ViewerState;
}

export interface FrameLoopOptions {
  origin: string;
  aabb: Aabb;
  onFrame: (frame: DisplayedFrame) => void;
  onError: (error: Error) => void;
  /** Called when serialization moved the observer back inside the box. */
  onClamp?: (clamped: Vec3) => void;
  fetchFn?: typeof fetch;
  setTimer?: (fn: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
  settleMs?: number;
  retryBaseMs?: number;
  retryMaxMs?: number;
}

interface PendingState {
  state: ViewerState;
  seq: number;
}

const RETRYABLE = new Set([429, 503]);

export class FrameLoop {
  private readonly opts: Required<Pick<FrameLoopOptions, "settleMs" | "retryBaseMs" | "retryMaxMs">> &
    FrameLoopOptions;
  private latest: PendingState | null = null;
  private inFlightSeq: number | null = null;
  private displayedSeq = 0;
  private stateSeq = 0;
  private retryAttempt = 0;
  private retryTimer: unknown = null;
  private settleTimer: unknown = null;
  private disposed = false;

  constructor(options: FrameLoopOptions) {
    this.opts = {
      settleMs: 250,
      retryBaseMs: 500,
      retryMaxMs: 8000,
      ...options,
    };
  }

  /** Sequence number of the request currently on the wire, if any. */
  get inFlight(): number | null {
    return this.inFlightSeq;
  }

  /** Record a new state; it is fetched now or as soon as the wire frees up. */
  update(state: ViewerState): void {
    if (this.disposed) return;
    this.stateSeq += 1;
    this.latest = { state, seq: this.stateSeq };
    this.cancelSettle();
    if (this.inFlightSeq === null && this.retryTimer === null) {
      void this.send(this.latest);
    }
  }

  dispose(): void {
    this.disposed = true;
    this.cancelSettle();
    this.cancelRetry();
  }

  private setTimer(fn: () => void, ms: number): unknown {
    return (this.opts.setTimer ?? ((f, m) => setTimeout(f, m)))(fn, ms);
  }

  private clearTimer(handle: unknown): void {
    (this.opts.clearTimer ?? ((h) => clearTimeout(h as ReturnType<typeof setTimeout>)))(handle);
  }

  private cancelSettle(): void {
    if (this.settleTimer !== null) {
      this.clearTimer(this.settleTimer);
      this.settleTimer = null;
    }
  }

  private cancelRetry(): void {
    if (this.retryTimer !== null) {
      this.clearTimer(this.retryTimer);
      this.retryTimer = null;
    }
  }

  private async send(pending: PendingState): Promise<void> {
    this.inFlightSeq = pending.seq;
    const state: ViewerState = { ...pending.state, inFlight: pending.seq };
    const request = stateToRequest(state, this.opts.aabb);
    if (this.opts.onClamp && observerClamped(state, this.opts.aabb)) {
      this.opts.onClamp(request.observer as Vec3);
    }
    let response: FrameResponse;
    try {
      response = await postFrame(this.opts.origin, request, this.opts.fetchFn ?? fetch);
    } catch (error) {
      this.inFlightSeq = null;
      if (!this.disposed) this.handleFailure(error as Error);
      return;
    }
    this.inFlightSeq = null;
    if (this.disposed) return;
    this.retryAttempt = 0;
    if (pending.seq > this.displayedSeq) {
      this.displayedSeq = pending.seq;
      this.opts.onFrame({
        seq: pending.seq,
        blob: response.blob,
        headers: response.headers,
        request,
        state,
      });
    }
    const latest = this.latest;
    if (latest && latest.seq > pending.seq) {
      void this.send(latest);
    } else if (state.tier === "interactive") {
      this.scheduleSettle(pending.seq);
    }
  }

  /** After settleMs of idleness, re-render the last state at full tier. */
  private scheduleSettle(seq: number): void {
    this.cancelSettle();
    this.settleTimer = this.setTimer(() => {
      this.settleTimer = null;
      const latest = this.latest;
      if (latest && latest.seq === seq && latest.state.tier === "interactive") {
        this.update({ ...latest.state, tier: "full" });
      }
    }, this.opts.settleMs);
  }

  private handleFailure(error: Error): void {
    this.opts.onError(error);
    const retryable = !(error instanceof ServiceError) || RETRYABLE.has(error.status);
    if (!retryable) return;
    this.retryAttempt += 1;
    const delay = Math.min(
      this.opts.retryMaxMs,
      this.opts.retryBaseMs * 2 ** (this.retryAttempt - 1),
    );
    this.retryTimer = this.setTimer(() => {
      this.retryTimer = null;
      if (this.latest && this.inFlightSeq === null) {
        void this.send(this.latest);
      }
    }, delay);
  }
}
