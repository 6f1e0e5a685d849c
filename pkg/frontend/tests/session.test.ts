import { afterEach, beforeEach, describe, expect, it, vi } from "vitest";

import { ApiClient, EditSession } from "../src/index.js";
import { MOCK_CONFIG, MockService } from "./mock.js";

function makeSession(service: MockService, onToast?: (m: string) => void) {
  const client = new ApiClient("http://mock", service.fetch);
  const session = new EditSession("alice", MOCK_CONFIG, client, { seed: 1, onToast });
  session.setBase(service.baseImage("alice"));
  return session;
}

describe("EditSession", () => {
  beforeEach(() => {
    vi.useFakeTimers();
  });
  afterEach(() => {
    vi.useRealTimers();
  });

  it("collapses a rapid 10-event drag into at most 2 requests, last value wins", async () => {
    const service = new MockService();
    const session = makeSession(service);
    for (let i = 1; i <= 10; i++) {
      session.commitSlider("smile", i * 0.1);
      await vi.advanceTimersByTimeAsync(20);
    }
    await vi.advanceTimersByTimeAsync(1000);
    const edits = service.requests.filter((r) => r.path === "/edit");
    expect(edits.length).toBeLessThanOrEqual(2);
    expect(edits.length).toBeGreaterThan(0);
    const last = edits[edits.length - 1].body;
    expect(last.directions.smile).toBeCloseTo(1.0, 12);
    expect(session.sliders.smile).toBeCloseTo(1.0, 12);
  });

  it("zero-edit preview equals the base artifact hash", async () => {
    const service = new MockService();
    const session = makeSession(service);
    const base = session.preview!;
    session.commitSlider("smile", 0);
    await vi.advanceTimersByTimeAsync(1000);
    expect(session.preview!.raw).toBe(base.raw);
    expect(session.preview!.png).toBe(base.png);
  });

  it("sends exactly one request carrying the committed value", async () => {
    const service = new MockService();
    const session = makeSession(service);
    session.commitSlider("smile", 1.5);
    await vi.advanceTimersByTimeAsync(1000);
    const edits = service.requests.filter((r) => r.path === "/edit");
    expect(edits.length).toBe(1);
    expect(edits[0].body.subject_id).toBe("alice");
    expect(edits[0].body.directions.smile).toBe(1.5);
  });

  it("round-trips the slider map losslessly through the request body", async () => {
    const service = new MockService();
    const session = makeSession(service);
    session.commitSlider("smile", 1.25);
    session.commitSlider("age", -0.5);
    await vi.advanceTimersByTimeAsync(1000);
    const sent = service.requests.filter((r) => r.path === "/edit").at(-1)!.body.directions;
    expect(sent).toEqual(session.sliders);
    expect(JSON.parse(JSON.stringify(sent))).toEqual(session.sliders);
  });

  it("keeps a single request in flight and follows up once", async () => {
    const service = new MockService();
    // Stall job polling so the first edit stays in flight.
    let release!: () => void;
    const gate = new Promise<void>((r) => (release = r));
    const originalFetch = service.fetch;
    service.fetch = async (url, init) => {
      if (String(url).includes("/jobs/")) await gate;
      return originalFetch(url, init);
    };
    const session = makeSession(service);
    session.commitSlider("smile", 0.5);
    await vi.advanceTimersByTimeAsync(300);
    expect(service.editRequestCount()).toBe(1);
    // Commits while in flight must not dispatch immediately.
    session.commitSlider("smile", 2.0);
    await vi.advanceTimersByTimeAsync(300);
    expect(service.editRequestCount()).toBe(1);
    release();
    await vi.advanceTimersByTimeAsync(1000);
    const edits = service.requests.filter((r) => r.path === "/edit");
    expect(edits.length).toBe(2);
    expect(edits[1].body.directions.smile).toBe(2.0);
  });

  it("appends history and replays exact slider maps", async () => {
    const service = new MockService();
    const session = makeSession(service);
    session.commitSlider("smile", 1.0);
    await vi.advanceTimersByTimeAsync(1000);
    session.commitSlider("age", -2.0);
    await vi.advanceTimersByTimeAsync(1000);
    expect(session.history.length).toBe(2);
    const first = session.history[0];
    const firstSliders = { ...first.sliders };
    session.replay(0);
    expect(session.sliders).toEqual(firstSliders);
    expect(session.preview).toBe(first.image);
    // History is append-only; replay does not rewrite it.
    expect(session.history.length).toBe(2);
    expect(session.history[0].sliders).toEqual(firstSliders);
    // Mutating the live sliders afterwards leaves the history entry intact.
    session.sliders.smile = 99 as any;
    expect(session.history[0].sliders.smile).toBe(firstSliders.smile);
  });

  it("rejects out-of-range, non-finite, and unknown sliders", () => {
    const service = new MockService();
    const session = makeSession(service);
    expect(() => session.commitSlider("smile", 3.5)).toThrow(/beta/);
    expect(() => session.commitSlider("smile", Number.NaN)).toThrow(/beta/);
    expect(() => session.commitSlider("frown", 1.0)).toThrow(/unknown direction/);
    expect(service.editRequestCount()).toBe(0);
  });

  it("keeps preview and history unchanged on service failure, raising a toast", async () => {
    const service = new MockService();
    service.failEdit = "backend exploded";
    const toasts: string[] = [];
    const session = makeSession(service, (m) => toasts.push(m));
    const base = session.preview!;
    session.commitSlider("smile", 1.0);
    await vi.advanceTimersByTimeAsync(1000);
    expect(toasts.length).toBe(1);
    expect(toasts[0]).toContain("backend exploded");
    expect(session.preview).toBe(base);
    expect(session.history.length).toBe(0);
  });
});
