import { describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api";
import {
  AlreadySubmittedError,
  AnnotationSession,
  IncompleteDraftError,
  MemoryStorage,
  mapViolationsToRows,
} from "../src/session";

const KEY = { annotatorId: "ann-1", runId: "run-0001", patientId: "fp-01", nctId: "NCT00000001" };
const NODES = Array.from({ length: 10 }, (_, i) => `inc.${i + 1}`);

function apiReturning(handler: (path: string, init?: RequestInit) => Promise<Response>): ApiClient {
  return new ApiClient("", handler);
}

describe("AnnotationSession", () => {
  it("starts with no default verdicts", () => {
    const session = new AnnotationSession(KEY, NODES, new MemoryStorage());
    expect(session.progress).toEqual({ done: 0, total: 10 });
    expect(session.isComplete).toBe(false);
    for (const nodeId of NODES) expect(session.verdictFor(nodeId)).toBeUndefined();
  });

  it("persists drafts across reloads until submitted", () => {
    const storage = new MemoryStorage();
    const first = new AnnotationSession(KEY, NODES, storage);
    first.setVerdict("inc.1", "ELIGIBLE");
    first.setVerdict("inc.2", "UNKNOWN");

    const reloaded = new AnnotationSession(KEY, NODES, storage);
    expect(reloaded.verdictFor("inc.1")).toBe("ELIGIBLE");
    expect(reloaded.verdictFor("inc.2")).toBe("UNKNOWN");
    expect(reloaded.progress).toEqual({ done: 2, total: 10 });
  });

  it("tracks progress and blocks incomplete submission", async () => {
    const session = new AnnotationSession(KEY, NODES, new MemoryStorage());
    for (const nodeId of NODES.slice(0, 3)) session.setVerdict(nodeId, "ELIGIBLE");
    expect(session.progress).toEqual({ done: 3, total: 10 });
    const api = apiReturning(async () => {
      throw new Error("must not be called");
    });
    await expect(session.submit(api)).rejects.toBeInstanceOf(IncompleteDraftError);
  });

  it("submits one batch in node order and clears the draft", async () => {
    const storage = new MemoryStorage();
    const session = new AnnotationSession(KEY, NODES, storage);
    for (const nodeId of NODES) session.setVerdict(nodeId, "ELIGIBLE");

    const calls: { path: string; body: unknown }[] = [];
    const api = apiReturning(async (path, init) => {
      calls.push({ path, body: JSON.parse(String(init?.body)) });
      return new Response(JSON.stringify({ accepted: 10 }), { status: 200 });
    });

    const accepted = await session.submit(api);
    expect(accepted).toBe(10);
    expect(calls).toHaveLength(1);
    expect(calls[0].path).toBe("/annotations?run_id=run-0001");
    const batch = calls[0].body as { node_id: string; annotator_id: string }[];
    expect(batch.map((r) => r.node_id)).toEqual(NODES);
    expect(storage.getItem(session.storageKey)).toBeNull();
    expect(session.submitted).toBe(true);
  });

  it("never mutates verdicts client-side after submission", async () => {
    const session = new AnnotationSession(KEY, NODES, new MemoryStorage());
    for (const nodeId of NODES) session.setVerdict(nodeId, "ELIGIBLE");
    const api = apiReturning(async () => new Response(JSON.stringify({ accepted: 10 }), { status: 200 }));
    await session.submit(api);
    expect(() => session.setVerdict("inc.1", "INELIGIBLE")).toThrow(AlreadySubmittedError);
    await expect(session.submit(api)).rejects.toBeInstanceOf(AlreadySubmittedError);
  });

  it("retains the draft on network failure", async () => {
    const storage = new MemoryStorage();
    const session = new AnnotationSession(KEY, NODES, storage);
    for (const nodeId of NODES) session.setVerdict(nodeId, "UNKNOWN");
    const api = apiReturning(async () => {
      throw new TypeError("fetch failed");
    });
    await expect(session.submit(api)).rejects.toSatisfy(
      (err: unknown) => err instanceof ApiError && err.isNetworkFailure,
    );
    expect(session.submitted).toBe(false);
    expect(storage.getItem(session.storageKey)).not.toBeNull();
    const restored = new AnnotationSession(KEY, NODES, storage);
    expect(restored.progress.done).toBe(10);
  });

  it("surfaces a server 409 as already submitted", async () => {
    const session = new AnnotationSession(KEY, NODES, new MemoryStorage());
    for (const nodeId of NODES) session.setVerdict(nodeId, "ELIGIBLE");
    const api = apiReturning(
      async () => new Response(JSON.stringify({ error: "duplicate annotation" }), { status: 409 }),
    );
    await expect(session.submit(api)).rejects.toBeInstanceOf(AlreadySubmittedError);
  });

  it("rejects verdicts for unknown criterion nodes", () => {
    const session = new AnnotationSession(KEY, NODES, new MemoryStorage());
    expect(() => session.setVerdict("exc.999", "ELIGIBLE")).toThrow(/unknown criterion node/);
  });
});

describe("mapViolationsToRows", () => {
  it("maps list paths onto batch rows", () => {
    const rows = mapViolationsToRows(
      [{ path: "[4].verdict", message: "'maybe' is not one of [...]" }],
      NODES,
    );
    expect(rows).toEqual([{ nodeId: "inc.5", field: "verdict", message: "'maybe' is not one of [...]" }]);
  });

  it("passes through record paths without a row", () => {
    const rows = mapViolationsToRows([{ path: ".verdict", message: "bad" }], NODES);
    expect(rows[0]).toEqual({ nodeId: null, field: "verdict", message: "bad" });
  });
});

describe("ApiClient error mapping", () => {
  it("collects violation paths from 422 responses", async () => {
    const api = apiReturning(
      async () =>
        new Response(
          JSON.stringify({ error: "validation", violations: [{ path: "[0].verdict", message: "nope" }] }),
          { status: 422 },
        ),
    );
    const err = await api
      .postAnnotations("run-0001", [])
      .then(() => null)
      .catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).status).toBe(422);
    expect((err as ApiError).violations).toEqual([{ path: "[0].verdict", message: "nope" }]);
  });

  it("wraps fetch rejections as network failures", async () => {
    const api = apiReturning(async () => Promise.reject(new TypeError("offline")));
    const err = await api.getMetrics("run-0001").catch((e: unknown) => e);
    expect(err).toBeInstanceOf(ApiError);
    expect((err as ApiError).isNetworkFailure).toBe(true);
  });
});
