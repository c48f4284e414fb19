// Integration against a live fixture server: the Python service is built
// and started via its own CLI; the UI layers talk to it over real HTTP.

import { ChildProcess, execFileSync, spawn } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { AdjudicationController } from "../src/adjudication";
import { ApiClient } from "../src/api";
import { AnnotationSession, MemoryStorage } from "../src/session";
import { annotatableNodes, type MatchReport, type Verdict } from "../src/types";

const PORT = 18731;
const BASE = `http://127.0.0.1:${PORT}`;

let workdir: string;
let server: ChildProcess | null = null;
let api: ApiClient;
let runId: string;
let report: MatchReport;
let nctId: string;
let nodeIds: string[];

const DIFFER_INELIGIBLE = ["inc.1", "inc.2", "inc.3.1"];
const DIFFER_UNKNOWN = ["exc.1", "inc.4"];

function py(args: string[], cwd: string): string {
  return execFileSync("python3", args, { cwd, encoding: "utf-8" });
}

async function waitForHealth(deadlineMs: number): Promise<void> {
  const start = Date.now();
  for (;;) {
    try {
      const response = await fetch(`${BASE}/health`);
      if (response.ok) return;
    } catch {
      // not up yet
    }
    if (Date.now() - start > deadlineMs) {
      throw new Error("fixture server did not come up in time");
    }
    await new Promise((resolve) => setTimeout(resolve, 300));
  }
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), "trialmatch-ui-"));
  py(["-c", `from trialmatch.fixtures import write_fixture_workspace; write_fixture_workspace(${JSON.stringify(workdir)})`], workdir);
  py(["-m", "trialmatch.cli", "ingest", join(workdir, "trials.ndjson"), "--out", join(workdir, "store")], workdir);
  py(["-m", "trialmatch.cli", "index", "--store", join(workdir, "store"), "--config", join(workdir, "config.json")], workdir);
  const matchOut = py(
    ["-m", "trialmatch.cli", "match", "--patient", "fp-01", "--config", join(workdir, "config.json")],
    workdir,
  );
  runId = (JSON.parse(matchOut.trim().split("\n").pop() as string) as { run_id: string }).run_id;

  server = spawn(
    "python3",
    ["-m", "trialmatch.cli", "serve", "--config", join(workdir, "config.json"), "--port", String(PORT)],
    { stdio: "ignore" },
  );
  await waitForHealth(60000);

  api = new ApiClient(BASE);
  report = await api.getMatch(runId);
  nctId = report.ranking[0];
  const trial = report.trials.find((t) => t.nct_id === nctId)!;
  nodeIds = annotatableNodes(trial).map((n) => n.node_id);
}, 120000);

afterAll(() => {
  if (server) server.kill("SIGTERM");
  if (workdir) rmSync(workdir, { recursive: true, force: true });
});

function sessionFor(annotatorId: string): AnnotationSession {
  return new AnnotationSession(
    { annotatorId, runId, patientId: "fp-01", nctId },
    nodeIds,
    new MemoryStorage(),
  );
}

function ballotFor(annotatorId: string): Record<string, Verdict> {
  const ballot: Record<string, Verdict> = {};
  for (const nodeId of nodeIds) {
    if (annotatorId !== "ann-1" && DIFFER_INELIGIBLE.includes(nodeId)) ballot[nodeId] = "INELIGIBLE";
    else if (annotatorId !== "ann-1" && DIFFER_UNKNOWN.includes(nodeId)) ballot[nodeId] = "UNKNOWN";
    else ballot[nodeId] = "ELIGIBLE";
  }
  return ballot;
}

describe("annotation round-trip against the fixture server", () => {
  it("submits 10 verdicts and sees them in the metrics", async () => {
    expect(nodeIds).toHaveLength(10);
    const session = sessionFor("ann-1");
    const ballot = ballotFor("ann-1");
    for (const nodeId of nodeIds) session.setVerdict(nodeId, ballot[nodeId]);
    expect(session.isComplete).toBe(true);

    const accepted = await session.submit(api);
    expect(accepted).toBe(10);

    const metrics = await api.getMetrics(runId);
    expect(metrics.baseline?.n_total).toBe(10);
    // a single annotator agreeing with the model everywhere
    expect(metrics.baseline?.n_agree).toBe(10);
  });

  it("a second annotator's differing verdicts change the majority", async () => {
    const session = sessionFor("ann-2");
    const ballot = ballotFor("ann-2");
    for (const nodeId of nodeIds) session.setVerdict(nodeId, ballot[nodeId]);
    await session.submit(api);

    // 1-1 splits on the five contested nodes resolve to UNKNOWN (tie)
    const metrics = await api.getMetrics(runId);
    expect(metrics.baseline?.n_total).toBe(10);
    expect(metrics.baseline?.n_agree).toBe(5);

    const discrepancies = await api.getDiscrepancies(runId);
    const contested = [...DIFFER_INELIGIBLE, ...DIFFER_UNKNOWN].sort();
    expect(discrepancies.map((d) => d.node_id).sort()).toEqual(contested);
    for (const d of discrepancies) {
      expect(d.reference_verdict).toBe("UNKNOWN");
      expect(d.tie_flag).toBe(true);
    }
  });

  it("a third annotator settles the majorities for adjudication seeding", async () => {
    const session = sessionFor("ann-3");
    const ballot = ballotFor("ann-3");
    for (const nodeId of nodeIds) session.setVerdict(nodeId, ballot[nodeId]);
    await session.submit(api);

    const discrepancies = await api.getDiscrepancies(runId);
    expect(discrepancies).toHaveLength(5);
    const byNode = new Map(discrepancies.map((d) => [d.node_id, d]));
    for (const nodeId of DIFFER_INELIGIBLE) {
      expect(byNode.get(nodeId)?.reference_verdict).toBe("INELIGIBLE");
      expect(byNode.get(nodeId)?.model_verdict).toBe("ELIGIBLE");
    }
    for (const nodeId of DIFFER_UNKNOWN) {
      expect(byNode.get(nodeId)?.reference_verdict).toBe("UNKNOWN");
    }
  });
});

describe("adjudication flow against the fixture server", () => {
  it("adjudicates the 5 seeded discrepancies into the expected 3x3 matrix", async () => {
    const controller = new AdjudicationController(runId);
    await controller.load(api);
    expect(controller.discrepancies).toHaveLength(5);

    const byNode = new Map(controller.discrepancies.map((d) => [d.node_id, d]));
    // accept the model on one INELIGIBLE-majority and one UNKNOWN-majority node
    controller.reveal(byNode.get("inc.1")!);
    controller.setFinalVerdict(byNode.get("inc.1")!, "ELIGIBLE");
    controller.setNote(byNode.get("inc.1")!, "model reasoning convincing");
    controller.setFinalVerdict(byNode.get("exc.1")!, "ELIGIBLE");
    // keep the prior verdict on the rest (note stays optional)
    controller.setFinalVerdict(byNode.get("inc.2")!, "INELIGIBLE");
    controller.setFinalVerdict(byNode.get("inc.3.1")!, "INELIGIBLE");
    controller.setFinalVerdict(byNode.get("inc.4")!, "UNKNOWN");
    expect(controller.decidedCount).toBe(5);

    const applied = await controller.submit(api);
    expect(applied).toBe(5);

    const matrix = controller.metrics?.transition_matrix;
    expect(matrix).toBeTruthy();
    expect(matrix?.order).toEqual(["ELIGIBLE", "INELIGIBLE", "UNKNOWN"]);
    expect(matrix?.counts).toEqual([
      [0, 0, 0],
      [1, 2, 0],
      [1, 0, 1],
    ]);
    expect(matrix?.total).toBe(5);
    expect(matrix?.changed).toBe(2);
    expect(matrix?.unchanged).toBe(3);
    expect(matrix?.acceptance_rate.value).toBeCloseTo(0.4, 10);

    // metrics reflect the refinement: the two accepted answers now agree
    const metrics = await api.getMetrics(runId);
    expect(metrics.refined?.n_agree).toBe((metrics.baseline?.n_agree ?? 0) + 2);
  });

  it("rejects adjudication of a non-discrepant criterion and flags the run stale", async () => {
    const controller = new AdjudicationController(runId);
    await controller.load(api);
    const agreeing = nodeIds.find((n) => ![...DIFFER_INELIGIBLE, ...DIFFER_UNKNOWN].includes(n))!;
    const fake = {
      patient_id: "fp-01",
      nct_id: nctId,
      node_id: agreeing,
      criterion_text: "",
      reference_verdict: "ELIGIBLE" as const,
      tie_flag: false,
      model_verdict: "ELIGIBLE" as const,
      model_reasoning: "",
    };
    controller.discrepancies.push(fake);
    controller.setFinalVerdict(fake, "INELIGIBLE");
    await expect(controller.submit(api)).rejects.toThrow();
    expect(controller.staleRun).toBe(true);
  });
});
