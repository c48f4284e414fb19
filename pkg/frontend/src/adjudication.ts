// Adjudication view-model: human-vs-model discrepancies, reveal-gated
// model reasoning, final verdict drafts, and the transition summary.

import { ApiClient, ApiError } from "./api";
import type { AdjudicationInput, Discrepancy, MetricsResponse, Verdict } from "./types";

export interface AdjudicationDraft {
  finalVerdict?: Verdict;
  note: string;
  revealed: boolean;
}

export function discrepancyKey(d: { patient_id: string; nct_id: string; node_id: string }): string {
  return `${d.patient_id}|${d.nct_id}|${d.node_id}`;
}

export class AdjudicationController {
  discrepancies: Discrepancy[] = [];
  drafts = new Map<string, AdjudicationDraft>();
  metrics: MetricsResponse | null = null;
  /** set when the server rejects keys, meaning annotations moved under us */
  staleRun = false;
  loaded = false;

  constructor(readonly runId: string) {}

  async load(api: ApiClient): Promise<void> {
    this.discrepancies = await api.getDiscrepancies(this.runId);
    this.metrics = await api.getMetrics(this.runId);
    for (const d of this.discrepancies) {
      const key = discrepancyKey(d);
      if (!this.drafts.has(key)) {
        this.drafts.set(key, { note: "", revealed: false });
      }
    }
    this.staleRun = false;
    this.loaded = true;
  }

  draftFor(d: Discrepancy): AdjudicationDraft {
    const key = discrepancyKey(d);
    let draft = this.drafts.get(key);
    if (!draft) {
      draft = { note: "", revealed: false };
      this.drafts.set(key, draft);
    }
    return draft;
  }

  /** model reasoning stays hidden until the adjudicator asks for it */
  reveal(d: Discrepancy): void {
    this.draftFor(d).revealed = true;
  }

  setFinalVerdict(d: Discrepancy, verdict: Verdict): void {
    this.draftFor(d).finalVerdict = verdict;
  }

  setNote(d: Discrepancy, note: string): void {
    this.draftFor(d).note = note;
  }

  get decidedCount(): number {
    return this.discrepancies.filter((d) => this.draftFor(d).finalVerdict !== undefined).length;
  }

  buildDecided(): AdjudicationInput[] {
    const decided: AdjudicationInput[] = [];
    for (const d of this.discrepancies) {
      const draft = this.draftFor(d);
      if (draft.finalVerdict === undefined) continue;
      decided.push({
        patient_id: d.patient_id,
        nct_id: d.nct_id,
        node_id: d.node_id,
        verdict: draft.finalVerdict,
        note: draft.note, // optional; empty notes are allowed
      });
    }
    return decided;
  }

  /**
   * POST the decided subset, then refresh the transition summary. A 422
   * (key no longer discrepant) marks the run stale so the view can prompt
   * for a reload.
   */
  async submit(api: ApiClient): Promise<number> {
    const decided = this.buildDecided();
    if (decided.length === 0) return 0;
    try {
      const response = await api.postAdjudications(this.runId, decided);
      this.metrics = await api.getMetrics(this.runId);
      return response.applied;
    } catch (err) {
      if (err instanceof ApiError && err.status === 422) {
        this.staleRun = true;
      }
      throw err;
    }
  }
}
