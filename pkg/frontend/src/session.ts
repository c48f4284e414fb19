// Annotation session state: draft verdicts per criterion node, persisted
// locally until submitted. Selectors start empty (no default verdict) and
// verdicts are never mutated client-side after submission; the server is
// the single source of truth from then on.

import { ApiClient, ApiError } from "./api";
import type { AnnotationInput, Verdict, Violation } from "./types";

export interface StorageLike {
  getItem(key: string): string | null;
  setItem(key: string, value: string): void;
  removeItem(key: string): void;
}

export class MemoryStorage implements StorageLike {
  private data = new Map<string, string>();
  getItem(key: string): string | null {
    return this.data.has(key) ? (this.data.get(key) as string) : null;
  }
  setItem(key: string, value: string): void {
    this.data.set(key, value);
  }
  removeItem(key: string): void {
    this.data.delete(key);
  }
}

export function defaultStorage(): StorageLike {
  try {
    const storage = globalThis.localStorage;
    if (storage) return storage;
  } catch {
    // no DOM storage available
  }
  return new MemoryStorage();
}

export class IncompleteDraftError extends Error {
  constructor(public missingNodeIds: string[]) {
    super(`submission requires a verdict for every criterion; missing ${missingNodeIds.length}`);
    this.name = "IncompleteDraftError";
  }
}

export class AlreadySubmittedError extends Error {
  constructor() {
    super("already submitted");
    this.name = "AlreadySubmittedError";
  }
}

export interface SessionKey {
  annotatorId: string;
  runId: string;
  patientId: string;
  nctId: string;
}

interface PersistedDraft {
  drafts: Record<string, Verdict>;
  submitted: boolean;
}

export class AnnotationSession {
  readonly key: SessionKey;
  readonly nodeIds: string[];
  private drafts: Record<string, Verdict> = {};
  private submittedFlag = false;

  constructor(
    key: SessionKey,
    nodeIds: string[],
    private storage: StorageLike = defaultStorage(),
  ) {
    this.key = key;
    this.nodeIds = [...nodeIds];
    const raw = this.storage.getItem(this.storageKey);
    if (raw) {
      try {
        const persisted = JSON.parse(raw) as PersistedDraft;
        this.submittedFlag = Boolean(persisted.submitted);
        for (const [nodeId, verdict] of Object.entries(persisted.drafts ?? {})) {
          if (this.nodeIds.includes(nodeId)) this.drafts[nodeId] = verdict;
        }
      } catch {
        this.storage.removeItem(this.storageKey);
      }
    }
  }

  get storageKey(): string {
    const { annotatorId, runId, patientId, nctId } = this.key;
    return `trialmatch.draft.${annotatorId}.${runId}.${patientId}.${nctId}`;
  }

  get submitted(): boolean {
    return this.submittedFlag;
  }

  verdictFor(nodeId: string): Verdict | undefined {
    return this.drafts[nodeId];
  }

  setVerdict(nodeId: string, verdict: Verdict): void {
    if (this.submittedFlag) {
      throw new AlreadySubmittedError();
    }
    if (!this.nodeIds.includes(nodeId)) {
      throw new Error(`unknown criterion node ${nodeId}`);
    }
    this.drafts[nodeId] = verdict;
    this.persist();
  }

  get progress(): { done: number; total: number } {
    return { done: Object.keys(this.drafts).length, total: this.nodeIds.length };
  }

  get isComplete(): boolean {
    return this.nodeIds.every((nodeId) => this.drafts[nodeId] !== undefined);
  }

  get missingNodeIds(): string[] {
    return this.nodeIds.filter((nodeId) => this.drafts[nodeId] === undefined);
  }

  buildBatch(): AnnotationInput[] {
    return this.nodeIds.map((nodeId) => ({
      patient_id: this.key.patientId,
      nct_id: this.key.nctId,
      node_id: nodeId,
      annotator_id: this.key.annotatorId,
      verdict: this.drafts[nodeId] as Verdict,
    }));
  }

  /**
   * One batch POST. On success the local draft is cleared and the session
   * locks; on failure (including network loss) the draft stays in storage.
   */
  async submit(api: ApiClient): Promise<number> {
    if (this.submittedFlag) throw new AlreadySubmittedError();
    if (!this.isComplete) throw new IncompleteDraftError(this.missingNodeIds);
    try {
      const response = await api.postAnnotations(this.key.runId, this.buildBatch());
      this.submittedFlag = true;
      this.storage.removeItem(this.storageKey);
      return response.accepted;
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        throw new AlreadySubmittedError();
      }
      throw err; // network failures and 422s keep the draft
    }
  }

  private persist(): void {
    const payload: PersistedDraft = { drafts: this.drafts, submitted: this.submittedFlag };
    this.storage.setItem(this.storageKey, JSON.stringify(payload));
  }
}

const LIST_PATH = /^\[(\d+)\]\.(.+)$/;

/** Map server violation paths like "[3].verdict" onto batch rows. */
export function mapViolationsToRows(
  violations: Violation[],
  nodeIds: string[],
): { nodeId: string | null; field: string; message: string }[] {
  return violations.map((violation) => {
    const match = LIST_PATH.exec(violation.path);
    if (!match) {
      const field = violation.path.startsWith(".") ? violation.path.slice(1) : violation.path;
      return { nodeId: null, field, message: violation.message };
    }
    const index = Number(match[1]);
    return {
      nodeId: index < nodeIds.length ? nodeIds[index] : null,
      field: match[2],
      message: violation.message,
    };
  });
}
