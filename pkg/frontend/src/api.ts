// Typed client for the trialmatch HTTP API. The UI talks to the server
// exclusively through this module; no direct store access.

import type {
  AdjudicationInput,
  AnnotationInput,
  Discrepancy,
  MatchReport,
  MetricsResponse,
  Patient,
  PatientSummary,
  TransitionMatrixRecord,
  TrialRecord,
  Violation,
} from "./types";

export class ApiError extends Error {
  constructor(
    public status: number,
    message: string,
    public violations: Violation[] = [],
  ) {
    super(message);
    this.name = "ApiError";
  }

  /** status 0 means the request never reached the server */
  get isNetworkFailure(): boolean {
    return this.status === 0;
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: FetchLike = (input, init) => globalThis.fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchFn(this.baseUrl + path, init);
    } catch (err) {
      throw new ApiError(0, `network failure: ${String(err)}`);
    }
    let body: unknown = null;
    try {
      body = await response.json();
    } catch {
      body = null;
    }
    if (!response.ok) {
      const record = (body ?? {}) as { error?: string; violations?: Violation[] };
      throw new ApiError(response.status, record.error ?? `HTTP ${response.status}`, record.violations ?? []);
    }
    return body as T;
  }

  private post<T>(path: string, payload: unknown): Promise<T> {
    return this.request<T>(path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(payload),
    });
  }

  getPatients(): Promise<PatientSummary[]> {
    return this.request("/patients");
  }

  getPatient(patientId: string): Promise<Patient> {
    return this.request(`/patients/${encodeURIComponent(patientId)}`);
  }

  getTrial(nctId: string): Promise<TrialRecord> {
    return this.request(`/trials/${encodeURIComponent(nctId)}`);
  }

  listRuns(): Promise<{ runs: string[] }> {
    return this.request("/runs");
  }

  getMatch(runId: string): Promise<MatchReport> {
    return this.request(`/matches/${encodeURIComponent(runId)}`);
  }

  postMatch(patientId: string, instruction = ""): Promise<{ run_id: string }> {
    return this.post("/match", { patient_id: patientId, instruction });
  }

  postAnnotations(runId: string, batch: AnnotationInput[]): Promise<{ accepted: number }> {
    return this.post(`/annotations?run_id=${encodeURIComponent(runId)}`, batch);
  }

  getDiscrepancies(runId: string): Promise<Discrepancy[]> {
    return this.request(`/discrepancies?run_id=${encodeURIComponent(runId)}`);
  }

  postAdjudications(
    runId: string,
    adjudications: AdjudicationInput[],
  ): Promise<{ applied: number; transition_matrix: TransitionMatrixRecord }> {
    return this.post("/adjudications", { run_id: runId, adjudications });
  }

  getMetrics(runId: string): Promise<MetricsResponse> {
    return this.request(`/metrics?run_id=${encodeURIComponent(runId)}`);
  }
}
