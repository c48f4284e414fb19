// Wire types mirroring the trialmatch HTTP API.

export type Verdict = "ELIGIBLE" | "INELIGIBLE" | "UNKNOWN";

export const VERDICTS: Verdict[] = ["ELIGIBLE", "INELIGIBLE", "UNKNOWN"];

export const VERDICT_LABELS: Record<Verdict, string> = {
  ELIGIBLE: "eligible",
  INELIGIBLE: "not eligible",
  UNKNOWN: "unknown",
};

export interface PatientSummary {
  patient_id: string;
  label: string | null;
}

export interface Patient extends PatientSummary {
  ehr_text: string;
}

export interface TrialRecord {
  nct_id: string;
  title_brief: string;
  title_official: string;
  summary_brief: string;
  description_detailed: string;
  eligibility_text: string;
  status: string;
  conditions: string[];
}

export interface CriterionNode {
  node_id: string;
  text: string;
  kind: "LEAF" | "GROUP";
  side: "INCLUSION" | "EXCLUSION";
  connector?: "ALL" | "ANY";
  children?: CriterionNode[];
}

export interface CriteriaTree {
  inclusion: CriterionNode | null;
  exclusion: CriterionNode | null;
}

export interface VerdictRecord {
  node_id: string;
  verdict: Verdict;
  reasoning: string;
}

export interface TrialScore {
  n_eligible: number;
  n_ineligible: number;
  n_unknown: number;
  fulfilled_ratio: number | null;
}

export interface TrialDetail {
  nct_id: string;
  distance: number;
  best_seq: number;
  decision: "keep" | "discard" | "undecided";
  decision_reasoning: string;
  criteria: CriteriaTree | null;
  verdicts: VerdictRecord[];
  score: TrialScore | null;
  criteria_error: string | null;
}

export interface StageInfo {
  count: number;
  ids: string[];
}

export interface MatchReport {
  patient_id: string;
  instruction: string;
  queries: string[];
  stages: { prefiltered: StageInfo; retrieved: StageInfo; final: StageInfo };
  ranking: string[];
  trials: TrialDetail[];
  warnings: string[];
  failed_stage: string | null;
  error: string | null;
}

export interface AnnotationInput {
  patient_id: string;
  nct_id: string;
  node_id: string;
  annotator_id: string;
  verdict: Verdict;
  timestamp?: string;
}

export interface Discrepancy {
  patient_id: string;
  nct_id: string;
  node_id: string;
  criterion_text: string;
  reference_verdict: Verdict;
  tie_flag: boolean;
  model_verdict: Verdict;
  model_reasoning: string;
}

export interface AdjudicationInput {
  patient_id: string;
  nct_id: string;
  node_id: string;
  verdict: Verdict;
  note?: string;
}

export interface RateRecord {
  numerator: number;
  denominator: number;
  value: number | null;
}

export interface TransitionMatrixRecord {
  order: Verdict[];
  counts: number[][];
  total: number;
  unchanged: number;
  changed: number;
  acceptance_rate: RateRecord;
}

export interface EvaluationRecord {
  n_total: number;
  n_agree: number;
  accuracy_overall: RateRecord;
  accuracy_inclusion: RateRecord;
  accuracy_exclusion: RateRecord;
  accuracy_true_false: RateRecord;
  accuracy_no_ai_na: RateRecord;
  transition_matrix: TransitionMatrixRecord;
}

export interface MetricsResponse {
  run_id: string;
  baseline: EvaluationRecord | null;
  refined: EvaluationRecord | null;
  transition_matrix: TransitionMatrixRecord | null;
  note?: string;
}

export interface Violation {
  path: string;
  message: string;
}

/**
 * Criterion rows shown for annotation: every node of both trees except the
 * implicit side roots, in tree walk order. Each row maps to exactly one
 * node_id present in the MatchReport.
 */
export function annotatableNodes(trial: TrialDetail): CriterionNode[] {
  const rows: CriterionNode[] = [];
  const walk = (node: CriterionNode | null | undefined, isRoot: boolean) => {
    if (!node) return;
    if (!isRoot) rows.push(node);
    for (const child of node.children ?? []) walk(child, false);
  };
  walk(trial.criteria?.inclusion, true);
  walk(trial.criteria?.exclusion, true);
  return rows;
}
