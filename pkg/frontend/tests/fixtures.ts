// Report/patient/trial fixtures shaped like real service responses.

import type { CriterionNode, MatchReport, Patient, TrialDetail, TrialRecord } from "../src/types";

export const NCT = "NCT02227251";

function leaf(nodeId: string, text: string, side: "INCLUSION" | "EXCLUSION"): CriterionNode {
  return { node_id: nodeId, text, kind: "LEAF", side };
}

export function criteriaTree(withExclusion = true): TrialDetail["criteria"] {
  const inclusionChildren: CriterionNode[] = [
    leaf("inc.1", "Histologically confirmed diffuse large B-cell lymphoma", "INCLUSION"),
    leaf("inc.2", "ECOG performance status of 0 or 1", "INCLUSION"),
    {
      node_id: "inc.3",
      text: "Adequate hematopoietic function:",
      kind: "GROUP",
      side: "INCLUSION",
      connector: "ALL",
      children: [
        leaf("inc.3.1", "absolute neutrophil count (ANC) >= 1000/mm3", "INCLUSION"),
        leaf("inc.3.2", "platelet count >= 75,000/mm3", "INCLUSION"),
        leaf("inc.3.3", "hemoglobin >= 8 g/dL", "INCLUSION"),
      ],
    },
    leaf("inc.4", "Relapsed or refractory disease after at least two prior therapies", "INCLUSION"),
    leaf("inc.5", "Estimated creatinine clearance of >= 30 mL/min", "INCLUSION"),
  ];
  const exclusionChildren: CriterionNode[] = [
    leaf("exc.1", "Known central nervous system lymphoma", "EXCLUSION"),
    leaf("exc.2", "Pregnant or lactating women", "EXCLUSION"),
  ];
  return {
    inclusion: {
      node_id: "inc",
      text: "",
      kind: "GROUP",
      side: "INCLUSION",
      connector: "ALL",
      children: inclusionChildren,
    },
    exclusion: withExclusion
      ? {
          node_id: "exc",
          text: "",
          kind: "GROUP",
          side: "EXCLUSION",
          connector: "ALL",
          children: exclusionChildren,
        }
      : null,
  };
}

export function makeReport(withExclusion = true): MatchReport {
  const criteria = criteriaTree(withExclusion);
  const nodeIds: string[] = [];
  const walk = (node: CriterionNode | null | undefined, isRoot: boolean) => {
    if (!node) return;
    if (!isRoot) nodeIds.push(node.node_id);
    for (const child of node.children ?? []) walk(child, false);
  };
  walk(criteria?.inclusion, true);
  walk(criteria?.exclusion, true);
  const trial: TrialDetail = {
    nct_id: NCT,
    distance: 0.12,
    best_seq: 0,
    decision: "keep",
    decision_reasoning: "population matches",
    criteria,
    verdicts: nodeIds.map((node_id) => ({ node_id, verdict: "ELIGIBLE", reasoning: `model says ${node_id}` })),
    score: { n_eligible: nodeIds.length, n_ineligible: 0, n_unknown: 0, fulfilled_ratio: 1.0 },
    criteria_error: null,
  };
  return {
    patient_id: "1.1",
    instruction: "",
    queries: ["q"],
    stages: {
      prefiltered: { count: 3, ids: [NCT, "NCT00000002", "NCT00000003"] },
      retrieved: { count: 2, ids: [NCT, "NCT00000002"] },
      final: { count: 1, ids: [NCT] },
    },
    ranking: [NCT],
    trials: [trial],
    warnings: [],
    failed_stage: null,
    error: null,
  };
}

export const PATIENT: Patient = {
  patient_id: "1.1",
  label: "Emily Johnson",
  ehr_text: "Patient Information\nDiagnosis: relapsed DLBCL after two prior lines.\nECOG 1.",
};

export const TRIAL_RECORD: TrialRecord = {
  nct_id: NCT,
  title_brief: "Selinexor (KPT-330) in Patients With Relapsed/Refractory DLBCL",
  title_official: "A Phase 2b Study of Selinexor in Relapsed/Refractory DLBCL",
  summary_brief: "Single-arm study of oral selinexor in relapsed or refractory DLBCL.",
  description_detailed: "",
  eligibility_text: "",
  status: "RECRUITING",
  conditions: ["Diffuse Large B-Cell Lymphoma"],
};
