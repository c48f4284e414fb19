"""
Structuring eligibility text and aggregating tri-state verdicts
===============================================================

Drives the gateway with a scripted mock: the eligibility text is split
into a two-level tree (leaves stay verbatim excerpts), leaves receive
scripted verdicts, and groups combine them with Kleene ALL/ANY.
"""

from trialmatch.criteria import Connector, Verdict, aggregate, evaluate_tree, structure_criteria
from trialmatch.gateway import BackendConfig, BackendKind, TaskTag
from trialmatch.ingest import PatientRecord

ELIGIBILITY = """Inclusion Criteria:
- Histologically confirmed advanced solid tumor
- ECOG performance status 0-1
- Adequate organ function: (i) neutrophils >= 1,500/mcL; (ii) platelets >= 100,000/mcL

Exclusion Criteria:
- Active brain metastases
"""

script = {
    TaskTag.STRUCTURE_CRITERIA: [
        [
            {"text": "Histologically confirmed advanced solid tumor"},
            {"text": "ECOG performance status 0-1"},
            {
                "text": "Adequate organ function:",
                "connector": "ALL",
                "children": [{"text": "neutrophils >= 1,500/mcL"}, {"text": "platelets >= 100,000/mcL"}],
            },
        ],
        [{"text": "Active brain metastases"}],
    ],
    TaskTag.EVALUATE_CRITERION: [
        {"verdict": "eligible", "reasoning": "diagnosis documented"},
        {"verdict": "eligible", "reasoning": "ECOG 1 within 0-1"},
        {"verdict": "eligible", "reasoning": "ANC 2,100/mcL"},
        {"verdict": "unknown", "reasoning": "platelet count not reported"},
        {"verdict": "eligible", "reasoning": "no brain lesions documented, assumed absent"},
    ],
}
backend = BackendConfig(kind=BackendKind.SCRIPTED_MOCK, script=script)

tree = structure_criteria(ELIGIBILITY, backend)
print("tree leaves (verbatim source excerpts):")
for leaf in tree.leaves():
    print(f"  {leaf.node_id:<10} [{leaf.side.value.lower():<9}] {leaf.text}")

patient = PatientRecord("demo-1", "Advanced solid tumor, ECOG 1, ANC 2,100/mcL.")
verdicts, score = evaluate_tree(tree, patient, "demo trial", backend)
print("\nverdicts (groups aggregate their children):")
for v in verdicts:
    print(f"  {v.node_id:<10} {v.verdict.value:<10} {v.reasoning}")
print(f"\nscore: {score.n_eligible} eligible / {score.n_ineligible} ineligible / {score.n_unknown} unknown"
      f", fulfilled ratio {score.fulfilled_ratio}")

print("\nKleene corner cases:")
print("  ALL(ELIGIBLE, UNKNOWN)   =", aggregate(Connector.ALL, [Verdict.ELIGIBLE, Verdict.UNKNOWN]).value)
print("  ANY(UNKNOWN, INELIGIBLE) =", aggregate(Connector.ANY, [Verdict.UNKNOWN, Verdict.INELIGIBLE]).value)
