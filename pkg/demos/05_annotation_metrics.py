"""
Majority votes, accuracy modes, and AI-feedback refinement
==========================================================

Reproduces the benchmark arithmetic: 1,589 criterion pairs, 1,398
baseline agreements, 191 adjudicated discrepancies of which 75 accept
the model's answer.
"""

from trialmatch.criteria import Verdict
from trialmatch.evalkit import apply_adjudications, compute_accuracy, extract_discrepancies, majority_vote
from trialmatch.fixtures import build_annotation_benchmark

E, N, U = Verdict.ELIGIBLE, Verdict.INELIGIBLE, Verdict.UNKNOWN

print("majority votes over five annotators:")
for ballot in ([E, E, E, N, U], [E, E, N, N, U], [U, U, U, U, U]):
    verdict, tie = majority_vote(ballot)
    print(f"  {[v.value[0] for v in ballot]} -> {verdict.value}{' (tie)' if tie else ''}")

reference, model, adjudications = build_annotation_benchmark()
baseline = compute_accuracy(reference, model)
print(f"\nbaseline: {baseline.accuracy_overall}")
print(f"discrepancies: {len(extract_discrepancies(reference, model))}")

refined, matrix = apply_adjudications(reference, model, adjudications)
after = compute_accuracy(refined, model, transition_matrix=matrix)
print(f"refined:  {after.accuracy_overall}")
print()
print(after.render_text())
