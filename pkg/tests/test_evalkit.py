"""Majority vote, accuracy modes, discrepancies, and adjudication."""

import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trialmatch.criteria import Verdict
from trialmatch.evalkit import (
    Adjudication,
    AnnotationRecord,
    EmptyBallot,
    KeyMismatch,
    KeyedVerdict,
    ReferenceVerdict,
    UnknownKey,
    apply_adjudications,
    build_reference,
    compute_accuracy,
    extract_discrepancies,
    majority_vote,
    read_annotations,
    write_annotations,
)

E, N, U = Verdict.ELIGIBLE, Verdict.INELIGIBLE, Verdict.UNKNOWN


def ref(i, verdict, node="inc.1"):
    return ReferenceVerdict(f"p{i}", "NCT00000001", node, verdict)


def mod(i, verdict, node="inc.1"):
    return KeyedVerdict(f"p{i}", "NCT00000001", node, verdict)


class TestMajorityVote:
    def test_strict_plurality(self):
        assert majority_vote([E, E, E, N, U]) == (E, False)

    def test_tie_yields_unknown_flagged(self):
        assert majority_vote([E, E, N, N, U]) == (U, True)

    def test_unanimous_unknown_not_a_tie(self):
        assert majority_vote([U, U, U, U, U]) == (U, False)

    def test_empty_ballot(self):
        with pytest.raises(EmptyBallot):
            majority_vote([])

    @given(st.lists(st.sampled_from([E, N, U]), min_size=1, max_size=9))
    @settings(max_examples=300, deadline=None)
    def test_permutation_invariance(self, ballot):
        rng = random.Random(0)
        baseline = majority_vote(ballot)
        for _ in range(5):
            shuffled = ballot[:]
            rng.shuffle(shuffled)
            assert majority_vote(shuffled) == baseline


class TestComputeAccuracy:
    def test_basic_counts(self):
        reference = [ref(i, E) for i in range(8)] + [ref(8, U), ref(9, U)]
        model = [mod(i, E) for i in range(8)] + [mod(8, N), mod(9, N)]
        report = compute_accuracy(reference, model)
        assert report.n_total == 10
        assert report.n_agree == 8
        assert report.accuracy_overall.value == pytest.approx(0.8)

    def test_no_ai_na_mode(self):
        # model UNKNOWN on 2 of 10, agreement on all 8 remaining
        reference = [ref(i, E) for i in range(10)]
        model = [mod(i, E) for i in range(8)] + [mod(8, U), mod(9, U)]
        report = compute_accuracy(reference, model)
        assert report.accuracy_no_ai_na.value == 1.0
        assert report.accuracy_no_ai_na.denominator == 8
        assert report.accuracy_overall.value == pytest.approx(0.8)

    def test_true_false_mode_excludes_unknown_on_either_side(self):
        reference = [ref(0, E), ref(1, U), ref(2, N), ref(3, E)]
        model = [mod(0, E), mod(1, N), mod(2, U), mod(3, N)]
        report = compute_accuracy(reference, model)
        assert report.accuracy_true_false.denominator == 2  # pairs 0 and 3
        assert report.accuracy_true_false.numerator == 1

    def test_side_accuracies_split_on_node_prefix(self):
        reference = [ref(0, E, "inc.1"), ref(1, E, "inc.2"), ref(2, E, "exc.1")]
        model = [mod(0, E, "inc.1"), mod(1, N, "inc.2"), mod(2, E, "exc.1")]
        report = compute_accuracy(reference, model)
        assert (report.accuracy_inclusion.numerator, report.accuracy_inclusion.denominator) == (1, 2)
        assert (report.accuracy_exclusion.numerator, report.accuracy_exclusion.denominator) == (1, 1)

    def test_key_mismatch(self):
        with pytest.raises(KeyMismatch):
            compute_accuracy([ref(0, E)], [mod(1, E)])

    def test_agreement_count_is_exact_integer(self):
        rng = random.Random(8)
        reference = [ref(i, rng.choice([E, N, U])) for i in range(317)]
        model = [mod(i, rng.choice([E, N, U])) for i in range(317)]
        report = compute_accuracy(reference, model)
        assert report.accuracy_overall.numerator == report.n_agree
        assert report.accuracy_overall.value * report.n_total == pytest.approx(report.n_agree)


class TestDiscrepancies:
    def test_identical_lists(self):
        reference = [ref(i, E) for i in range(4)]
        model = [mod(i, E) for i in range(4)]
        assert extract_discrepancies(reference, model) == []

    def test_single_difference(self):
        reference = [ref(0, E), ref(1, N)]
        model = [mod(0, E), mod(1, E)]
        assert extract_discrepancies(reference, model) == [("p1", "NCT00000001", "inc.1")]

    def test_stable_reference_order(self):
        reference = [ref(2, E), ref(0, E), ref(1, E)]
        model = [mod(i, N) for i in (0, 1, 2)]
        keys = extract_discrepancies(reference, model)
        assert [k[0] for k in keys] == ["p2", "p0", "p1"]


class TestApplyAdjudications:
    def setup_method(self):
        # 5 keys: 0-2 discrepant, 3-4 agreeing
        self.reference = [ref(0, E), ref(1, E), ref(2, N), ref(3, E), ref(4, U)]
        self.model = [mod(0, U), mod(1, N), mod(2, E), mod(3, E), mod(4, U)]

    def test_matrix_and_acceptance(self):
        adjudications = [
            Adjudication("p0", "NCT00000001", "inc.1", U),  # accept model: E -> U
            Adjudication("p1", "NCT00000001", "inc.1", E),  # keep prior
            Adjudication("p2", "NCT00000001", "inc.1", E),  # accept model: N -> E
        ]
        refined, matrix = apply_adjudications(self.reference, self.model, adjudications)
        assert matrix.total() == 3
        assert matrix.diagonal() == 1
        assert matrix.changed() == 2
        assert matrix.acceptance_rate.value == pytest.approx(2 / 3)
        assert matrix.row_sums() == (2, 1, 0)
        refined_map = {r.key: r for r in refined}
        assert refined_map[("p0", "NCT00000001", "inc.1")].verdict is U
        assert refined_map[("p0", "NCT00000001", "inc.1")].majority_verdict is E

    def test_empty_adjudication_list(self):
        refined, matrix = apply_adjudications(self.reference, self.model, [])
        assert refined == list(self.reference)
        assert matrix.total() == 0
        assert matrix.counts == ((0, 0, 0), (0, 0, 0), (0, 0, 0))

    def test_non_discrepant_key_rejected(self):
        with pytest.raises(UnknownKey):
            apply_adjudications(
                self.reference, self.model, [Adjudication("p3", "NCT00000001", "inc.1", N)]
            )

    def test_idempotent(self):
        adjudications = [Adjudication("p0", "NCT00000001", "inc.1", U)]
        refined1, matrix1 = apply_adjudications(self.reference, self.model, adjudications)
        refined2, matrix2 = apply_adjudications(refined1, self.model, adjudications)
        assert refined1 == refined2
        assert matrix1 == matrix2

    def test_accuracy_improves_by_accepted_count(self):
        baseline = compute_accuracy(self.reference, self.model)
        adjudications = [
            Adjudication("p0", "NCT00000001", "inc.1", U),
            Adjudication("p2", "NCT00000001", "inc.1", E),
        ]
        refined, _ = apply_adjudications(self.reference, self.model, adjudications)
        after = compute_accuracy(refined, self.model)
        assert after.n_agree == baseline.n_agree + 2


class TestBuildReference:
    def test_majority_per_key_with_ties_flagged(self):
        annotations = []
        for annotator, verdict in zip("abcde", [E, E, E, N, U]):
            annotations.append(AnnotationRecord("p0", "NCT00000001", "inc.1", annotator, verdict))
        for annotator, verdict in zip("abcd", [E, E, N, N]):
            annotations.append(AnnotationRecord("p1", "NCT00000001", "inc.1", annotator, verdict))
        reference = build_reference(annotations)
        by_patient = {r.patient_id: r for r in reference}
        assert by_patient["p0"].verdict is E
        assert not by_patient["p0"].tie_flag
        assert by_patient["p1"].verdict is U
        assert by_patient["p1"].tie_flag

    def test_duplicate_annotator_rejected(self):
        a = AnnotationRecord("p0", "NCT00000001", "inc.1", "a", E)
        with pytest.raises(ValueError):
            build_reference([a, a])


class TestAnnotationTable:
    def test_round_trip(self, tmp_path):
        annotations = [
            AnnotationRecord("p0", "NCT00000001", "inc.1", "ann-1", E, "2024-05-13T12:00:00Z"),
            AnnotationRecord("p0", "NCT00000001", "exc.1", "ann-1", U, ""),
        ]
        path = tmp_path / "annotations.csv"
        write_annotations(path, annotations)
        assert read_annotations(path) == annotations

    def test_missing_columns_rejected(self, tmp_path):
        path = tmp_path / "annotations.csv"
        path.write_text("patient_id,verdict\np0,ELIGIBLE\n")
        with pytest.raises(ValueError):
            read_annotations(path)

    def test_verdict_tokens_case_insensitive(self, tmp_path):
        path = tmp_path / "annotations.csv"
        path.write_text(
            "patient_id,nct_id,node_id,annotator_id,verdict,timestamp\n"
            "p0,NCT00000001,inc.1,a,eligible,\n"
        )
        assert read_annotations(path)[0].verdict is E
