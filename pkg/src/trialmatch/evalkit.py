"""Annotation ingestion, majority-vote baselines, accuracy modes, and
adjudication bookkeeping.

Every rate is carried as numerator/denominator, never a bare percentage,
so report arithmetic stays exact.  The transition matrix counts prior
(majority) verdicts against post-adjudication verdicts over the keys that
were adjudicated.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .criteria import Verdict

Key = tuple[str, str, str]  # (patient_id, nct_id, node_id)

VERDICT_ORDER = (Verdict.ELIGIBLE, Verdict.INELIGIBLE, Verdict.UNKNOWN)
_VERDICT_INDEX = {v: i for i, v in enumerate(VERDICT_ORDER)}

ANNOTATION_COLUMNS = ("patient_id", "nct_id", "node_id", "annotator_id", "verdict", "timestamp")


class EmptyBallot(Exception):
    """Majority vote over zero annotations is undefined."""


class KeyMismatch(Exception):
    """Reference and model keys do not align one-to-one."""

    def __init__(self, missing_in_model: Sequence[Key], missing_in_reference: Sequence[Key]):
        self.missing_in_model = list(missing_in_model)
        self.missing_in_reference = list(missing_in_reference)
        super().__init__(
            f"{len(self.missing_in_model)} keys lack a model verdict, "
            f"{len(self.missing_in_reference)} keys lack a reference verdict"
        )


class UnknownKey(Exception):
    """Adjudication addressed a key outside the discrepancy set."""


class ReferenceSource(Enum):
    MAJORITY = "MAJORITY"
    ADJUDICATED = "ADJUDICATED"


def parse_verdict(token: str) -> Verdict:
    try:
        return Verdict(str(token).strip().upper())
    except ValueError:
        raise ValueError(f"not a verdict: {token!r}") from None


@dataclass(frozen=True)
class AnnotationRecord:
    patient_id: str
    nct_id: str
    node_id: str
    annotator_id: str
    verdict: Verdict
    timestamp: str = ""

    @property
    def key(self) -> Key:
        return (self.patient_id, self.nct_id, self.node_id)


@dataclass(frozen=True)
class KeyedVerdict:
    """A model-side verdict addressed by (patient, trial, node)."""

    patient_id: str
    nct_id: str
    node_id: str
    verdict: Verdict

    @property
    def key(self) -> Key:
        return (self.patient_id, self.nct_id, self.node_id)


@dataclass(frozen=True)
class ReferenceVerdict:
    """Current reference verdict for a key.

    ``majority_verdict`` keeps the pre-adjudication baseline so adjudication
    is idempotent and the transition matrix always counts from the same
    prior.
    """

    patient_id: str
    nct_id: str
    node_id: str
    verdict: Verdict
    source: ReferenceSource = ReferenceSource.MAJORITY
    tie_flag: bool = False
    majority_verdict: Optional[Verdict] = None

    def __post_init__(self) -> None:
        if self.majority_verdict is None:
            object.__setattr__(self, "majority_verdict", self.verdict)
        if self.tie_flag and self.source is not ReferenceSource.MAJORITY:
            raise ValueError("tie_flag only applies to MAJORITY verdicts")

    @property
    def key(self) -> Key:
        return (self.patient_id, self.nct_id, self.node_id)


@dataclass(frozen=True)
class Adjudication:
    patient_id: str
    nct_id: str
    node_id: str
    verdict: Verdict
    note: str = ""

    @property
    def key(self) -> Key:
        return (self.patient_id, self.nct_id, self.node_id)


@dataclass(frozen=True)
class Rate:
    numerator: int
    denominator: int

    @property
    def value(self) -> Optional[float]:
        return self.numerator / self.denominator if self.denominator else None

    def to_record(self) -> dict:
        return {"numerator": self.numerator, "denominator": self.denominator, "value": self.value}

    def __str__(self) -> str:
        if not self.denominator:
            return "n/a (0 items)"
        return f"{100.0 * self.numerator / self.denominator:.1f}% ({self.numerator}/{self.denominator})"


@dataclass(frozen=True)
class TransitionMatrix:
    """3x3 counts of prior (majority) verdict vs post-adjudication verdict.

    Rows and columns follow VERDICT_ORDER: ELIGIBLE, INELIGIBLE, UNKNOWN.
    """

    counts: tuple[tuple[int, int, int], ...] = ((0, 0, 0), (0, 0, 0), (0, 0, 0))

    def total(self) -> int:
        return sum(sum(row) for row in self.counts)

    def diagonal(self) -> int:
        return sum(self.counts[i][i] for i in range(3))

    def changed(self) -> int:
        return self.total() - self.diagonal()

    @property
    def acceptance_rate(self) -> Rate:
        return Rate(self.changed(), self.total())

    def row_sums(self) -> tuple[int, int, int]:
        return tuple(sum(row) for row in self.counts)

    def to_record(self) -> dict:
        return {
            "order": [v.value for v in VERDICT_ORDER],
            "counts": [list(row) for row in self.counts],
            "total": self.total(),
            "unchanged": self.diagonal(),
            "changed": self.changed(),
            "acceptance_rate": self.acceptance_rate.to_record(),
        }


@dataclass(frozen=True)
class EvaluationReport:
    n_total: int
    n_agree: int
    accuracy_overall: Rate
    accuracy_inclusion: Rate
    accuracy_exclusion: Rate
    accuracy_true_false: Rate
    accuracy_no_ai_na: Rate
    transition_matrix: TransitionMatrix = field(default_factory=TransitionMatrix)

    def to_record(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_agree": self.n_agree,
            "accuracy_overall": self.accuracy_overall.to_record(),
            "accuracy_inclusion": self.accuracy_inclusion.to_record(),
            "accuracy_exclusion": self.accuracy_exclusion.to_record(),
            "accuracy_true_false": self.accuracy_true_false.to_record(),
            "accuracy_no_ai_na": self.accuracy_no_ai_na.to_record(),
            "transition_matrix": self.transition_matrix.to_record(),
        }

    def render_text(self) -> str:
        lines = [
            f"criteria evaluated: {self.n_total}, agreeing: {self.n_agree}",
            f"overall accuracy:        {self.accuracy_overall}",
            f"inclusion accuracy:      {self.accuracy_inclusion}",
            f"exclusion accuracy:      {self.accuracy_exclusion}",
            f"both decided (T/F only): {self.accuracy_true_false}",
            f"model decided (no N/A):  {self.accuracy_no_ai_na}",
        ]
        if self.transition_matrix.total():
            m = self.transition_matrix
            lines.append(
                f"adjudicated: {m.total()} (unchanged {m.diagonal()}, changed {m.changed()}, "
                f"acceptance {m.acceptance_rate})"
            )
            header = "            " + "  ".join(f"{v.value:<10}" for v in VERDICT_ORDER)
            lines.append("transition matrix (rows: prior, cols: final):")
            lines.append(header)
            for v, row in zip(VERDICT_ORDER, m.counts):
                lines.append(f"{v.value:<12}" + "  ".join(f"{c:<10}" for c in row))
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def majority_vote(verdicts: Sequence[Verdict]) -> tuple[Verdict, bool]:
    """Strict-plurality verdict; ties yield (UNKNOWN, tie_flag=True).

    Annotator order never matters.  A unanimous UNKNOWN ballot is a strict
    plurality, not a tie.
    """
    if not verdicts:
        raise EmptyBallot("majority vote over an empty ballot")
    counts = Counter(verdicts)
    top = counts.most_common()
    if len(top) > 1 and top[0][1] == top[1][1]:
        return Verdict.UNKNOWN, True
    return top[0][0], False


def build_reference(annotations: Iterable[AnnotationRecord]) -> list[ReferenceVerdict]:
    """Majority-vote reference per key, ordered by key."""
    ballots: dict[Key, list[Verdict]] = {}
    seen: set[tuple[Key, str]] = set()
    for record in annotations:
        dedup_key = (record.key, record.annotator_id)
        if dedup_key in seen:
            raise ValueError(f"duplicate annotation for {record.key} by annotator {record.annotator_id!r}")
        seen.add(dedup_key)
        ballots.setdefault(record.key, []).append(record.verdict)
    reference = []
    for key in sorted(ballots):
        verdict, tie = majority_vote(ballots[key])
        reference.append(
            ReferenceVerdict(
                patient_id=key[0], nct_id=key[1], node_id=key[2], verdict=verdict, tie_flag=tie
            )
        )
    return reference


def _side_of(node_id: str) -> Optional[str]:
    if node_id == "inc" or node_id.startswith("inc."):
        return "inclusion"
    if node_id == "exc" or node_id.startswith("exc."):
        return "exclusion"
    return None


def _align(
    reference: Sequence[ReferenceVerdict], model: Sequence[KeyedVerdict]
) -> list[tuple[ReferenceVerdict, KeyedVerdict]]:
    model_map = {m.key: m for m in model}
    ref_map = {r.key: r for r in reference}
    if len(model_map) != len(model) or len(ref_map) != len(reference):
        raise ValueError("duplicate keys within reference or model lists")
    missing_in_model = [k for k in ref_map if k not in model_map]
    missing_in_reference = [k for k in model_map if k not in ref_map]
    if missing_in_model or missing_in_reference:
        raise KeyMismatch(sorted(missing_in_model), sorted(missing_in_reference))
    return [(r, model_map[r.key]) for r in reference]


def compute_accuracy(
    reference: Sequence[ReferenceVerdict],
    model: Sequence[KeyedVerdict],
    transition_matrix: TransitionMatrix = TransitionMatrix(),
) -> EvaluationReport:
    """Agreement rates in the five reporting modes, with explicit denominators."""
    pairs = _align(reference, model)
    n_total = len(pairs)
    n_agree = sum(1 for r, m in pairs if r.verdict is m.verdict)

    def rate(subset: list[tuple[ReferenceVerdict, KeyedVerdict]]) -> Rate:
        return Rate(sum(1 for r, m in subset if r.verdict is m.verdict), len(subset))

    inclusion = [(r, m) for r, m in pairs if _side_of(r.node_id) == "inclusion"]
    exclusion = [(r, m) for r, m in pairs if _side_of(r.node_id) == "exclusion"]
    both_decided = [
        (r, m) for r, m in pairs if r.verdict is not Verdict.UNKNOWN and m.verdict is not Verdict.UNKNOWN
    ]
    model_decided = [(r, m) for r, m in pairs if m.verdict is not Verdict.UNKNOWN]

    return EvaluationReport(
        n_total=n_total,
        n_agree=n_agree,
        accuracy_overall=Rate(n_agree, n_total),
        accuracy_inclusion=rate(inclusion),
        accuracy_exclusion=rate(exclusion),
        accuracy_true_false=rate(both_decided),
        accuracy_no_ai_na=rate(model_decided),
        transition_matrix=transition_matrix,
    )


def extract_discrepancies(
    reference: Sequence[ReferenceVerdict], model: Sequence[KeyedVerdict]
) -> list[Key]:
    """Keys where current reference and model verdicts differ, in reference order."""
    return [r.key for r, m in _align(reference, model) if r.verdict is not m.verdict]


def apply_adjudications(
    reference: Sequence[ReferenceVerdict],
    model: Sequence[KeyedVerdict],
    adjudications: Sequence[Adjudication],
) -> tuple[list[ReferenceVerdict], TransitionMatrix]:
    """Install adjudicated verdicts and count prior-vs-final transitions.

    Keys must belong to the majority-baseline discrepancy set, so applying
    the same adjudication list twice is a no-op on the second pass
    (idempotent).  Duplicate keys within one list: last wins.
    """
    model_map = {m.key: m for m in model}
    baseline_discrepancies = {
        r.key for r in reference if r.key in model_map and r.majority_verdict is not model_map[r.key].verdict
    }
    final: dict[Key, Adjudication] = {}
    for adj in adjudications:
        if adj.key not in baseline_discrepancies:
            raise UnknownKey(f"adjudication on non-discrepant key {adj.key}")
        final[adj.key] = adj

    counts = [[0, 0, 0], [0, 0, 0], [0, 0, 0]]
    refined: list[ReferenceVerdict] = []
    for ref in reference:
        adj = final.get(ref.key)
        if adj is None:
            refined.append(ref)
            continue
        counts[_VERDICT_INDEX[ref.majority_verdict]][_VERDICT_INDEX[adj.verdict]] += 1
        refined.append(
            ReferenceVerdict(
                patient_id=ref.patient_id,
                nct_id=ref.nct_id,
                node_id=ref.node_id,
                verdict=adj.verdict,
                source=ReferenceSource.ADJUDICATED,
                tie_flag=False,
                majority_verdict=ref.majority_verdict,
            )
        )
    matrix = TransitionMatrix(tuple(tuple(row) for row in counts))
    return refined, matrix


# ---------------------------------------------------------------------------
# Table I/O
# ---------------------------------------------------------------------------

def write_annotations(path: str | Path, annotations: Iterable[AnnotationRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_COLUMNS)
        for a in annotations:
            writer.writerow([a.patient_id, a.nct_id, a.node_id, a.annotator_id, a.verdict.value, a.timestamp])


def read_annotations(path: str | Path) -> list[AnnotationRecord]:
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ANNOTATION_COLUMNS[:-1] if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: annotation table lacks columns {missing}")
        for row in reader:
            records.append(
                AnnotationRecord(
                    patient_id=row["patient_id"],
                    nct_id=row["nct_id"],
                    node_id=row["node_id"],
                    annotator_id=row["annotator_id"],
                    verdict=parse_verdict(row["verdict"]),
                    timestamp=row.get("timestamp") or "",
                )
            )
    return records
