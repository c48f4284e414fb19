"""In-process trial store with conjunctive metadata filtering.

Constraint groups are ANDed together; within a group, members/terms are
ORed.  Condition and keyword terms use case-insensitive substring matching;
synonym handling is deliberately left to the vector stage.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .ingest import (
    ClinicalTrial,
    Phase,
    Sex,
    StudyType,
    TrialStatus,
    compose_embedding_text,
    trial_from_record,
    trial_to_record,
)

SNAPSHOT_VERSION = 1


class NotFound(Exception):
    """No trial stored under the requested id (ids are case-sensitive exact keys)."""


@dataclass(frozen=True)
class MetadataQuery:
    """Serializable conjunction of discrete-field and free-text constraints.

    An entirely empty query matches every trial.  ``age_years`` is the
    patient's age and matches trials whose [min, max] interval contains it;
    ``sex`` matches trials open to that sex (trial sex ALL or equal).
    """

    status_in: Optional[frozenset[TrialStatus]] = None
    study_type_in: Optional[frozenset[StudyType]] = None
    phase_in: Optional[frozenset[Phase]] = None
    countries_in: Optional[frozenset[str]] = None
    sex: Optional[Sex] = None
    age_years: Optional[float] = None
    condition_terms: tuple[str, ...] = ()
    keyword_terms: tuple[str, ...] = ()

    def is_empty(self) -> bool:
        return all(
            group is None
            for group in (
                self.status_in,
                self.study_type_in,
                self.phase_in,
                self.countries_in,
                self.sex,
                self.age_years,
            )
        ) and not self.condition_terms and not self.keyword_terms

    def matches(self, trial: ClinicalTrial, composed_text: str) -> bool:
        if self.status_in is not None and trial.status not in self.status_in:
            return False
        if self.study_type_in is not None and trial.study_type not in self.study_type_in:
            return False
        if self.phase_in is not None:
            if trial.phase is None or not (trial.phase & self.phase_in):
                return False
        if self.countries_in is not None:
            wanted = {c.lower() for c in self.countries_in}
            if not any(loc.country.lower() in wanted for loc in trial.locations):
                return False
        if self.sex is not None:
            if trial.sex not in (Sex.ALL, self.sex):
                return False
        if self.age_years is not None:
            if trial.min_age_years is not None and self.age_years < trial.min_age_years:
                return False
            if trial.max_age_years is not None and self.age_years > trial.max_age_years:
                return False
        if self.condition_terms:
            terms = [t.lower() for t in self.condition_terms]
            if not any(t in c.lower() for t in terms for c in trial.conditions):
                return False
        if self.keyword_terms:
            haystacks = [k.lower() for k in trial.keywords]
            haystacks.append(trial.eligibility_text.lower())
            haystacks.append(composed_text.lower())
            terms = [t.lower() for t in self.keyword_terms]
            if not any(t in h for t in terms for h in haystacks):
                return False
        return True

    def to_record(self) -> dict:
        """Canonical serializable form (the form the LLM gateway emits)."""
        record: dict = {}
        if self.status_in is not None:
            record["status_in"] = sorted(s.value for s in self.status_in)
        if self.study_type_in is not None:
            record["study_type_in"] = sorted(s.value for s in self.study_type_in)
        if self.phase_in is not None:
            record["phase_in"] = sorted(p.value for p in self.phase_in)
        if self.countries_in is not None:
            record["countries_in"] = sorted(self.countries_in)
        if self.sex is not None:
            record["sex"] = self.sex.value
        if self.age_years is not None:
            record["age_years"] = self.age_years
        if self.condition_terms:
            record["condition_terms"] = list(self.condition_terms)
        if self.keyword_terms:
            record["keyword_terms"] = list(self.keyword_terms)
        return record

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_record(cls, record: dict) -> "MetadataQuery":
        def enum_set(key: str, enum_cls):
            values = record.get(key)
            if values is None:
                return None
            return frozenset(enum_cls(v) for v in values)

        return cls(
            status_in=enum_set("status_in", TrialStatus),
            study_type_in=enum_set("study_type_in", StudyType),
            phase_in=enum_set("phase_in", Phase),
            countries_in=frozenset(record["countries_in"]) if record.get("countries_in") is not None else None,
            sex=Sex(record["sex"]) if record.get("sex") is not None else None,
            age_years=record.get("age_years"),
            condition_terms=tuple(record.get("condition_terms") or ()),
            keyword_terms=tuple(record.get("keyword_terms") or ()),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetadataQuery":
        return cls.from_record(json.loads(text))


class TrialStore:
    """Keyed trial store: one record per nct_id, last write wins.

    Reads may run concurrently; writes take the store lock.  A filter
    racing an upsert sees the old or the new record, never a torn one
    (records are replaced wholesale, composed text alongside).
    """

    def __init__(self) -> None:
        self._trials: dict[str, ClinicalTrial] = {}
        self._composed: dict[str, str] = {}
        self._lock = threading.RLock()

    def __len__(self) -> int:
        return len(self._trials)

    def ids(self) -> list[str]:
        return sorted(self._trials)

    def upsert_trials(self, trials: Iterable[ClinicalTrial]) -> int:
        count = 0
        with self._lock:
            for trial in trials:
                self._composed[trial.nct_id] = compose_embedding_text(trial)
                self._trials[trial.nct_id] = trial
                count += 1
        return count

    def get_trial(self, nct_id: str) -> ClinicalTrial:
        try:
            return self._trials[nct_id]
        except KeyError:
            raise NotFound(f"no trial stored under id {nct_id!r}") from None

    def composed_text(self, nct_id: str) -> str:
        try:
            return self._composed[nct_id]
        except KeyError:
            raise NotFound(f"no trial stored under id {nct_id!r}") from None

    def execute_filter(self, query: MetadataQuery) -> list[str]:
        """Ids of all trials satisfying every present constraint group,
        in deterministic lexicographic order."""
        with self._lock:
            items = list(self._trials.items())
            composed = dict(self._composed)
        return sorted(nct_id for nct_id, trial in items if query.matches(trial, composed[nct_id]))

    def save_snapshot(self, path: str | Path) -> None:
        """Header line with the record count, then one canonical trial record
        per line, ordered by id."""
        with self._lock:
            records = [trial_to_record(self._trials[i]) for i in sorted(self._trials)]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"version": SNAPSHOT_VERSION, "record_count": len(records)}) + "\n")
            for record in records:
                fh.write(json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n")

    @classmethod
    def load_snapshot(cls, path: str | Path) -> "TrialStore":
        store = cls()
        with open(path, encoding="utf-8") as fh:
            header_line = fh.readline()
            if not header_line.strip():
                raise ValueError(f"{path}: empty snapshot (missing header)")
            header = json.loads(header_line)
            expected = int(header["record_count"])
            trials = [trial_from_record(json.loads(line)) for line in fh if line.strip()]
        if len(trials) != expected:
            raise ValueError(f"{path}: header claims {expected} records, found {len(trials)}")
        store.upsert_trials(trials)
        return store
