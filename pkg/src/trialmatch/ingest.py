"""Registry record parsing, embedding-text composition, chunking, and patient loading.

Registry documents follow the public ClinicalTrials.gov v2 study shape,
reduced to the metadata this pipeline actually uses.  Parsing is tolerant:
unrecognized enum tokens map to UNKNOWN with a warning, never a crash.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Optional

logger = logging.getLogger(__name__)

NCT_ID_RE = re.compile(r"^NCT\d{8}$")

DEFAULT_MAX_CHUNK_CHARS = 2000
DEFAULT_OVERLAP_CHARS = 50


class MissingIdentifier(Exception):
    """Registry document carries no usable NCT identifier."""


class MalformedDocument(Exception):
    """Registry document is not parseable at all."""


class InvalidChunkConfig(Exception):
    """Chunk window must be strictly larger than the overlap."""


class DuplicatePatientId(Exception):
    """Two patient records share the same patient_id."""


class MalformedLine(Exception):
    """A line of a patient file could not be parsed; carries the line number."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


class TrialStatus(Enum):
    RECRUITING = "RECRUITING"
    ACTIVE_NOT_RECRUITING = "ACTIVE_NOT_RECRUITING"
    COMPLETED = "COMPLETED"
    TERMINATED = "TERMINATED"
    SUSPENDED = "SUSPENDED"
    WITHDRAWN = "WITHDRAWN"
    ENROLLING_BY_INVITATION = "ENROLLING_BY_INVITATION"
    NOT_YET_RECRUITING = "NOT_YET_RECRUITING"
    UNKNOWN = "UNKNOWN"


class StudyType(Enum):
    INTERVENTIONAL = "INTERVENTIONAL"
    OBSERVATIONAL = "OBSERVATIONAL"
    EXPANDED_ACCESS = "EXPANDED_ACCESS"
    UNKNOWN = "UNKNOWN"


class Phase(Enum):
    EARLY_1 = "EARLY_1"
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"
    P4 = "P4"
    NA = "NA"


class Sex(Enum):
    ALL = "ALL"
    FEMALE = "FEMALE"
    MALE = "MALE"
    UNKNOWN = "UNKNOWN"


# Registry spellings that do not normalize mechanically to a member name.
_PHASE_ALIASES = {
    "EARLY_PHASE1": Phase.EARLY_1,
    "EARLY_PHASE_1": Phase.EARLY_1,
    "PHASE1": Phase.P1,
    "PHASE2": Phase.P2,
    "PHASE3": Phase.P3,
    "PHASE4": Phase.P4,
    "PHASE_1": Phase.P1,
    "PHASE_2": Phase.P2,
    "PHASE_3": Phase.P3,
    "PHASE_4": Phase.P4,
}


@dataclass(frozen=True)
class Location:
    facility: str = ""
    city: str = ""
    country: str = ""


@dataclass
class ClinicalTrial:
    """One registry trial record, reduced to the fields the matcher uses."""

    nct_id: str
    title_brief: str = ""
    title_official: str = ""
    summary_brief: str = ""
    description_detailed: str = ""
    eligibility_text: str = ""
    status: TrialStatus = TrialStatus.UNKNOWN
    study_type: StudyType = StudyType.UNKNOWN
    phase: Optional[frozenset[Phase]] = None
    sex: Sex = Sex.ALL
    min_age_years: Optional[float] = None
    max_age_years: Optional[float] = None
    conditions: list[str] = field(default_factory=list)
    locations: list[Location] = field(default_factory=list)
    keywords: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not NCT_ID_RE.match(self.nct_id):
            raise MissingIdentifier(f"invalid nct_id {self.nct_id!r}")
        if (
            self.min_age_years is not None
            and self.max_age_years is not None
            and self.min_age_years > self.max_age_years
        ):
            raise ValueError(
                f"{self.nct_id}: min_age_years {self.min_age_years} > max_age_years {self.max_age_years}"
            )


@dataclass(frozen=True)
class PatientRecord:
    """Free-text EHR vignette with an identifier and optional case label."""

    patient_id: str
    ehr_text: str
    label: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.ehr_text:
            raise ValueError(f"patient {self.patient_id!r}: ehr_text is empty")


@dataclass(frozen=True)
class TextChunk:
    nct_id: str
    seq: int
    start_char: int
    end_char: int
    text: str


def _norm_token(raw: Any) -> str:
    # "Active, not recruiting" -> "ACTIVE_NOT_RECRUITING"
    token = re.sub(r"[^A-Za-z0-9]+", "_", str(raw).strip()).strip("_").upper()
    return token


def _parse_enum(raw: Any, enum_cls: type, trial_id: str, field_name: str):
    if raw is None or str(raw).strip() == "":
        return enum_cls.UNKNOWN
    token = _norm_token(raw)
    try:
        return enum_cls[token]
    except KeyError:
        logger.warning("%s: unrecognized %s token %r, mapped to UNKNOWN", trial_id, field_name, raw)
        return enum_cls.UNKNOWN


def _parse_phase_token(raw: Any, trial_id: str) -> Optional[Phase]:
    token = _norm_token(raw)
    if token in _PHASE_ALIASES:
        return _PHASE_ALIASES[token]
    try:
        return Phase[token]
    except KeyError:
        logger.warning("%s: unrecognized phase token %r, dropped", trial_id, raw)
        return None


_AGE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([A-Za-z]*)\s*$")
_AGE_UNIT_YEARS = {
    "": 1.0,
    "year": 1.0,
    "years": 1.0,
    "month": 1.0 / 12.0,
    "months": 1.0 / 12.0,
    "week": 7.0 / 365.25,
    "weeks": 7.0 / 365.25,
    "day": 1.0 / 365.25,
    "days": 1.0 / 365.25,
    "hour": 1.0 / (365.25 * 24.0),
    "hours": 1.0 / (365.25 * 24.0),
}


def parse_age_years(raw: Any) -> Optional[float]:
    """Normalize registry age strings like ``"18 Years"`` or ``"6 Months"`` to years.

    Unparseable values become None (logged), never an error.
    """
    if raw is None:
        return None
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        return float(raw) if raw >= 0 and math.isfinite(float(raw)) else None
    m = _AGE_RE.match(str(raw))
    if not m:
        logger.warning("unparseable age %r, treated as absent", raw)
        return None
    value, unit = float(m.group(1)), m.group(2).lower()
    if unit not in _AGE_UNIT_YEARS:
        logger.warning("unparseable age unit in %r, treated as absent", raw)
        return None
    return value * _AGE_UNIT_YEARS[unit]


def _text_of(section: dict, key: str) -> str:
    value = section.get(key)
    return str(value).strip() if value is not None else ""


def parse_trial_record(raw: Any) -> ClinicalTrial:
    """Parse one registry study document (v2 shape) into a ClinicalTrial.

    Raises MissingIdentifier when no nct_id is present, MalformedDocument
    when the input is not a mapping at all.
    """
    if not isinstance(raw, dict):
        raise MalformedDocument(f"expected a mapping, got {type(raw).__name__}")

    proto = raw.get("protocolSection", raw)
    if not isinstance(proto, dict):
        raise MalformedDocument("protocolSection is not a mapping")

    ident = proto.get("identificationModule") or proto.get("idModule") or {}
    nct_id = str(ident.get("nctId") or "").strip()
    if not nct_id:
        raise MissingIdentifier("document has no nctId")
    if not NCT_ID_RE.match(nct_id):
        raise MissingIdentifier(f"malformed nctId {nct_id!r}")

    status_mod = proto.get("statusModule") or {}
    desc = proto.get("descriptionModule") or {}
    design = proto.get("designModule") or {}
    cond = proto.get("conditionsModule") or {}
    elig = proto.get("eligibilityModule") or {}
    contacts = proto.get("contactsLocationsModule") or {}

    phases_raw = design.get("phases") or []
    phases = {p for p in (_parse_phase_token(t, nct_id) for t in phases_raw) if p is not None}

    locations = []
    for loc in contacts.get("locations") or []:
        if isinstance(loc, dict):
            locations.append(
                Location(
                    facility=_text_of(loc, "facility"),
                    city=_text_of(loc, "city"),
                    country=_text_of(loc, "country"),
                )
            )

    min_age = parse_age_years(elig.get("minimumAge"))
    max_age = parse_age_years(elig.get("maximumAge"))
    if min_age is not None and max_age is not None and min_age > max_age:
        logger.warning("%s: minimumAge > maximumAge, both treated as absent", nct_id)
        min_age = max_age = None

    sex_raw = elig.get("sex")
    sex = Sex.ALL if sex_raw is None or str(sex_raw).strip() == "" else _parse_enum(sex_raw, Sex, nct_id, "sex")

    return ClinicalTrial(
        nct_id=nct_id,
        title_brief=_text_of(ident, "briefTitle"),
        title_official=_text_of(ident, "officialTitle"),
        summary_brief=_text_of(desc, "briefSummary"),
        description_detailed=_text_of(desc, "detailedDescription"),
        eligibility_text=_text_of(elig, "eligibilityCriteria"),
        status=_parse_enum(status_mod.get("overallStatus"), TrialStatus, nct_id, "status"),
        study_type=_parse_enum(design.get("studyType"), StudyType, nct_id, "studyType"),
        phase=frozenset(phases) if phases else None,
        sex=sex,
        min_age_years=min_age,
        max_age_years=max_age,
        conditions=[str(c).strip() for c in cond.get("conditions") or [] if str(c).strip()],
        locations=locations,
        keywords=[str(k).strip() for k in cond.get("keywords") or [] if str(k).strip()],
    )


def compose_embedding_text(trial: ClinicalTrial) -> str:
    """Concatenate the trial's free-text fields in a fixed order.

    Order: official title, brief title, brief summary, detailed description,
    conditions, keywords.  Absent sections are skipped; sections are joined
    by a single newline.  Deterministic: same trial, same text.
    """
    sections = [
        trial.title_official,
        trial.title_brief,
        trial.summary_brief,
        trial.description_detailed,
        ", ".join(trial.conditions),
        ", ".join(trial.keywords),
    ]
    return "\n".join(s for s in sections if s)


def chunk_text(
    text: str,
    max_chunk_chars: int = DEFAULT_MAX_CHUNK_CHARS,
    overlap_chars: int = DEFAULT_OVERLAP_CHARS,
    *,
    nct_id: str = "",
) -> list[TextChunk]:
    """Split text into sliding windows of at most max_chunk_chars characters.

    Consecutive chunks overlap by exactly overlap_chars; the final chunk may
    be shorter.  Offsets are characters (code points), so multi-unit
    characters are never split.  Empty text yields an empty list.
    """
    if overlap_chars < 0 or max_chunk_chars <= overlap_chars:
        raise InvalidChunkConfig(
            f"max_chunk_chars ({max_chunk_chars}) must exceed overlap_chars ({overlap_chars}) >= 0"
        )
    n = len(text)
    if n == 0:
        return []
    stride = max_chunk_chars - overlap_chars
    chunks: list[TextChunk] = []
    start = 0
    while True:
        end = min(start + max_chunk_chars, n)
        chunks.append(TextChunk(nct_id=nct_id, seq=len(chunks), start_char=start, end_char=end, text=text[start:end]))
        if end >= n:
            break
        start += stride
    return chunks


def chunk_trial(trial: ClinicalTrial, max_chunk_chars: int = DEFAULT_MAX_CHUNK_CHARS,
                overlap_chars: int = DEFAULT_OVERLAP_CHARS) -> list[TextChunk]:
    return chunk_text(compose_embedding_text(trial), max_chunk_chars, overlap_chars, nct_id=trial.nct_id)


def load_patient_records(path: str | Path) -> list[PatientRecord]:
    """Read line-delimited patient records (patient_id, ehr_text, optional label).

    Order is preserved.  Blank lines are skipped.  Raises MalformedLine with
    the offending line number, DuplicatePatientId on repeated ids.
    """
    records: list[PatientRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedLine(line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or "patient_id" not in obj or "ehr_text" not in obj:
                raise MalformedLine(line_no, "record must carry patient_id and ehr_text")
            patient_id = str(obj["patient_id"])
            ehr_text = str(obj["ehr_text"])
            if not ehr_text.strip():
                raise MalformedLine(line_no, "ehr_text is empty")
            if patient_id in seen:
                raise DuplicatePatientId(f"patient_id {patient_id!r} appears more than once")
            seen.add(patient_id)
            label = obj.get("label")
            records.append(PatientRecord(patient_id=patient_id, ehr_text=ehr_text,
                                         label=str(label) if label is not None else None))
    return records


def load_trial_documents(path: str | Path) -> list[dict]:
    """Read registry study documents from NDJSON, a JSON array, or a v2 export
    object with a top-level "studies" list."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        parsed = json.loads(text)
    except json.JSONDecodeError:
        parsed = None
    if isinstance(parsed, list):
        return parsed
    if isinstance(parsed, dict):
        docs = parsed.get("studies", [parsed])
        if not isinstance(docs, list):
            raise MalformedDocument('"studies" is not a list')
        return docs
    docs = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            docs.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise MalformedLine(line_no, f"invalid JSON ({exc.msg})") from exc
    return docs


def trial_to_record(trial: ClinicalTrial) -> dict:
    """Canonical flat record for snapshots and reports."""
    return {
        "nct_id": trial.nct_id,
        "title_brief": trial.title_brief,
        "title_official": trial.title_official,
        "summary_brief": trial.summary_brief,
        "description_detailed": trial.description_detailed,
        "eligibility_text": trial.eligibility_text,
        "status": trial.status.value,
        "study_type": trial.study_type.value,
        "phase": sorted(p.value for p in trial.phase) if trial.phase is not None else None,
        "sex": trial.sex.value,
        "min_age_years": trial.min_age_years,
        "max_age_years": trial.max_age_years,
        "conditions": list(trial.conditions),
        "locations": [{"facility": l.facility, "city": l.city, "country": l.country} for l in trial.locations],
        "keywords": list(trial.keywords),
    }


def trial_from_record(record: dict) -> ClinicalTrial:
    phase = record.get("phase")
    return ClinicalTrial(
        nct_id=record["nct_id"],
        title_brief=record.get("title_brief", ""),
        title_official=record.get("title_official", ""),
        summary_brief=record.get("summary_brief", ""),
        description_detailed=record.get("description_detailed", ""),
        eligibility_text=record.get("eligibility_text", ""),
        status=TrialStatus(record.get("status", "UNKNOWN")),
        study_type=StudyType(record.get("study_type", "UNKNOWN")),
        phase=frozenset(Phase(p) for p in phase) if phase else None,
        sex=Sex(record.get("sex", "ALL")),
        min_age_years=record.get("min_age_years"),
        max_age_years=record.get("max_age_years"),
        conditions=list(record.get("conditions") or []),
        locations=[Location(**loc) for loc in record.get("locations") or []],
        keywords=list(record.get("keywords") or []),
    )
