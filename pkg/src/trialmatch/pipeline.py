"""End-to-end match orchestration.

Stage order: metadata-query extraction -> prefilter -> multi-query rewrite
-> constrained vector retrieval -> relevance screening -> criteria
structuring/evaluation -> ranked report.  Funnel containment (final subset
of retrieved subset of prefiltered) holds for every run, including partial
ones.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

from .criteria import (
    CriterionTree,
    CriterionVerdict,
    EmptyCriteria,
    EvaluationAborted,
    TrialScore,
    Verdict,
    evaluate_tree,
    structure_criteria,
    tree_to_record,
    verdict_to_record,
)
from .docstore import MetadataQuery, TrialStore
from .gateway import (
    BackendConfig,
    EnumSchema,
    GatewayRequest,
    ListSchema,
    NumberSchema,
    PromptSection,
    RecordField,
    RecordSchema,
    SchemaViolation,
    TaskTag,
    TextSchema,
    complete_structured,
    load_template,
)
from .ingest import PatientRecord, Phase, Sex, StudyType, TrialStatus
from .vecindex import SearchHit, VectorIndex

logger = logging.getLogger(__name__)


class EmptyQuerySet(Exception):
    """The backend produced no usable search query."""


@dataclass(frozen=True)
class PipelineConfig:
    top_k_retrieval: int = 50
    max_queries: int = 5
    max_final_trials: int = 10
    include_active_not_recruiting: bool = True
    criteria_max_workers: int = 1

    def __post_init__(self) -> None:
        if not 1 <= self.max_queries <= 5:
            raise ValueError("max_queries must be between 1 and 5")
        if self.max_final_trials < 1:
            raise ValueError("max_final_trials must be >= 1")
        if self.top_k_retrieval < self.max_final_trials:
            raise ValueError("top_k_retrieval must be >= max_final_trials")


class ScreenDecision(Enum):
    KEEP = "keep"
    DISCARD = "discard"
    UNDECIDED = "undecided"


@dataclass(frozen=True)
class ScreenedTrial:
    nct_id: str
    decision: ScreenDecision
    reasoning: str


@dataclass
class TrialMatchDetail:
    """Everything the report carries for one retrieved trial."""

    nct_id: str
    distance: float
    best_seq: int
    decision: ScreenDecision = ScreenDecision.UNDECIDED
    decision_reasoning: str = ""
    criteria: Optional[CriterionTree] = None
    verdicts: list[CriterionVerdict] = field(default_factory=list)
    score: Optional[TrialScore] = None
    criteria_error: Optional[str] = None

    def to_record(self) -> dict:
        return {
            "nct_id": self.nct_id,
            "distance": self.distance,
            "best_seq": self.best_seq,
            "decision": self.decision.value,
            "decision_reasoning": self.decision_reasoning,
            "criteria": tree_to_record(self.criteria) if self.criteria else None,
            "verdicts": [verdict_to_record(v) for v in self.verdicts],
            "score": self.score.to_record() if self.score else None,
            "criteria_error": self.criteria_error,
        }


@dataclass
class MatchReport:
    """Serializable run outcome.  Deliberately carries no run id or wall
    clock so identical inputs produce byte-identical reports."""

    patient_id: str
    instruction: str
    metadata_query: dict
    queries: list[str]
    prefiltered: list[str]
    retrieved: list[str]
    final: list[str]
    ranking: list[str]
    trials: list[TrialMatchDetail]
    warnings: list[str] = field(default_factory=list)
    failed_stage: Optional[str] = None
    error: Optional[str] = None

    def to_record(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "instruction": self.instruction,
            "metadata_query": self.metadata_query,
            "queries": list(self.queries),
            "stages": {
                "prefiltered": {"count": len(self.prefiltered), "ids": list(self.prefiltered)},
                "retrieved": {"count": len(self.retrieved), "ids": list(self.retrieved)},
                "final": {"count": len(self.final), "ids": list(self.final)},
            },
            "ranking": list(self.ranking),
            "trials": [t.to_record() for t in self.trials],
            "warnings": list(self.warnings),
            "failed_stage": self.failed_stage,
            "error": self.error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, separators=(",", ": "), indent=1, ensure_ascii=False)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Stage 1: metadata-query extraction
# ---------------------------------------------------------------------------

_QUERY_SCHEMA = RecordSchema(
    (
        RecordField("status_in", ListSchema(EnumSchema(tuple(s.value for s in TrialStatus))), required=False),
        RecordField("study_type_in", ListSchema(EnumSchema(tuple(s.value for s in StudyType))), required=False),
        RecordField("phase_in", ListSchema(EnumSchema(tuple(p.value for p in Phase))), required=False),
        RecordField("countries_in", ListSchema(TextSchema()), required=False),
        RecordField("sex", EnumSchema(tuple(s.value for s in Sex)), required=False),
        RecordField("age_years", NumberSchema(), required=False),
        RecordField("condition_terms", ListSchema(TextSchema()), required=False),
        RecordField("keyword_terms", ListSchema(TextSchema()), required=False),
    )
)


def extract_metadata_query(
    patient: PatientRecord, instruction: str, backend: BackendConfig
) -> MetadataQuery:
    """Ask the gateway for a prefilter query; discrete fields are enum-enforced."""
    request = GatewayRequest(
        task_tag=TaskTag.EXTRACT_QUERY,
        sections=(
            PromptSection("instruction", load_template(TaskTag.EXTRACT_QUERY)),
            PromptSection("user instruction", instruction or "(none)"),
            PromptSection("patient record", patient.ehr_text),
        ),
        schema=_QUERY_SCHEMA,
    )
    value = complete_structured(request, backend)
    return MetadataQuery.from_record(value)


def widen_for_active_not_recruiting(query: MetadataQuery) -> MetadataQuery:
    """Explicit design choice: a status filter that asks for recruiting
    trials also admits active-but-not-recruiting ones."""
    if query.status_in is None or TrialStatus.ACTIVE_NOT_RECRUITING in query.status_in:
        return query
    if TrialStatus.RECRUITING not in query.status_in:
        return query
    return MetadataQuery(
        status_in=query.status_in | {TrialStatus.ACTIVE_NOT_RECRUITING},
        study_type_in=query.study_type_in,
        phase_in=query.phase_in,
        countries_in=query.countries_in,
        sex=query.sex,
        age_years=query.age_years,
        condition_terms=query.condition_terms,
        keyword_terms=query.keyword_terms,
    )


# ---------------------------------------------------------------------------
# Stage 2: multi-query rewrite
# ---------------------------------------------------------------------------

def generate_queries(
    patient: PatientRecord,
    backend: BackendConfig,
    max_queries: int = 5,
    warnings: Optional[list[str]] = None,
) -> list[str]:
    """1..max_queries distinct non-empty query strings.

    Overlong responses are truncated (warning recorded), duplicates removed
    preserving order.
    """
    request = GatewayRequest(
        task_tag=TaskTag.REWRITE_QUERIES,
        sections=(
            PromptSection("instruction", load_template(TaskTag.REWRITE_QUERIES)),
            PromptSection("patient record", patient.ehr_text),
        ),
        schema=ListSchema(TextSchema()),
    )
    raw = complete_structured(request, backend)
    queries: list[str] = []
    for query in raw:
        cleaned = query.strip()
        if cleaned and cleaned not in queries:
            queries.append(cleaned)
    if not queries:
        raise EmptyQuerySet("backend produced no non-empty query")
    if len(queries) > max_queries:
        message = f"backend produced {len(queries)} queries, truncated to {max_queries}"
        logger.warning(message)
        if warnings is not None:
            warnings.append(message)
        queries = queries[:max_queries]
    return queries


# ---------------------------------------------------------------------------
# Stage 3: constrained retrieval with min-distance fusion
# ---------------------------------------------------------------------------

def retrieve_candidates(
    queries: Sequence[str],
    allow_set: set[str],
    config: PipelineConfig,
    index: VectorIndex,
    embedder,
) -> list[SearchHit]:
    """Per-query top-k within the allow-set, fused across queries by
    per-trial minimum distance, deduplicated, sorted like any hit list."""
    best: dict[str, SearchHit] = {}
    for query in queries:
        vector = embedder.embed(query)
        for hit in index.search(vector, k=config.top_k_retrieval, allow_set=allow_set):
            current = best.get(hit.nct_id)
            if current is None or hit.distance < current.distance:
                best[hit.nct_id] = hit
    fused = sorted(best.values(), key=lambda h: (h.distance, h.nct_id))
    return fused


# ---------------------------------------------------------------------------
# Stage 4: relevance screening
# ---------------------------------------------------------------------------

_SCREEN_SCHEMA = RecordSchema(
    (
        RecordField("decision", EnumSchema(("keep", "discard"))),
        RecordField("reasoning", TextSchema()),
    )
)


def screen_relevance(
    hits: Sequence[SearchHit],
    patient: PatientRecord,
    store: TrialStore,
    backend: BackendConfig,
) -> list[ScreenedTrial]:
    """Judge each hit against the patient summary; a per-trial schema
    failure marks that trial undecided (excluded from the final set).
    The final set itself is the first max_final_trials keeps, in rank
    order (see select_final)."""
    decisions: list[ScreenedTrial] = []
    instruction = load_template(TaskTag.SCREEN_RELEVANCE)
    for hit in hits:
        trial = store.get_trial(hit.nct_id)
        trial_text = "\n".join(
            s for s in (trial.title_official or trial.title_brief, trial.summary_brief, trial.description_detailed) if s
        )
        request = GatewayRequest(
            task_tag=TaskTag.SCREEN_RELEVANCE,
            sections=(
                PromptSection("instruction", instruction),
                PromptSection("patient record", patient.ehr_text),
                PromptSection("trial", trial_text),
            ),
            schema=_SCREEN_SCHEMA,
        )
        try:
            value = complete_structured(request, backend)
            decisions.append(
                ScreenedTrial(hit.nct_id, ScreenDecision(value["decision"]), value["reasoning"])
            )
        except SchemaViolation as exc:
            decisions.append(ScreenedTrial(hit.nct_id, ScreenDecision.UNDECIDED, f"screening failed: {exc}"))
    return decisions


def select_final(decisions: Sequence[ScreenedTrial], max_final_trials: int) -> list[str]:
    kept = [d.nct_id for d in decisions if d.decision is ScreenDecision.KEEP]
    return kept[:max_final_trials]


# ---------------------------------------------------------------------------
# Ranking and the full run
# ---------------------------------------------------------------------------

def _ranking_key(detail: TrialMatchDetail) -> tuple:
    if detail.score is not None:
        ratio = detail.score.fulfilled_ratio
        n_eligible = detail.score.n_eligible
    else:
        ratio, n_eligible = None, 0
    # Absent ratio (nothing decided) ranks below every present ratio.
    return (-(ratio if ratio is not None else -1.0), -n_eligible, detail.distance, detail.nct_id)


def rank_trials(details: Sequence[TrialMatchDetail]) -> list[str]:
    return [d.nct_id for d in sorted(details, key=_ranking_key)]


def match_patient(
    patient: PatientRecord,
    instruction: str,
    config: PipelineConfig,
    store: TrialStore,
    index: VectorIndex,
    embedder,
    backend: BackendConfig,
) -> MatchReport:
    """Run the full funnel for one patient.

    Any stage error yields a partial report with the failed stage labeled;
    stages already completed keep their outputs.
    """
    report = MatchReport(
        patient_id=patient.patient_id,
        instruction=instruction,
        metadata_query={},
        queries=[],
        prefiltered=[],
        retrieved=[],
        final=[],
        ranking=[],
        trials=[],
    )

    stage = "extract_metadata_query"
    try:
        query = extract_metadata_query(patient, instruction, backend)
        if config.include_active_not_recruiting:
            query = widen_for_active_not_recruiting(query)
        report.metadata_query = query.to_record()

        stage = "prefilter"
        report.prefiltered = store.execute_filter(query)

        stage = "generate_queries"
        report.queries = generate_queries(patient, backend, config.max_queries, warnings=report.warnings)

        stage = "retrieve"
        hits = retrieve_candidates(report.queries, set(report.prefiltered), config, index, embedder)
        report.retrieved = [h.nct_id for h in hits]
        details = {h.nct_id: TrialMatchDetail(nct_id=h.nct_id, distance=h.distance, best_seq=h.best_seq) for h in hits}

        stage = "screen"
        decisions = screen_relevance(hits, patient, store, backend)
        for decision in decisions:
            details[decision.nct_id].decision = decision.decision
            details[decision.nct_id].decision_reasoning = decision.reasoning
        report.final = select_final(decisions, config.max_final_trials)

        stage = "criteria"
        for nct_id in report.final:
            detail = details[nct_id]
            trial = store.get_trial(nct_id)
            trial_context = "\n".join(
                s for s in (trial.title_official or trial.title_brief, trial.summary_brief) if s
            )
            try:
                tree = structure_criteria(trial.eligibility_text, backend)
                detail.criteria = tree
                verdicts, score = evaluate_tree(
                    tree, patient, trial_context, backend, max_workers=config.criteria_max_workers
                )
                detail.verdicts = verdicts
                detail.score = score
            except EvaluationAborted as exc:
                detail.verdicts = exc.partial
                detail.criteria_error = str(exc)
            except (SchemaViolation, EmptyCriteria, ValueError) as exc:
                detail.criteria_error = f"criteria structuring failed: {exc}"

        report.trials = [details[h.nct_id] for h in hits]
        report.ranking = rank_trials([details[i] for i in report.final])
    except Exception as exc:  # stage-level failure: emit a partial report
        logger.exception("match for patient %s failed at stage %s", patient.patient_id, stage)
        report.failed_stage = stage
        report.error = f"{type(exc).__name__}: {exc}"
    return report


# ---------------------------------------------------------------------------
# Text rendering
# ---------------------------------------------------------------------------

_VERDICT_SYMBOLS = {Verdict.ELIGIBLE: "[+]", Verdict.INELIGIBLE: "[-]", Verdict.UNKNOWN: "[?]"}


def render_report_text(report: MatchReport, store: Optional[TrialStore] = None) -> str:
    """Human-readable summary: funnel counts, then per final trial one line
    per criterion with verdict symbol and reasoning."""
    lines = [
        f"patient {report.patient_id}",
        f"instruction: {report.instruction or '(none)'}",
        f"funnel: prefiltered {len(report.prefiltered)} -> retrieved {len(report.retrieved)} -> final {len(report.final)}",
    ]
    if report.failed_stage:
        lines.append(f"FAILED at stage {report.failed_stage}: {report.error}")
    for warning in report.warnings:
        lines.append(f"warning: {warning}")
    detail_map = {t.nct_id: t for t in report.trials}
    for rank, nct_id in enumerate(report.ranking, start=1):
        detail = detail_map[nct_id]
        title = ""
        if store is not None:
            try:
                trial = store.get_trial(nct_id)
                title = trial.title_brief or trial.title_official
            except Exception:
                title = ""
        lines.append("")
        lines.append(f"#{rank} {nct_id} (distance {detail.distance:.4f}) {title}".rstrip())
        if detail.score is not None:
            ratio = detail.score.fulfilled_ratio
            ratio_text = f"{ratio:.2f}" if ratio is not None else "n/a"
            lines.append(
                f"    score: {detail.score.n_eligible} eligible / {detail.score.n_ineligible} ineligible / "
                f"{detail.score.n_unknown} unknown, fulfilled ratio {ratio_text}"
            )
        if detail.criteria_error:
            lines.append(f"    criteria error: {detail.criteria_error}")
        node_texts = {}
        if detail.criteria is not None:
            node_texts = {n.node_id: n.text for n in detail.criteria.walk()}
        for verdict in detail.verdicts:
            symbol = _VERDICT_SYMBOLS[verdict.verdict]
            text = node_texts.get(verdict.node_id, "")
            label = text if text else verdict.node_id
            lines.append(f"    {symbol} {label}")
            lines.append(f"        {verdict.reasoning}")
    return "\n".join(lines)
