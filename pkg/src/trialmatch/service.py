"""File-backed service state and the HTTP API (FastAPI).

The API serves the review UI and scripts: trial/patient lookup, match
runs, annotation ingestion, discrepancy listing, adjudication, and
metrics.  All persistence is plain files under the configured directories;
run reports are immutable once written.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .criteria import Verdict
from .docstore import TrialStore
from .evalkit import (
    Adjudication,
    AnnotationRecord,
    KeyedVerdict,
    TransitionMatrix,
    UnknownKey,
    apply_adjudications,
    build_reference,
    compute_accuracy,
    extract_discrepancies,
    parse_verdict,
)
from .gateway import (
    BackendConfig,
    BackendKind,
    EnumSchema,
    ListSchema,
    RecordField,
    RecordSchema,
    TextSchema,
    Violation,
    validate,
)
from .ingest import PatientRecord, load_patient_records, trial_to_record
from .pipeline import MatchReport, PipelineConfig, match_patient, render_report_text
from .vecindex import MockEmbedder, RemoteEmbedder, VectorIndex

logger = logging.getLogger(__name__)

SNAPSHOT_NAME = "snapshot.ndjson"
INDEX_NAME = "chunks.tmvi"
META_NAME = "meta.json"


@dataclass
class AppConfig:
    store_dir: str = "store"
    patients_file: str = "patients.ndjson"
    runs_dir: str = "runs"
    backend: dict = field(default_factory=lambda: {"kind": "SCRIPTED_MOCK"})
    embedding: dict = field(default_factory=lambda: {"provider": "mock", "dim": 768, "seed": 0})
    chunking: dict = field(default_factory=lambda: {"max_chunk_chars": 2000, "overlap_chars": 50})
    pipeline: dict = field(default_factory=dict)
    port: int = 8000
    audit_path: Optional[str] = None
    max_parallel_matches: int = 2

    @classmethod
    def load(cls, path: str | Path) -> "AppConfig":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def build_backend_config(backend: dict, audit_path: Optional[str] = None) -> BackendConfig:
    kind = BackendKind(str(backend.get("kind", "SCRIPTED_MOCK")).upper())
    script: dict = {}
    if kind is BackendKind.SCRIPTED_MOCK:
        if backend.get("script_file"):
            script = json.loads(Path(backend["script_file"]).read_text(encoding="utf-8"))
        else:
            script = backend.get("script", {})
    return BackendConfig(
        kind=kind,
        endpoint=backend.get("endpoint", ""),
        model=backend.get("model", ""),
        max_retries=int(backend.get("max_retries", 2)),
        timeout_seconds=float(backend.get("timeout_seconds", 60.0)),
        temperature=backend.get("temperature"),
        script=script,
        audit_path=audit_path,
        max_concurrency=backend.get("max_concurrency"),
        requests_per_minute=backend.get("requests_per_minute"),
    )


def build_embedder(embedding: dict):
    provider = str(embedding.get("provider", "mock")).lower()
    dim = int(embedding.get("dim", 768))
    if provider == "mock":
        return MockEmbedder(dim=dim, seed=int(embedding.get("seed", 0)))
    if provider == "remote":
        import os

        token = os.environ.get(str(embedding.get("token_env", "TRIALMATCH_EMBED_TOKEN")), "")
        return RemoteEmbedder(endpoint=embedding["endpoint"], dim=dim, token=token)
    raise ValueError(f"unknown embedding provider {provider!r}")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


class ServiceState:
    """Loaded store/index/patients plus the run registry on disk."""

    def __init__(self, config: AppConfig):
        self.config = config
        store_dir = Path(config.store_dir)
        self.snapshot_path = store_dir / SNAPSHOT_NAME
        self.index_path = store_dir / INDEX_NAME
        self.store = TrialStore.load_snapshot(self.snapshot_path)
        self.index = VectorIndex.load(self.index_path)
        meta_path = store_dir / META_NAME
        self.meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
        embedding = dict(config.embedding)
        embedding.update(self.meta.get("embedding", {}))
        self.embedder = build_embedder(embedding)
        self.patients: dict[str, PatientRecord] = {
            p.patient_id: p for p in load_patient_records(config.patients_file)
        }
        self.backend = build_backend_config(config.backend, audit_path=config.audit_path)
        self.pipeline_config = PipelineConfig(**config.pipeline)
        self.runs_dir = Path(config.runs_dir)
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self._run_lock = threading.Lock()
        self._annotation_lock = threading.Lock()
        self._match_slots = threading.BoundedSemaphore(max(1, config.max_parallel_matches))

    # -- runs -----------------------------------------------------------------
    def run_dir(self, run_id: str) -> Path:
        return self.runs_dir / run_id

    def list_runs(self) -> list[str]:
        return sorted(p.name for p in self.runs_dir.iterdir() if p.is_dir())

    def _next_run_id(self) -> str:
        existing = self.list_runs()
        n = 0
        for name in existing:
            if name.startswith("run-"):
                try:
                    n = max(n, int(name.split("-", 1)[1]))
                except ValueError:
                    continue
        return f"run-{n + 1:04d}"

    def input_digests(self) -> dict:
        return {
            "store_snapshot": _sha256(self.snapshot_path),
            "vector_index": _sha256(self.index_path),
            "patients": _sha256(Path(self.config.patients_file)),
        }

    def execute_match(self, patient_id: str, instruction: str) -> tuple[str, MatchReport]:
        """Create a run directory, write the manifest, run the match, finalize.

        The manifest exists (status running) before the pipeline starts and is
        finalized afterwards; the report itself carries no run id or clock.
        """
        patient = self.patients[patient_id]
        with self._run_lock:
            run_id = self._next_run_id()
            run_dir = self.run_dir(run_id)
            run_dir.mkdir(parents=True)
            manifest = {
                "run_id": run_id,
                "status": "running",
                "patient_id": patient_id,
                "instruction": instruction,
                "config": {
                    "pipeline": self.config.pipeline,
                    "embedding": self.config.embedding,
                    "chunking": self.config.chunking,
                    "backend_kind": self.backend.kind.value,
                },
                "input_digests": self.input_digests(),
                "created_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            }
            (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        with self._match_slots:
            report = match_patient(
                patient,
                instruction,
                self.pipeline_config,
                self.store,
                self.index,
                self.embedder,
                self.backend,
            )
        report.write(run_dir / "report.json")
        (run_dir / "report.txt").write_text(render_report_text(report, self.store) + "\n", encoding="utf-8")
        manifest["status"] = "failed" if report.failed_stage else "completed"
        manifest["failed_stage"] = report.failed_stage
        manifest["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        manifest["stage_counts"] = {
            "prefiltered": len(report.prefiltered),
            "retrieved": len(report.retrieved),
            "final": len(report.final),
        }
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        return run_id, report

    def load_report(self, run_id: str) -> Optional[dict]:
        path = self.run_dir(run_id) / "report.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    # -- annotations ------------------------------------------------------------
    def annotations_path(self, run_id: str) -> Path:
        return self.run_dir(run_id) / "annotations.csv"

    def read_annotations(self, run_id: str) -> list[AnnotationRecord]:
        path = self.annotations_path(run_id)
        if not path.exists():
            return []
        from .evalkit import read_annotations

        return read_annotations(path)

    def append_annotations(self, run_id: str, records: list[AnnotationRecord]) -> None:
        path = self.annotations_path(run_id)
        with self._annotation_lock:
            new_file = not path.exists()
            with open(path, "a", encoding="utf-8", newline="") as fh:
                writer = csv.writer(fh)
                if new_file:
                    writer.writerow(["patient_id", "nct_id", "node_id", "annotator_id", "verdict", "timestamp"])
                for a in records:
                    writer.writerow([a.patient_id, a.nct_id, a.node_id, a.annotator_id, a.verdict.value, a.timestamp])

    # -- adjudications ------------------------------------------------------------
    def adjudications_path(self, run_id: str) -> Path:
        return self.run_dir(run_id) / "adjudications.jsonl"

    def read_adjudications(self, run_id: str) -> list[Adjudication]:
        path = self.adjudications_path(run_id)
        if not path.exists():
            return []
        by_key: dict = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                adj = Adjudication(
                    patient_id=obj["patient_id"],
                    nct_id=obj["nct_id"],
                    node_id=obj["node_id"],
                    verdict=Verdict(obj["verdict"]),
                    note=obj.get("note", ""),
                )
                by_key[adj.key] = adj
        return [by_key[k] for k in sorted(by_key)]

    def append_adjudications(self, run_id: str, adjudications: list[Adjudication]) -> None:
        path = self.adjudications_path(run_id)
        with self._annotation_lock:
            with open(path, "a", encoding="utf-8") as fh:
                for adj in adjudications:
                    fh.write(
                        json.dumps(
                            {
                                "patient_id": adj.patient_id,
                                "nct_id": adj.nct_id,
                                "node_id": adj.node_id,
                                "verdict": adj.verdict.value,
                                "note": adj.note,
                            },
                            ensure_ascii=False,
                        )
                        + "\n"
                    )

    # -- model verdict extraction ---------------------------------------------
    def model_verdicts(self, run_id: str) -> list[KeyedVerdict]:
        report = self.load_report(run_id)
        if report is None:
            return []
        return report_model_verdicts(report)

    def criterion_texts(self, run_id: str) -> dict[tuple[str, str, str], str]:
        report = self.load_report(run_id)
        if report is None:
            return {}
        return report_criterion_texts(report)

    def model_reasonings(self, run_id: str) -> dict[tuple[str, str, str], str]:
        report = self.load_report(run_id)
        if report is None:
            return {}
        out = {}
        patient_id = report["patient_id"]
        for trial in report["trials"]:
            for verdict in trial.get("verdicts", []):
                out[(patient_id, trial["nct_id"], verdict["node_id"])] = verdict.get("reasoning", "")
        return out


def report_model_verdicts(report: dict) -> list[KeyedVerdict]:
    """Flatten a MatchReport record into keyed model verdicts."""
    out = []
    patient_id = report["patient_id"]
    for trial in report["trials"]:
        for verdict in trial.get("verdicts", []):
            out.append(
                KeyedVerdict(
                    patient_id=patient_id,
                    nct_id=trial["nct_id"],
                    node_id=verdict["node_id"],
                    verdict=Verdict(verdict["verdict"]),
                )
            )
    return out


def _walk_nodes(node: Optional[dict]):
    if not node:
        return
    yield node
    for child in node.get("children", []):
        yield from _walk_nodes(child)


def report_criterion_texts(report: dict) -> dict[tuple[str, str, str], str]:
    out = {}
    patient_id = report["patient_id"]
    for trial in report["trials"]:
        criteria = trial.get("criteria")
        if not criteria:
            continue
        for root in (criteria.get("inclusion"), criteria.get("exclusion")):
            for node in _walk_nodes(root):
                out[(patient_id, trial["nct_id"], node["node_id"])] = node["text"]
    return out


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------

_VERDICT_ENUM = EnumSchema(tuple(v.value for v in Verdict))

_ANNOTATION_SCHEMA = RecordSchema(
    (
        RecordField("patient_id", TextSchema()),
        RecordField("nct_id", TextSchema()),
        RecordField("node_id", TextSchema()),
        RecordField("annotator_id", TextSchema()),
        RecordField("verdict", _VERDICT_ENUM),
        RecordField("timestamp", TextSchema(), required=False),
    )
)

_MATCH_SCHEMA = RecordSchema(
    (
        RecordField("patient_id", TextSchema()),
        RecordField("instruction", TextSchema(), required=False),
    )
)

_ADJUDICATION_ITEM_SCHEMA = RecordSchema(
    (
        RecordField("patient_id", TextSchema()),
        RecordField("nct_id", TextSchema()),
        RecordField("node_id", TextSchema()),
        RecordField("verdict", _VERDICT_ENUM),
        RecordField("note", TextSchema(), required=False),
    )
)

_ADJUDICATIONS_SCHEMA = RecordSchema(
    (
        RecordField("run_id", TextSchema()),
        RecordField("adjudications", ListSchema(_ADJUDICATION_ITEM_SCHEMA)),
    )
)


def _normalize_verdicts(body: Any) -> Any:
    """Uppercase verdict tokens so the UI's lowercase selectors validate."""
    def fix(record: Any) -> Any:
        if isinstance(record, dict) and isinstance(record.get("verdict"), str):
            record = dict(record)
            record["verdict"] = record["verdict"].upper().replace(" ", "_")
            if record["verdict"] == "NOT_ELIGIBLE":
                record["verdict"] = "INELIGIBLE"
        return record

    if isinstance(body, list):
        return [fix(item) for item in body]
    return fix(body)


def _violations_response(violations) -> JSONResponse:
    return JSONResponse(
        status_code=422,
        content={"error": "validation", "violations": [{"path": v.path, "message": v.message} for v in violations]},
    )


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(state: ServiceState) -> FastAPI:
    app = FastAPI(title="trialmatch", version="0.1.0")

    @app.get("/health")
    async def health():
        return {"status": "ok", "trials": len(state.store), "patients": len(state.patients)}

    @app.get("/trials/{nct_id}")
    async def get_trial(nct_id: str):
        try:
            trial = state.store.get_trial(nct_id)
        except Exception:
            return _error(404, f"unknown trial {nct_id}")
        return trial_to_record(trial)

    @app.get("/patients")
    async def list_patients():
        return [
            {"patient_id": p.patient_id, "label": p.label}
            for p in sorted(state.patients.values(), key=lambda p: p.patient_id)
        ]

    @app.get("/patients/{patient_id}")
    async def get_patient(patient_id: str):
        patient = state.patients.get(patient_id)
        if patient is None:
            return _error(404, f"unknown patient {patient_id}")
        return {"patient_id": patient.patient_id, "ehr_text": patient.ehr_text, "label": patient.label}

    @app.get("/runs")
    async def list_runs():
        return {"runs": state.list_runs()}

    @app.post("/match")
    async def post_match(request: Request):
        body = await request.json()
        violations = validate(body, _MATCH_SCHEMA)
        if violations:
            return _violations_response(violations)
        patient_id = body["patient_id"]
        if patient_id not in state.patients:
            return _error(404, f"unknown patient {patient_id}")
        run_id, report = state.execute_match(patient_id, body.get("instruction", ""))
        return {"run_id": run_id, "failed_stage": report.failed_stage}

    @app.get("/matches/{run_id}")
    async def get_match(run_id: str):
        report = state.load_report(run_id)
        if report is None:
            return _error(404, f"unknown run {run_id}")
        return report

    @app.post("/annotations")
    async def post_annotations(request: Request, run_id: str = ""):
        body = await request.json()
        if isinstance(body, dict) and "annotations" in body:
            run_id = body.get("run_id", run_id)
            payload = body["annotations"]
        else:
            payload = body
        payload = _normalize_verdicts(payload)
        if isinstance(payload, list):
            violations = validate(payload, ListSchema(_ANNOTATION_SCHEMA))
            records_raw = payload
        else:
            violations = validate(payload, _ANNOTATION_SCHEMA)
            records_raw = [payload] if not violations else []
        if violations:
            return _violations_response(violations)
        if not run_id:
            return _error(404, "run_id required (body field or query parameter)")
        if state.load_report(run_id) is None:
            return _error(404, f"unknown run {run_id}")
        existing = {(a.key, a.annotator_id) for a in state.read_annotations(run_id)}
        records = []
        batch_seen = set()
        for raw in records_raw:
            record = AnnotationRecord(
                patient_id=raw["patient_id"],
                nct_id=raw["nct_id"],
                node_id=raw["node_id"],
                annotator_id=raw["annotator_id"],
                verdict=parse_verdict(raw["verdict"]),
                timestamp=raw.get("timestamp", ""),
            )
            dedup = (record.key, record.annotator_id)
            if dedup in existing or dedup in batch_seen:
                return _error(409, f"duplicate annotation for {record.key} by {record.annotator_id}")
            batch_seen.add(dedup)
            records.append(record)
        state.append_annotations(run_id, records)
        return {"accepted": len(records)}

    @app.get("/annotations")
    async def get_annotations(run_id: str):
        if state.load_report(run_id) is None:
            return _error(404, f"unknown run {run_id}")
        return [
            {
                "patient_id": a.patient_id,
                "nct_id": a.nct_id,
                "node_id": a.node_id,
                "annotator_id": a.annotator_id,
                "verdict": a.verdict.value,
                "timestamp": a.timestamp,
            }
            for a in state.read_annotations(run_id)
        ]

    def _reference_and_model(run_id: str):
        annotations = state.read_annotations(run_id)
        reference = build_reference(annotations)
        model_all = {m.key: m for m in state.model_verdicts(run_id)}
        reference = [r for r in reference if r.key in model_all]
        model = [model_all[r.key] for r in reference]
        return reference, model

    @app.get("/discrepancies")
    async def get_discrepancies(run_id: str):
        if state.load_report(run_id) is None:
            return _error(404, f"unknown run {run_id}")
        reference, model = _reference_and_model(run_id)
        keys = extract_discrepancies(reference, model)
        texts = state.criterion_texts(run_id)
        reasonings = state.model_reasonings(run_id)
        ref_map = {r.key: r for r in reference}
        model_map = {m.key: m for m in model}
        return [
            {
                "patient_id": key[0],
                "nct_id": key[1],
                "node_id": key[2],
                "criterion_text": texts.get(key, ""),
                "reference_verdict": ref_map[key].verdict.value,
                "tie_flag": ref_map[key].tie_flag,
                "model_verdict": model_map[key].verdict.value,
                "model_reasoning": reasonings.get(key, ""),
            }
            for key in keys
        ]

    @app.post("/adjudications")
    async def post_adjudications(request: Request):
        body = await request.json()
        body = dict(body) if isinstance(body, dict) else body
        if isinstance(body, dict) and isinstance(body.get("adjudications"), list):
            body["adjudications"] = _normalize_verdicts(body["adjudications"])
        violations = validate(body, _ADJUDICATIONS_SCHEMA)
        if violations:
            return _violations_response(violations)
        run_id = body["run_id"]
        if state.load_report(run_id) is None:
            return _error(404, f"unknown run {run_id}")
        adjudications = [
            Adjudication(
                patient_id=item["patient_id"],
                nct_id=item["nct_id"],
                node_id=item["node_id"],
                verdict=parse_verdict(item["verdict"]),
                note=item.get("note", ""),
            )
            for item in body["adjudications"]
        ]
        reference, model = _reference_and_model(run_id)
        combined = state.read_adjudications(run_id) + adjudications
        by_key = {}
        for adj in combined:
            by_key[adj.key] = adj
        try:
            _, matrix = apply_adjudications(reference, model, list(by_key.values()))
        except UnknownKey as exc:
            return _violations_response([Violation(".adjudications", str(exc))])
        state.append_adjudications(run_id, adjudications)
        return {"applied": len(adjudications), "transition_matrix": matrix.to_record()}

    @app.get("/metrics")
    async def get_metrics(run_id: str):
        if state.load_report(run_id) is None:
            return _error(404, f"unknown run {run_id}")
        reference, model = _reference_and_model(run_id)
        if not reference:
            return {"run_id": run_id, "baseline": None, "refined": None, "note": "no annotations yet"}
        baseline = compute_accuracy(reference, model)
        adjudications = state.read_adjudications(run_id)
        refined_record = None
        matrix_record = None
        if adjudications:
            refined_reference, matrix = apply_adjudications(reference, model, adjudications)
            refined = compute_accuracy(refined_reference, model, transition_matrix=matrix)
            refined_record = refined.to_record()
            matrix_record = matrix.to_record()
        return {
            "run_id": run_id,
            "baseline": baseline.to_record(),
            "refined": refined_record,
            "transition_matrix": matrix_record,
        }

    return app


def create_app_from_config(config_path: str | Path) -> FastAPI:
    return create_app(ServiceState(AppConfig.load(config_path)))
