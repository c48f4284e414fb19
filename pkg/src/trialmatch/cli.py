"""Command-line driver: ingest, index, match, eval, adjudicate, serve.

Exit codes: 0 success, 1 user error, 2 internal error.  Errors go to
stderr as one JSON object per failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import docstore, evalkit, ingest, service, vecindex
from .criteria import Verdict
from .evalkit import Adjudication, KeyedVerdict, apply_adjudications, build_reference, compute_accuracy
from .gateway import BackendUnavailable, SchemaViolation, ScriptExhausted
from .service import INDEX_NAME, META_NAME, SNAPSHOT_NAME, AppConfig, ServiceState, report_model_verdicts

logger = logging.getLogger(__name__)

USER_ERRORS = (
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
    json.JSONDecodeError,
    ValueError,
    KeyError,
    ingest.MissingIdentifier,
    ingest.MalformedDocument,
    ingest.MalformedLine,
    ingest.DuplicatePatientId,
    ingest.InvalidChunkConfig,
    docstore.NotFound,
    evalkit.KeyMismatch,
    evalkit.UnknownKey,
    evalkit.EmptyBallot,
    SchemaViolation,
    ScriptExhausted,
    BackendUnavailable,
)


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage problems; this CLI treats those as user errors (1).
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        raise SystemExit(1)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trialmatch", description="Clinical trial matching toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_ingest = sub.add_parser("ingest", help="parse registry documents into a store snapshot")
    p_ingest.add_argument("trials_file")
    p_ingest.add_argument("--out", required=True, help="store directory")

    p_index = sub.add_parser("index", help="chunk, embed, and index the stored trials")
    p_index.add_argument("--store", required=True)
    p_index.add_argument("--config", help="service config supplying embedding/chunking defaults")
    p_index.add_argument("--provider", choices=["mock", "remote"], default=None)
    p_index.add_argument("--dim", type=int, default=None)
    p_index.add_argument("--seed", type=int, default=None)
    p_index.add_argument("--endpoint", default=None)
    p_index.add_argument("--max-chunk-chars", type=int, default=None)
    p_index.add_argument("--overlap-chars", type=int, default=None)

    p_match = sub.add_parser("match", help="run the end-to-end match for one patient")
    p_match.add_argument("--patient", required=True)
    p_match.add_argument("--instruction", default="")
    p_match.add_argument("--config", required=True)
    p_match.add_argument("--out", help="also write the report to this path")
    p_match.add_argument("--text-out", help="also write the human-readable summary here")
    p_match.add_argument("--audit", action="store_true", help="log every gateway request/response")

    p_eval = sub.add_parser("eval", help="score a match report against an annotation table")
    p_eval.add_argument("--reference", required=True, help="annotation CSV")
    p_eval.add_argument("--model", required=True, help="match report JSON")
    p_eval.add_argument("--out", required=True, help="metrics JSON output")

    p_adj = sub.add_parser("adjudicate", help="apply adjudication decisions and recompute metrics")
    p_adj.add_argument("--in", dest="decisions", required=True, help="adjudication decisions JSON")
    p_adj.add_argument("--reference", required=True, help="annotation CSV")
    p_adj.add_argument("--model", required=True, help="match report JSON")
    p_adj.add_argument("--out", required=True, help="metrics JSON output")

    p_serve = sub.add_parser("serve", help="run the HTTP API")
    p_serve.add_argument("--config", required=True)
    p_serve.add_argument("--port", type=int, default=None)

    return parser


def _write_json(path: str | Path, payload: dict) -> None:
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, indent=1, separators=(",", ": "), ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def cmd_ingest(args) -> int:
    documents = ingest.load_trial_documents(args.trials_file)
    trials = [ingest.parse_trial_record(doc) for doc in documents]
    store = docstore.TrialStore()
    count = store.upsert_trials(trials)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store.save_snapshot(out / SNAPSHOT_NAME)
    meta_path = out / META_NAME
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    meta["n_trials"] = len(store)
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({"ingested": count, "stored": len(store), "snapshot": str(out / SNAPSHOT_NAME)}))
    return 0


def cmd_index(args) -> int:
    store_dir = Path(args.store)
    store = docstore.TrialStore.load_snapshot(store_dir / SNAPSHOT_NAME)
    config_embedding: dict = {}
    config_chunking: dict = {}
    if args.config:
        app_config = AppConfig.load(args.config)
        config_embedding = dict(app_config.embedding)
        config_chunking = dict(app_config.chunking)

    def resolve(flag, config_key, fallback, source=None):
        if flag is not None:
            return flag
        source = source if source is not None else config_embedding
        return source.get(config_key, fallback)

    provider = resolve(args.provider, "provider", "mock")
    dim = int(resolve(args.dim, "dim", 768))
    seed = int(resolve(args.seed, "seed", 0))
    max_chunk_chars = int(resolve(args.max_chunk_chars, "max_chunk_chars", ingest.DEFAULT_MAX_CHUNK_CHARS, config_chunking))
    overlap_chars = int(resolve(args.overlap_chars, "overlap_chars", ingest.DEFAULT_OVERLAP_CHARS, config_chunking))
    embedding = {"provider": provider, "dim": dim, "seed": seed}
    if provider == "remote":
        endpoint = resolve(args.endpoint, "endpoint", "")
        if not endpoint:
            raise ValueError("--endpoint is required for the remote provider")
        embedding["endpoint"] = endpoint
    embedder = service.build_embedder(embedding)
    index = vecindex.VectorIndex(dim=dim)
    n_chunks = 0
    for nct_id in store.ids():
        chunks = ingest.chunk_text(store.composed_text(nct_id), max_chunk_chars, overlap_chars, nct_id=nct_id)
        if not chunks:
            continue
        vectors = embedder.embed_batch([c.text for c in chunks])
        entries = [
            vecindex.ChunkEntry(nct_id=c.nct_id, seq=c.seq, vector=v) for c, v in zip(chunks, vectors)
        ]
        n_chunks += index.index_chunks(entries)
    index.save(store_dir / INDEX_NAME)
    meta_path = store_dir / META_NAME
    meta = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.exists() else {}
    meta["embedding"] = embedding
    meta["chunking"] = {"max_chunk_chars": max_chunk_chars, "overlap_chars": overlap_chars}
    meta["n_chunks"] = n_chunks
    meta_path.write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    print(json.dumps({"chunks_indexed": n_chunks, "index": str(store_dir / INDEX_NAME)}))
    return 0


def cmd_match(args) -> int:
    config = AppConfig.load(args.config)
    if args.audit and not config.audit_path:
        config.audit_path = str(Path(config.runs_dir) / "gateway_audit.jsonl")
    state = ServiceState(config)
    if args.patient not in state.patients:
        raise KeyError(f"unknown patient {args.patient!r}")
    run_id, report = state.execute_match(args.patient, args.instruction)
    if args.out:
        report.write(args.out)
    if args.text_out:
        from .pipeline import render_report_text

        Path(args.text_out).write_text(render_report_text(report, state.store) + "\n", encoding="utf-8")
    print(
        json.dumps(
            {
                "run_id": run_id,
                "patient_id": args.patient,
                "prefiltered": len(report.prefiltered),
                "retrieved": len(report.retrieved),
                "final": len(report.final),
                "failed_stage": report.failed_stage,
            }
        )
    )
    return 0 if report.failed_stage is None else 1


def _load_model_verdicts(report_path: str) -> list[KeyedVerdict]:
    report = json.loads(Path(report_path).read_text(encoding="utf-8"))
    return report_model_verdicts(report)


def cmd_eval(args) -> int:
    annotations = evalkit.read_annotations(args.reference)
    reference = build_reference(annotations)
    model = _load_model_verdicts(args.model)
    model_map = {m.key: m for m in model}
    reference = [r for r in reference if r.key in model_map]
    aligned_model = [model_map[r.key] for r in reference]
    report = compute_accuracy(reference, aligned_model)
    _write_json(args.out, report.to_record())
    print(report.render_text())
    return 0


def cmd_adjudicate(args) -> int:
    annotations = evalkit.read_annotations(args.reference)
    reference = build_reference(annotations)
    model = _load_model_verdicts(args.model)
    model_map = {m.key: m for m in model}
    reference = [r for r in reference if r.key in model_map]
    aligned_model = [model_map[r.key] for r in reference]
    decisions = json.loads(Path(args.decisions).read_text(encoding="utf-8"))
    if isinstance(decisions, dict):
        decisions = decisions.get("adjudications", [])
    adjudications = [
        Adjudication(
            patient_id=d["patient_id"],
            nct_id=d["nct_id"],
            node_id=d["node_id"],
            verdict=Verdict(str(d["verdict"]).upper()),
            note=d.get("note", ""),
        )
        for d in decisions
    ]
    refined, matrix = apply_adjudications(reference, aligned_model, adjudications)
    report = compute_accuracy(refined, aligned_model, transition_matrix=matrix)
    _write_json(args.out, report.to_record())
    print(report.render_text())
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    config = AppConfig.load(args.config)
    port = args.port if args.port is not None else config.port
    app = service.create_app(ServiceState(config))
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="warning")
    return 0


_COMMANDS = {
    "ingest": cmd_ingest,
    "index": cmd_index,
    "match": cmd_match,
    "eval": cmd_eval,
    "adjudicate": cmd_adjudicate,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except USER_ERRORS as exc:
        _emit_error(type(exc).__name__, str(exc))
        return 1
    except Exception as exc:  # internal error
        logger.exception("internal error")
        _emit_error("internal", f"{type(exc).__name__}: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
