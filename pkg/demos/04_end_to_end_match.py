"""
The full funnel: prefilter -> retrieve -> screen -> criteria -> ranking
=======================================================================

Runs match_patient for one synthetic patient against the 500-trial
fixture corpus with a scripted gateway, then prints the report summary.
"""

from trialmatch.docstore import TrialStore
from trialmatch.fixtures import build_funnel_corpus, build_funnel_script, funnel_patients, funnel_target
from trialmatch.gateway import BackendConfig, BackendKind
from trialmatch.ingest import chunk_text, parse_trial_record
from trialmatch.pipeline import PipelineConfig, match_patient, render_report_text
from trialmatch.vecindex import ChunkEntry, MockEmbedder, VectorIndex

store = TrialStore()
store.upsert_trials([parse_trial_record(d) for d in build_funnel_corpus()])
embedder = MockEmbedder(dim=256, seed=11)
index = VectorIndex(dim=256)
for nct_id in store.ids():
    chunks = chunk_text(store.composed_text(nct_id), 600, 50, nct_id=nct_id)
    vectors = embedder.embed_batch([c.text for c in chunks])
    index.index_chunks([ChunkEntry(c.nct_id, c.seq, v) for c, v in zip(chunks, vectors)])

patient = funnel_patients()[0]
backend = BackendConfig(kind=BackendKind.SCRIPTED_MOCK, script=build_funnel_script(patient.patient_id))
config = PipelineConfig(top_k_retrieval=20, max_queries=5, max_final_trials=10)

report = match_patient(patient, "", config, store, index, embedder, backend)
print(render_report_text(report, store))

target = funnel_target(patient.patient_id)
print(f"\nplanted target {target} ranked #{report.ranking.index(target) + 1} of {len(report.final)}")
