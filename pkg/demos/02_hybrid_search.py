"""
Hybrid search: metadata prefilter plus allow-set-constrained vector top-k
=========================================================================

Filters the synthetic corpus with discrete constraints, then runs an
exact cosine search restricted to the surviving trial ids.
"""

from trialmatch.docstore import MetadataQuery, TrialStore
from trialmatch.fixtures import build_funnel_corpus
from trialmatch.ingest import TrialStatus, chunk_text, parse_trial_record
from trialmatch.vecindex import ChunkEntry, MockEmbedder, VectorIndex

store = TrialStore()
store.upsert_trials([parse_trial_record(d) for d in build_funnel_corpus()])
print(f"corpus: {len(store)} trials")

embedder = MockEmbedder(dim=256, seed=11)
index = VectorIndex(dim=256)
for nct_id in store.ids():
    chunks = chunk_text(store.composed_text(nct_id), 600, 50, nct_id=nct_id)
    vectors = embedder.embed_batch([c.text for c in chunks])
    index.index_chunks([ChunkEntry(c.nct_id, c.seq, v) for c, v in zip(chunks, vectors)])
print(f"index: {len(index)} chunk vectors")

query = MetadataQuery(
    status_in=frozenset({TrialStatus.RECRUITING, TrialStatus.ACTIVE_NOT_RECRUITING}),
    condition_terms=("uveal melanoma",),
    countries_in=None,
)
allowed = store.execute_filter(query)
print(f"\nprefilter {query.to_json()}\n  -> {len(allowed)} allowed trials")

hits = index.search(embedder.embed("tebentafusp for metastatic uveal melanoma"), k=5, allow_set=set(allowed))
print("\ntop 5 within the allow-set:")
for hit in hits:
    trial = store.get_trial(hit.nct_id)
    print(f"  {hit.nct_id}  d={hit.distance:.3f}  {trial.title_brief}")
