"""
Chunking trial text and embedding it with the deterministic mock
========================================================================

Composes a trial's free-text fields, splits them into overlapping
windows, and shows that the mock embedder preserves crude lexical
similarity.
"""

import numpy as np

from trialmatch.ingest import chunk_text, compose_embedding_text, parse_trial_record
from trialmatch.fixtures import build_funnel_corpus
from trialmatch.vecindex import MockEmbedder, cosine_distance

trial = parse_trial_record(build_funnel_corpus()[0])
text = compose_embedding_text(trial)
print(f"composed text for {trial.nct_id} ({len(text)} chars):\n{text[:300]}...\n")

chunks = chunk_text(text, max_chunk_chars=120, overlap_chars=50, nct_id=trial.nct_id)
print(f"{len(chunks)} chunks of <=120 chars with a 50-char overlap:")
for c in chunks[:4]:
    print(f"  seq {c.seq}: [{c.start_char:4d},{c.end_char:4d})  {c.text[:60]!r}")

# dropping the first 50 chars of every chunk after the first reconstructs the text
reassembled = chunks[0].text + "".join(c.text[50:] for c in chunks[1:])
assert reassembled == text
print("reconstruction from overlapping chunks: exact\n")

embedder = MockEmbedder(dim=256, seed=11)
near = "sotorasib for non-small cell lung adenocarcinoma"
far = "a cookbook of vegetarian pasta recipes"
print(f"distance(trial, {near!r}) = {cosine_distance(embedder.embed(text), embedder.embed(near)):.3f}")
print(f"distance(trial, {far!r})  = {cosine_distance(embedder.embed(text), embedder.embed(far)):.3f}")
