"""Cosine distance, the mock embedder, and exactness of the chunk index."""

import random
import struct

import numpy as np
import pytest

from trialmatch.vecindex import (
    ChunkEntry,
    DimensionMismatch,
    MockEmbedder,
    SearchHit,
    VectorIndex,
    ZeroVector,
    cosine_distance,
)


class TestCosineDistance:
    def test_self_distance_zero(self):
        v = [0.3, -1.2, 4.0]
        assert cosine_distance(v, v) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_distance([1, 0], [0, 1]) == pytest.approx(1.0)

    def test_antipodal(self):
        assert cosine_distance([1, 0], [-1, 0]) == pytest.approx(2.0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine_distance([1, 0], [1, 0, 0])

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            cosine_distance([0, 0], [1, 0])

    def test_bounds_random(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            a, b = rng.normal(size=12), rng.normal(size=12)
            d = cosine_distance(a, b)
            assert -1e-9 <= d <= 2 + 1e-9


class TestMockEmbedder:
    def test_deterministic(self):
        embedder = MockEmbedder(dim=64, seed=3)
        a = embedder.embed("metastatic melanoma with BRAF mutation")
        b = embedder.embed("metastatic melanoma with BRAF mutation")
        assert np.array_equal(a, b)

    def test_unit_norm(self):
        embedder = MockEmbedder(dim=128, seed=0)
        for text in ("", "x", "some longer clinical text with many trigrams"):
            assert np.linalg.norm(embedder.embed(text)) == pytest.approx(1.0, abs=1e-6)

    def test_shared_ngrams_are_closer(self):
        # Hand-built triple: near-copy vs unrelated wording.
        embedder = MockEmbedder(dim=256, seed=1)
        base = "advanced lung adenocarcinoma with kras mutation"
        near = "advanced lung adenocarcinoma with kras mutations"
        far = "pediatric ependymoma radiotherapy quality of life"
        d_near = cosine_distance(embedder.embed(base), embedder.embed(near))
        d_far = cosine_distance(embedder.embed(base), embedder.embed(far))
        assert d_near < d_far

    def test_seed_changes_vectors(self):
        a = MockEmbedder(dim=64, seed=1).embed("text")
        b = MockEmbedder(dim=64, seed=2).embed("text")
        assert not np.array_equal(a, b)


def brute_force_search(entries, query, k, allow_set=None):
    """Exhaustive-scan oracle: all distances, group by trial, min, sort."""
    query = np.asarray(query, dtype=np.float64)
    qnorm = float(np.linalg.norm(query))
    per_trial = {}
    for entry in entries:
        if allow_set is not None and entry.nct_id not in allow_set:
            continue
        row = np.asarray(entry.vector, dtype=np.float64)
        d = 1.0 - float(np.dot(row, query)) / (float(np.linalg.norm(row)) * qnorm)
        prev = per_trial.get(entry.nct_id)
        if prev is None or d < prev[0] or (d == prev[0] and entry.seq < prev[1]):
            per_trial[entry.nct_id] = (d, entry.seq)
    hits = [SearchHit(nct_id, d, seq) for nct_id, (d, seq) in per_trial.items()]
    hits.sort(key=lambda h: (h.distance, h.nct_id))
    return hits[:k]


def random_entries(rng, n_trials, max_chunks, dim):
    entries = []
    for t in range(n_trials):
        for seq in range(rng.randint(1, max_chunks)):
            vec = np.array([rng.gauss(0, 1) for _ in range(dim)], dtype=np.float32)
            if not np.any(vec):
                vec[0] = 1.0
            entries.append(ChunkEntry(f"NCT{t:08d}", seq, vec))
    return entries


class TestVectorIndex:
    def test_index_counts_and_reindex(self):
        index = VectorIndex(dim=4)
        entries = [ChunkEntry("NCT00000001", i, np.ones(4)) for i in range(10)]
        assert index.index_chunks(entries) == 10
        assert len(index) == 10
        index.index_chunks([ChunkEntry("NCT00000001", 3, np.full(4, 2.0))])
        assert len(index) == 10

    def test_dimension_mismatch(self):
        index = VectorIndex(dim=4)
        with pytest.raises(DimensionMismatch):
            index.index_chunks([ChunkEntry("NCT00000001", 0, np.ones(5))])

    def test_zero_vector_rejected(self):
        index = VectorIndex(dim=4)
        with pytest.raises(ZeroVector):
            index.index_chunks([ChunkEntry("NCT00000001", 0, np.zeros(4))])

    def test_empty_allow_set(self):
        index = VectorIndex(dim=4)
        index.index_chunks([ChunkEntry("NCT00000001", 0, np.ones(4))])
        assert index.search(np.ones(4), k=5, allow_set=set()) == []

    def test_k_covers_all_allowed(self):
        index = VectorIndex(dim=4)
        rng = random.Random(0)
        entries = random_entries(rng, n_trials=6, max_chunks=3, dim=4)
        index.index_chunks(entries)
        allow = {"NCT00000001", "NCT00000003", "NCT00000005"}
        hits = index.search(np.ones(4), k=50, allow_set=allow)
        assert sorted(h.nct_id for h in hits) == sorted(allow)
        assert len({h.nct_id for h in hits}) == len(hits)

    def test_matches_brute_force_on_random_corpus(self):
        rng = random.Random(42)
        entries = random_entries(rng, n_trials=40, max_chunks=8, dim=16)
        index = VectorIndex(dim=16)
        index.index_chunks(entries)
        for _ in range(20):
            query = np.array([rng.gauss(0, 1) for _ in range(16)])
            allow = None
            if rng.random() < 0.5:
                allow = {f"NCT{t:08d}" for t in rng.sample(range(40), k=rng.randint(0, 40))}
            k = rng.randint(1, 15)
            got = index.search(query, k=k, allow_set=allow)
            want = brute_force_search(entries, query, k, allow)
            assert [(h.nct_id, h.best_seq) for h in got] == [(h.nct_id, h.best_seq) for h in want]
            assert np.allclose([h.distance for h in got], [h.distance for h in want], atol=1e-9)
            if allow is not None:
                assert all(h.nct_id in allow for h in got)
            assert all(-1e-9 <= h.distance <= 2 + 1e-9 for h in got)


class TestIndexFile:
    def test_round_trip_preserves_search(self, tmp_path):
        rng = random.Random(3)
        entries = random_entries(rng, n_trials=12, max_chunks=4, dim=8)
        index = VectorIndex(dim=8)
        index.index_chunks(entries)
        path = tmp_path / "chunks.tmvi"
        index.save(path)
        loaded = VectorIndex.load(path)
        assert len(loaded) == len(index)
        query = np.array([rng.gauss(0, 1) for _ in range(8)])
        assert index.search(query, k=12) == loaded.search(query, k=12)

    def test_header_layout_is_bit_exact(self, tmp_path):
        index = VectorIndex(dim=2)
        index.index_chunks([ChunkEntry("NCT00000007", 3, np.array([1.0, 2.0]))])
        path = tmp_path / "chunks.tmvi"
        index.save(path)
        blob = path.read_bytes()
        assert blob[:4] == b"TMVI"
        version, dim = struct.unpack_from("<II", blob, 4)
        (count,) = struct.unpack_from("<Q", blob, 12)
        assert (version, dim, count) == (1, 2, 1)
        (id_len,) = struct.unpack_from("<H", blob, 20)
        assert id_len == 11
        assert blob[22 : 22 + 11] == b"NCT00000007"
        (seq,) = struct.unpack_from("<I", blob, 33)
        assert seq == 3
        values = struct.unpack_from("<2f", blob, 37)
        assert values == (1.0, 2.0)
        assert len(blob) == 37 + 8

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.tmvi"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            VectorIndex.load(path)
