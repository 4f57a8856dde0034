import numpy as np
import pytest

from kbcurate.encoder import EncoderModel, encode
from kbcurate.kbdata import Document
from kbcurate.vindex import VectorIndex, index_build, index_search


def _scan(index, q, k):
    """Score every row, sort by (-score, doc_id)."""
    scored = [(d, float(row @ q)) for d, row in zip(index.doc_ids, index.matrix)]
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored[:k]


def _unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


class TestExactness:
    def test_random_triples(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n, d = int(rng.integers(1, 60)), int(rng.integers(1, 16))
            ids = [f"d{i:03d}" for i in rng.permutation(n)]
            index = VectorIndex(ids, _unit_rows(rng, n, d))
            q = _unit_rows(rng, 1, d)[0]
            k = int(rng.integers(1, n + 5))
            got, want = index_search(index, q, k), _scan(index, q, k)
            assert [d for d, _ in got] == [d for d, _ in want]
            assert [s for _, s in got] == pytest.approx([s for _, s in want], abs=1e-12)

    def test_ties_by_doc_id(self):
        index = VectorIndex(["c", "a", "b"], np.ones((3, 2)) / np.sqrt(2))
        assert [d for d, _ in index_search(index, np.array([1.0, 0.0]), 2)] == ["a", "b"]

    def test_duplicated_scores_across_cutoff(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
        index = VectorIndex(["z", "y", "x", "w"], rows)
        assert index_search(index, np.array([0.0, 1.0]), 2) == [("w", 1.0), ("x", 1.0)]

    def test_k_larger_than_corpus(self):
        index = VectorIndex(["a", "b"], np.eye(2))
        assert len(index_search(index, np.array([1.0, 0.0]), 10)) == 2

    def test_bad_inputs(self):
        index = VectorIndex(["a", "b"], np.eye(2))
        with pytest.raises(ValueError):
            index_search(index, np.ones(3), 1)
        with pytest.raises(ValueError):
            index_search(index, np.ones(2), 0)
        with pytest.raises(ValueError):
            VectorIndex(["a"], np.eye(2))


class TestBuild:
    def test_rows_are_encodings(self, smo_example):
        _, docs = smo_example
        model = EncoderModel.init(1 << 10, 16, seed=3, scheme="gaussian")
        index = index_build(model, docs)
        assert index.doc_ids == sorted(docs)
        for d, row in zip(index.doc_ids, index.matrix):
            assert np.allclose(row, encode(model, docs[d].encoder_text))

    def test_self_retrieval(self, smo_example):
        _, docs = smo_example
        model = EncoderModel.init(1 << 10, 64, seed=3, scheme="gaussian")
        index = index_build(model, docs)
        for d, doc in docs.items():
            assert index_search(index, encode(model, doc.encoder_text), 1)[0][0] == d

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            index_build(EncoderModel.init(16, 4), {})

    def test_save_load(self, tmp_path):
        model = EncoderModel.init(1 << 10, 8, seed=1, scheme="gaussian")
        index = index_build(model, {"1": Document("1", "a", "b"), "2": Document("2", "c", "d")})
        index.save(tmp_path / "index.npz")
        again = VectorIndex.load(tmp_path / "index.npz")
        assert again.doc_ids == index.doc_ids and np.array_equal(again.matrix, index.matrix)

    def test_load_rejects_other_files(self, tmp_path):
        np.savez(tmp_path / "x.npz", format=np.array("kbcurate-encoder"), version=np.array(1))
        with pytest.raises(ValueError):
            VectorIndex.load(tmp_path / "x.npz")
