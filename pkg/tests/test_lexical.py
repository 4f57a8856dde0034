import math

import pytest

from kbcurate.kbdata import Document, EntityRef, Query
from kbcurate.lexical import Bm25Params, InvertedIndex, bm25_negatives, bm25_search, build_index, tokenize

FIVE_DOCS = {
    "d1": Document("d1", "SMO mutations", "smo smo vismodegib resistance in basal cell carcinoma"),
    "d2": Document("d2", "Vismodegib", "vismodegib response"),
    "d3": Document("d3", "BRAF", "braf trametinib melanoma"),
    "d4": Document("d4", "Hedgehog", "smo pathway signalling in development and disease models"),
    "d5": Document("d5", "Other", "unrelated text about kinases"),
}


def _oracle(docs, query, k1=1.2, b=0.75):
    """Direct evaluation of the scoring formula with plain lists."""
    toks = {d: tokenize(doc.text) for d, doc in docs.items()}
    n = len(docs)
    avgdl = sum(len(t) for t in toks.values()) / n
    scores = {}
    for d, t in toks.items():
        s = 0.0
        for term in set(tokenize(query)):
            df = sum(1 for u in toks.values() if term in u)
            if df == 0:
                continue
            tf = t.count(term)
            idf = math.log((n - df + 0.5) / (df + 0.5) + 1)
            s += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len(t) / avgdl))
        if s > 0:
            scores[d] = s
    return sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))


class TestTokenize:
    def test_basic(self):
        assert tokenize("SMO L412F mutation") == ["smo", "l412f", "mutation"]

    def test_empty(self):
        assert tokenize("") == []

    def test_variant_prefix(self):
        assert tokenize("p.L412F") == ["p", "l412f"]

    def test_underscore_splits(self):
        assert tokenize("a_b--c") == ["a", "b", "c"]


class TestBm25:
    def test_params_validated(self):
        with pytest.raises(ValueError):
            Bm25Params(k1=-1)
        with pytest.raises(ValueError):
            Bm25Params(b=1.5)

    def test_single_doc(self):
        idx = build_index({"a": Document("a", "", "smo")})
        ((doc, score),) = bm25_search(idx, "smo", 5)
        assert doc == "a" and score > 0

    def test_absent_term(self):
        assert bm25_search(build_index(FIVE_DOCS), "osimertinib", 3) == []

    def test_empty_query(self):
        assert bm25_search(build_index(FIVE_DOCS), "?!", 3) == []

    def test_oracle_five_docs(self):
        got = bm25_search(build_index(FIVE_DOCS), "smo vismodegib", 3)
        want = _oracle(FIVE_DOCS, "smo vismodegib")[:3]
        assert [d for d, _ in got] == [d for d, _ in want]
        for (_, s), (_, t) in zip(got, want):
            assert s == pytest.approx(t, rel=1e-12)

    def test_oracle_non_default_params(self):
        idx = build_index(FIVE_DOCS, Bm25Params(k1=2.0, b=0.3))
        got = bm25_search(idx, "smo braf kinases", 10)
        want = _oracle(FIVE_DOCS, "smo braf kinases", 2.0, 0.3)
        assert [(d, pytest.approx(s)) for d, s in want] == got

    def test_k_covers_all_matches(self):
        idx = build_index(FIVE_DOCS)
        assert {d for d, _ in bm25_search(idx, "smo vismodegib", 100)} == {"d1", "d2", "d4"}

    def test_ties_by_doc_id(self):
        docs = {d: Document(d, "", "smo") for d in ("c", "a", "b")}
        assert [d for d, _ in bm25_search(build_index(docs), "smo", 3)] == ["a", "b", "c"]

    def test_invariants(self):
        idx = build_index(FIVE_DOCS)
        assert idx.df("smo") == len(idx.postings["smo"]) == 2
        assert idx.avgdl == pytest.approx(sum(idx.doc_len) / 5)

    def test_unrelated_doc_keeps_order(self):
        before = bm25_search(build_index(FIVE_DOCS), "smo vismodegib", 5)
        more = dict(FIVE_DOCS, d6=Document("d6", "", "nothing relevant here"))
        after = bm25_search(build_index(more), "smo vismodegib", 5)
        assert [d for d, _ in before] == [d for d, _ in after]

    def test_deterministic(self):
        a = bm25_search(build_index(FIVE_DOCS), "smo pathway", 5)
        b = bm25_search(build_index(dict(reversed(FIVE_DOCS.items()))), "smo pathway", 5)
        assert a == b

    def test_save_load(self, tmp_path):
        idx = build_index(FIVE_DOCS, Bm25Params(1.5, 0.5))
        idx.save(tmp_path / "bm25.json")
        again = InvertedIndex.load(tmp_path / "bm25.json")
        assert again.params == idx.params
        assert bm25_search(again, "smo vismodegib", 5) == bm25_search(idx, "smo vismodegib", 5)


class TestBm25Negatives:
    def _query(self, gene="SMO"):
        return Query("q", "po", (EntityRef(gene, (), "Gene"), EntityRef("L412F")),
                     f"Treatment for gene {gene} and variant L412F?", [EntityRef("Vismodegib")], {"d1"})

    def test_gold_excluded(self):
        idx = build_index(FIVE_DOCS)
        got = bm25_negatives(idx, self._query(), FIVE_DOCS, {"d1"}, 50)
        assert "d1" not in got

    def test_only_gene_mentions(self):
        idx = build_index(FIVE_DOCS)
        got = bm25_negatives(idx, self._query(), FIVE_DOCS, set(), 50)
        ranked = [d for d, _ in bm25_search(idx, self._query().rendered_text, 5)]
        assert got == [d for d in ranked if d in ("d1", "d4")]
        assert sorted(got) == ["d1", "d4"]

    def test_gene_nowhere(self):
        idx = build_index(FIVE_DOCS)
        assert bm25_negatives(idx, self._query("EGFR"), FIVE_DOCS, set(), 50) == []

    def test_limit(self):
        idx = build_index(FIVE_DOCS)
        assert len(bm25_negatives(idx, self._query(), FIVE_DOCS, set(), 1)) == 1
