"""Tokenizer and a from-scratch BM25 inverted index."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .kbdata import Document, Query

TOKEN_RE = re.compile(r"[^\W_]+")
INDEX_FORMAT = "kbcurate-bm25"
INDEX_VERSION = 1

RankedList = list[tuple[str, float]]


def tokenize(text: str) -> list[str]:
    return TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Bm25Params:
    k1: float = 1.2
    b: float = 0.75

    def __post_init__(self) -> None:
        if self.k1 < 0 or not 0 <= self.b <= 1:
            raise ValueError(f"invalid BM25 params k1={self.k1} b={self.b}")


@dataclass
class InvertedIndex:
    doc_ids: list[str]
    doc_len: list[int]
    postings: dict[str, list[tuple[int, int]]]
    params: Bm25Params = field(default_factory=Bm25Params)

    @property
    def n_docs(self) -> int:
        return len(self.doc_ids)

    @property
    def avgdl(self) -> float:
        return sum(self.doc_len) / len(self.doc_len) if self.doc_len else 0.0

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def save(self, path: str | Path) -> None:
        obj = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "params": {"k1": self.params.k1, "b": self.params.b},
            "doc_ids": self.doc_ids,
            "doc_len": self.doc_len,
            "postings": {t: [list(p) for p in plist] for t, plist in sorted(self.postings.items())},
        }
        Path(path).write_text(json.dumps(obj), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "InvertedIndex":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        if obj.get("format") != INDEX_FORMAT or obj.get("version") != INDEX_VERSION:
            raise ValueError(f"{path}: not a {INDEX_FORMAT} v{INDEX_VERSION} file")
        postings = {t: [(int(i), int(tf)) for i, tf in plist] for t, plist in obj["postings"].items()}
        return cls(obj["doc_ids"], obj["doc_len"], postings, Bm25Params(**obj["params"]))


def build_index(
    corpus: Mapping[str, Document] | Iterable[Document], params: Bm25Params | None = None
) -> InvertedIndex:
    docs = corpus.values() if isinstance(corpus, Mapping) else corpus
    docs = sorted(docs, key=lambda d: d.doc_id)
    postings: dict[str, list[tuple[int, int]]] = {}
    lengths = []
    for i, doc in enumerate(docs):
        tokens = tokenize(doc.text)
        lengths.append(len(tokens))
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, []).append((i, tf))
    return InvertedIndex([d.doc_id for d in docs], lengths, postings, params or Bm25Params())


def bm25_scores(index: InvertedIndex, query_text: str) -> dict[int, float]:
    """Score every document sharing at least one (deduplicated) query term."""
    k1, b = index.params.k1, index.params.b
    avgdl = index.avgdl or 1.0
    scores: dict[int, float] = {}
    for term in dict.fromkeys(tokenize(query_text)):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for i, tf in plist:
            norm = k1 * (1.0 - b + b * index.doc_len[i] / avgdl)
            scores[i] = scores.get(i, 0.0) + idf * tf * (k1 + 1.0) / (tf + norm)
    return scores


def bm25_search(index: InvertedIndex, query_text: str, k: int) -> RankedList:
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = bm25_scores(index, query_text)
    ranked = sorted(scores.items(), key=lambda kv: (-kv[1], index.doc_ids[kv[0]]))
    return [(index.doc_ids[i], s) for i, s in ranked[:k]]


def bm25_negatives(
    index: InvertedIndex,
    query: Query,
    corpus: Mapping[str, Document],
    exclude: set[str],
    limit: int,
) -> list[str]:
    """Top BM25 hits for the query that mention its first entity and are not excluded."""
    from .matching import text_match

    if limit < 1:
        return []
    anchor = query.query_entities[0]
    out = []
    for doc_id, _ in bm25_search(index, query.rendered_text, index.n_docs or 1):
        if doc_id in exclude:
            continue
        doc = corpus.get(doc_id)
        if doc is not None and text_match(anchor, doc):
            out.append(doc_id)
            if len(out) == limit:
                break
    return out
