"""Exact flat cosine index over document embeddings."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .encoder import EncoderModel, encode_many
from .kbdata import Document
from .lexical import RankedList

INDEX_FORMAT = "kbcurate-vindex"
INDEX_VERSION = 1


@dataclass
class VectorIndex:
    doc_ids: list[str]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.doc_ids):
            raise ValueError(f"{len(self.doc_ids)} ids for a matrix of shape {self.matrix.shape}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return len(self.doc_ids)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            np.savez(
                fh,
                format=np.array(INDEX_FORMAT),
                version=np.array(INDEX_VERSION),
                doc_ids=np.array(self.doc_ids, dtype=np.str_),
                matrix=self.matrix,
            )

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        with np.load(path) as z:
            if str(z["format"]) != INDEX_FORMAT or int(z["version"]) != INDEX_VERSION:
                raise ValueError(f"{path}: not a {INDEX_FORMAT} v{INDEX_VERSION} file")
            return cls([str(d) for d in z["doc_ids"]], z["matrix"].copy())


def index_build(model: EncoderModel, corpus: Mapping[str, Document]) -> VectorIndex:
    if not corpus:
        raise ValueError("cannot index an empty corpus")
    ids = sorted(corpus)
    return VectorIndex(ids, encode_many(model, [corpus[d].encoder_text for d in ids]))


def index_search(index: VectorIndex, query_vector: np.ndarray, k: int) -> RankedList:
    """Top-k rows by inner product (cosine for unit rows), ties by ascending doc_id."""
    q = np.asarray(query_vector, dtype=float)
    if q.shape != (index.dim,):
        raise ValueError(f"query has shape {q.shape}, index dimension is {index.dim}")
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = index.matrix @ q
    n = len(scores)
    if k < n:
        kth = np.partition(-scores, k - 1)[k - 1]
        cand = np.flatnonzero(-scores <= kth)
    else:
        cand = np.arange(n)
    ids = index.doc_ids
    order = sorted(cand.tolist(), key=lambda i: (-scores[i], ids[i]))[:k]
    return [(ids[i], float(scores[i])) for i in order]
