"""NDCG, MAP and EntityRecall over ranked lists, plus run/report file handling."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .kbdata import Document, Query
from .lexical import RankedList
from .matching import text_match

log = logging.getLogger(__name__)

METRICS = ("ndcg", "map", "entity_recall")


def _ids(ranked: Sequence) -> list[str]:
    return [r[0] if isinstance(r, tuple) else r for r in ranked]


def ndcg_at_k(ranked: Sequence, gold: set[str], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not gold:
        raise ValueError("empty gold set")
    dcg = sum(1.0 / math.log2(i + 2) for i, d in enumerate(_ids(ranked)[:k]) if d in gold)
    ideal = sum(1.0 / math.log2(i + 2) for i in range(min(len(gold), k)))
    return dcg / ideal


def map_at_k(ranked: Sequence, gold: set[str], k: int) -> float:
    """Average precision truncated at k, normalized by min(|gold|, k)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not gold:
        raise ValueError("empty gold set")
    hits, total = 0, 0.0
    for i, d in enumerate(_ids(ranked)[:k], start=1):
        if d in gold:
            hits += 1
            total += hits / i
    return total / min(len(gold), k)


def entity_recall_at_k(ranked: Sequence, query: Query, corpus: Mapping[str, Document], k: int) -> float:
    """Fraction of answer entities co-mentioned with the query's first entity in one top-k document."""
    if not query.answer_entities:
        raise ValueError(f"query {query.query_id} has no answer entities")
    anchor = query.query_entities[0]
    docs = [corpus[d] for d in _ids(ranked)[:k] if d in corpus]
    docs = [doc for doc in docs if text_match(anchor, doc)]
    found = sum(1 for a in query.answer_entities if any(text_match(a, doc) for doc in docs))
    return found / len(query.answer_entities)


@dataclass
class EvalReport:
    cutoffs: tuple[int, ...]
    per_query: dict[str, dict[str, float]]
    skipped: dict[str, list[str]] = field(default_factory=dict)
    name: str = "run"

    @property
    def means(self) -> dict[str, float]:
        """Mean over evaluated queries, in percent."""
        keys = [f"{m}@{k}" for m in METRICS for k in self.cutoffs]
        n = len(self.per_query)
        return {key: (100.0 * sum(v[key] for v in self.per_query.values()) / n if n else 0.0) for key in keys}

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "cutoffs": list(self.cutoffs),
            "n_queries": len(self.per_query),
            "metrics": self.means,
            "skipped": self.skipped,
            "per_query": self.per_query,
        }

    def write(self, json_path: str | Path, csv_path: str | Path | None = None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True), encoding="utf-8")
        if csv_path is None:
            return
        keys = [f"{m}@{k}" for m in METRICS for k in self.cutoffs]
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["query_id", *keys])
            for qid in sorted(self.per_query):
                w.writerow([qid, *(f"{self.per_query[qid][k]:.6f}" for k in keys)])


def evaluate_run(
    run: Mapping[str, RankedList],
    qrels: Mapping[str, set[str]],
    queries: Mapping[str, Query],
    corpus: Mapping[str, Document],
    cutoffs: Sequence[int] = (10, 50),
    name: str = "run",
) -> EvalReport:
    """Per-query metrics over every query in ``qrels``.

    Queries with no gold document present in the corpus, or without answer
    entities, are skipped and listed. A query missing from the run scores
    zero on every metric.
    """
    unknown = sorted(set(run) - set(queries))
    if unknown:
        raise KeyError(f"run contains {len(unknown)} unknown queries, e.g. {unknown[0]!r}")
    skipped: dict[str, list[str]] = defaultdict(list)
    per_query: dict[str, dict[str, float]] = {}
    for qid in sorted(qrels):
        gold = {d for d in qrels[qid] if d in corpus}
        if not qrels[qid]:
            skipped["empty_gold"].append(qid)
            continue
        if not gold:
            skipped["gold_not_in_corpus"].append(qid)
            continue
        query = queries.get(qid)
        if query is None or not query.answer_entities:
            skipped["no_answer_entities"].append(qid)
            continue
        ranked = run.get(qid)
        if ranked is None:
            log.warning("query %s missing from run; scored as zero", qid)
            skipped["missing_from_run_scored_zero"].append(qid)
            ranked = []
        row = {}
        for k in cutoffs:
            row[f"ndcg@{k}"] = ndcg_at_k(ranked, gold, k)
            row[f"map@{k}"] = map_at_k(ranked, gold, k)
            row[f"entity_recall@{k}"] = entity_recall_at_k(ranked, query, corpus, k)
        per_query[qid] = row
    return EvalReport(tuple(cutoffs), per_query, dict(skipped), name)


# -- files --------------------------------------------------------------------


def write_run(path: str | Path, run: Mapping[str, RankedList]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(run):
            for rank, (doc_id, score) in enumerate(run[qid], start=1):
                fh.write(f"{qid}\t{doc_id}\t{rank}\t{score:.8f}\n")


def read_run(path: str | Path) -> dict[str, RankedList]:
    """Read ``query_id doc_id rank score`` TSV lines, ordered by rank."""
    rows: dict[str, list[tuple[int, str, float]]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{line_no}: expected 4 tab-separated columns")
            qid, doc_id, rank, score = parts
            rows[qid].append((int(rank), doc_id, float(score)))
    return {qid: [(d, s) for _, d, s in sorted(v)] for qid, v in rows.items()}


def write_qrels(path: str | Path, qrels: Mapping[str, Iterable[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(qrels):
            for doc_id in sorted(qrels[qid]):
                fh.write(f"{qid}\t{doc_id}\t1\n")


def read_qrels(path: str | Path) -> dict[str, set[str]]:
    out: dict[str, set[str]] = defaultdict(set)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                qid, doc_id, rel = line.rstrip("\n").split("\t")
                if int(rel) > 0:
                    out[qid].add(doc_id)
    return dict(out)
