"""Training-set assembly: layered positives, class-balanced negatives, audit, batching."""

from __future__ import annotations

import json
import zlib
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kbdata import Document, KBRecord, Query, RelationSchema, query_id_for, render_queries
from .lexical import InvertedIndex, bm25_negatives
from .matching import (
    MarginAssignment,
    MarginClassTable,
    classify_positive,
    f_pattern,
    filled_pattern,
    g_pattern,
    text_match,
)


@dataclass(frozen=True)
class TrainingExample:
    query_id: str
    doc_id: str
    label: int
    mu: float
    class_id: int
    source: str
    # positive document this example was mined for; equals doc_id for positives
    anchor_doc_id: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class SamplerConfig:
    max_per_class: int = 50
    seed: int = 7
    random_pool: int = 50
    bm25_depth: int = 50

    def __post_init__(self) -> None:
        if self.max_per_class < 1:
            raise ValueError("max_per_class must be >= 1")
        if self.random_pool < 0 or self.bm25_depth < 0:
            raise ValueError("random_pool and bm25_depth must be >= 0")


@dataclass
class PositiveStats:
    skipped: int = 0
    histogram: Counter = field(default_factory=Counter)


def _merge_answers(records: Sequence[KBRecord], schema: RelationSchema) -> KBRecord:
    """One record carrying the union of answers of records sharing query and doc."""
    first = records[0]
    if len(records) == 1:
        return first
    seen, answers = set(), []
    for rec in records:
        for e in rec.entities(schema.answer_slot):
            if e.key not in seen:
                seen.add(e.key)
                answers.append(e)
    values = dict(first.slot_values)
    values[schema.answer_slot] = tuple(answers)
    return KBRecord(first.record_id, values, first.doc_id, first.line_no)


def positive_units(records: Iterable[KBRecord], schema: RelationSchema) -> dict[tuple[str, str], KBRecord]:
    """(query_id, doc_id) -> merged record, in sorted key order."""
    grouped: dict[tuple[str, str], list[KBRecord]] = defaultdict(list)
    for rec in records:
        qid = query_id_for(schema, [rec.slot_values[s][0] for s in schema.query_slots])
        grouped[(qid, rec.doc_id)].append(rec)
    return {k: _merge_answers(grouped[k], schema) for k in sorted(grouped)}


def build_positives(
    records: Iterable[KBRecord],
    corpus: Mapping[str, Document],
    table: MarginClassTable,
    schema: RelationSchema,
    stats: PositiveStats | None = None,
) -> list[TrainingExample]:
    """One labelled example per (query, referenced document).

    Records whose document is missing from the corpus are skipped and
    counted in ``stats.skipped``.
    """
    stats = stats if stats is not None else PositiveStats()
    out = []
    for (qid, doc_id), rec in positive_units(records, schema).items():
        doc = corpus.get(doc_id)
        if doc is None:
            stats.skipped += 1
            continue
        cls = classify_positive(rec, doc, table, schema)
        stats.histogram[cls.class_id] += 1
        out.append(TrainingExample(qid, doc_id, 1, cls.mu, cls.class_id, "kb", doc_id))
    return out


def _stable_seed(*parts: str) -> int:
    return zlib.crc32("\x1f".join(parts).encode("utf-8"))


class MiningContext:
    """Precomputed state shared by all positives of one training set.

    ``records`` is the pool of KB records negatives are drawn from (complete
    and incomplete). ``blocked`` lists documents that may never be emitted,
    e.g. documents referenced by held-out records.
    """

    def __init__(
        self,
        schema: RelationSchema,
        table: MarginClassTable,
        records: Sequence[KBRecord],
        corpus: Mapping[str, Document],
        bm25_index: InvertedIndex | None = None,
        blocked: Iterable[str] = (),
    ):
        self.schema = schema
        self.table = table
        self.corpus = corpus
        self.bm25_index = bm25_index
        self.blocked = frozenset(blocked)
        self.records = [r for r in records if r.doc_id in corpus]
        self.units = positive_units([r for r in self.records if r.has_answer(schema)], schema)
        self.queries = {q.query_id: q for q in render_queries(
            [r for r in self.records if r.has_answer(schema)], schema)}
        # g on each record's own document, computed once
        self.own_g = [g_pattern(r, corpus[r.doc_id], schema) for r in self.records]
        self.filled = [filled_pattern(r, schema) for r in self.records]
        self.docs_by_group: dict[str, set[str]] = defaultdict(set)
        for r in self.records:
            self.docs_by_group[r.group_key(schema)].add(r.doc_id)
        self.doc_order = sorted(corpus)
        self._kb_cache: dict[str, dict[str, MarginAssignment]] = {}

    def kb_candidates(self, query_id: str) -> dict[str, MarginAssignment]:
        """doc_id -> hardest KB-derived class over all other records."""
        hit = self._kb_cache.get(query_id)
        if hit is not None:
            return hit
        query = self.queries[query_id]
        anchor = next(rec for (qid, _), rec in self.units.items() if qid == query_id)
        out: dict[str, MarginAssignment] = {}
        for rec, g, filled in zip(self.records, self.own_g, self.filled):
            if rec.doc_id in query.gold_doc_ids:
                continue
            f = f_pattern(anchor, rec, self.schema)
            cls = self.table.lookup_negative(f, g, filled)
            if cls is None:
                continue
            prev = out.get(rec.doc_id)
            if prev is None or (cls.mu, cls.class_id) < (prev.mu, prev.class_id):
                out[rec.doc_id] = cls
        self._kb_cache[query_id] = out
        return out


def mine_negatives(pos: TrainingExample, ctx: MiningContext, cfg: SamplerConfig) -> list[TrainingExample]:
    """Class-balanced negatives for one positive example.

    Per negative class, every qualifying candidate is collected (KB-derived
    records, BM25 hits mentioning the query's first entity, random corpus
    documents), then at most ``cfg.max_per_class`` are drawn without
    replacement. A document lands in at most one class; KB-derived
    assignments take precedence over BM25, and BM25 over random.
    """
    query = ctx.queries[pos.query_id]
    positives = {d for (qid, d) in ctx.units if qid == pos.query_id}
    exclude = set(query.gold_doc_ids) | positives | ctx.blocked
    rng = np.random.default_rng([cfg.seed, _stable_seed(pos.query_id, pos.doc_id)])

    assigned: dict[str, MarginAssignment] = {
        d: cls for d, cls in ctx.kb_candidates(pos.query_id).items() if d not in exclude
    }
    bm25_cls = ctx.table.source_class("bm25")
    if bm25_cls is not None and ctx.bm25_index is not None and cfg.bm25_depth:
        for d in bm25_negatives(ctx.bm25_index, query, ctx.corpus, exclude | set(assigned), cfg.bm25_depth):
            assigned[d] = bm25_cls
    random_cls = ctx.table.source_class("random")
    if random_cls is not None and cfg.random_pool:
        related = ctx.docs_by_group.get(query.group_key, set())
        pool = [d for d in ctx.doc_order if d not in exclude and d not in assigned and d not in related]
        if pool:
            picks = rng.choice(len(pool), size=min(cfg.random_pool, len(pool)), replace=False)
            for i in sorted(picks):
                assigned[pool[i]] = random_cls

    by_class: dict[int, list[tuple[str, MarginAssignment]]] = defaultdict(list)
    for d in sorted(assigned):
        by_class[assigned[d].class_id].append((d, assigned[d]))
    out = []
    for class_id in sorted(by_class):
        cands = by_class[class_id]
        if len(cands) > cfg.max_per_class:
            keep = np.sort(rng.choice(len(cands), size=cfg.max_per_class, replace=False))
            cands = [cands[i] for i in keep]
        for d, cls in cands:
            out.append(TrainingExample(pos.query_id, d, 0, cls.mu, cls.class_id, cls.source, pos.doc_id))
    return out


def build_training_set(
    ctx: MiningContext, cfg: SamplerConfig, stats: PositiveStats | None = None
) -> list[TrainingExample]:
    positives = build_positives(
        [r for r in ctx.records if r.has_answer(ctx.schema)], ctx.corpus, ctx.table, ctx.schema, stats
    )
    out = []
    for pos in positives:
        out.append(pos)
        out.extend(mine_negatives(pos, ctx, cfg))
    return out


def class_histogram(examples: Iterable[TrainingExample]) -> dict[str, dict[int, int]]:
    hist: dict[str, Counter] = {"positive": Counter(), "negative": Counter()}
    for e in examples:
        hist["positive" if e.label == 1 else "negative"][e.class_id] += 1
    return {k: dict(sorted(v.items())) for k, v in hist.items()}


def write_examples(path: str | Path, examples: Iterable[TrainingExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in examples:
            fh.write(e.to_json() + "\n")


def read_examples(path: str | Path) -> list[TrainingExample]:
    with open(path, encoding="utf-8") as fh:
        return [TrainingExample(**json.loads(line)) for line in fh if line.strip()]


# -- audit --------------------------------------------------------------------


def audit_negatives(
    negatives: Iterable[TrainingExample],
    queries: Mapping[str, Query],
    corpus: Mapping[str, Document],
    schema: RelationSchema,
) -> dict:
    """Share of negative documents mentioning the paired query's variant / gene.

    Either mention makes a negative potentially mislabelled.
    """
    variant_pos = schema.query_slots.index(schema.variant_slot) if schema.variant_slot else None
    n = same_variant = same_gene = 0
    for e in negatives:
        if e.label != 0:
            continue
        q, doc = queries[e.query_id], corpus[e.doc_id]
        n += 1
        same_gene += text_match(q.query_entities[0], doc)
        if variant_pos is not None:
            same_variant += text_match(q.query_entities[variant_pos], doc)
    return {
        "negatives": n,
        "same_variant": same_variant if variant_pos is not None else None,
        "same_variant_fraction": (same_variant / n if n else 0.0) if variant_pos is not None else None,
        "same_gene": same_gene,
        "same_gene_fraction": same_gene / n if n else 0.0,
    }


# -- batching -----------------------------------------------------------------


def _stratify(negatives: list[TrainingExample], rng: np.random.Generator) -> list[TrainingExample]:
    """Round-robin over classes so any window holds near-equal class counts."""
    by_class: dict[int, list[TrainingExample]] = defaultdict(list)
    for e in negatives:
        by_class[e.class_id].append(e)
    queues = []
    for class_id in sorted(by_class):
        items = by_class[class_id]
        queues.append([items[i] for i in rng.permutation(len(items))])
    out = []
    depth = max((len(q) for q in queues), default=0)
    for i in range(depth):
        out.extend(q[i] for q in queues if i < len(q))
    return out


def assemble_batches(
    examples: Sequence[TrainingExample], batch_size: int, seed: int
) -> list[list[TrainingExample]]:
    """Partition examples into batches that keep each positive with its own negatives.

    A unit is a positive plus the negatives mined for it, ordered
    positive-first and then round-robin across negative classes. Units are
    shuffled and packed greedily; a unit never shares a batch with another
    unless it fits whole, and units larger than a batch are cut into
    consecutive batches. Short batches are kept.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    units: dict[tuple[str, str], list[TrainingExample]] = defaultdict(list)
    for e in examples:
        units[(e.query_id, e.anchor_doc_id)].append(e)
    keys = sorted(units)
    ordered = []
    for i in rng.permutation(len(keys)):
        members = units[keys[i]]
        pos = [e for e in members if e.label == 1]
        neg = [e for e in members if e.label == 0]
        ordered.append(pos + _stratify(neg, rng))

    batches: list[list[TrainingExample]] = []
    current: list[TrainingExample] = []
    for unit in ordered:
        if len(current) + len(unit) > batch_size and current:
            batches.append(current)
            current = []
        while len(unit) > batch_size:
            batches.append(unit[:batch_size])
            unit = unit[batch_size:]
        current.extend(unit)
        if len(current) == batch_size:
            batches.append(current)
            current = []
    if current:
        batches.append(current)
    return batches
