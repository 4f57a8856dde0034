"""End-to-end glue: data preparation, mining, training, runs and the synthetic benchmark."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .config import PipelineConfig
from .encoder import EncoderModel, TrainConfig, TrainResult, encode_many, scale_by_idf, train
from .evaluation import EvalReport, evaluate_run
from .kbdata import Document, KBRecord, Query, SplitAssignment, render_queries, split_dataset
from .lexical import InvertedIndex, RankedList, bm25_search, build_index
from .matching import MarginClassTable, binary_margin_table
from .sampling import MiningContext, PositiveStats, TrainingExample, build_training_set
from .synthkit import SynthBundle, generate
from .vindex import VectorIndex, index_build, index_search

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    """Everything derived from one KB + corpus before any model exists."""

    records: list[KBRecord]
    incomplete: list[KBRecord]
    corpus: dict[str, Document]
    queries: dict[str, Query]
    splits: SplitAssignment
    bm25: InvertedIndex
    stats: dict = field(default_factory=dict)

    def split_queries(self, split: str) -> list[Query]:
        return [q for q in self.queries.values() if self.splits.split_of(q) == split]

    def qrels(self, split: str) -> dict[str, set[str]]:
        return {q.query_id: set(q.gold_doc_ids) for q in self.split_queries(split)}

    @property
    def heldout_docs(self) -> set[str]:
        """Documents referenced by dev or test queries; never used in training."""
        return {d for q in self.queries.values() if self.splits.split_of(q) != "train" for d in q.gold_doc_ids}

    def train_records(self, schema) -> list[KBRecord]:
        return [
            r for r in self.records + self.incomplete
            if self.splits.groups.get(r.group_key(schema)) == "train"
        ]


def prepare(
    cfg: PipelineConfig,
    records: Sequence[KBRecord],
    incomplete: Sequence[KBRecord],
    corpus: Mapping[str, Document],
) -> Prepared:
    queries = render_queries(records, cfg.schema)
    splits = split_dataset(queries, cfg.split_ratios, cfg.seed)
    prep = Prepared(
        list(records), list(incomplete), dict(corpus), {q.query_id: q for q in queries},
        splits, build_index(corpus, cfg.bm25),
    )
    prep.stats = {
        "records": len(records),
        "incomplete": len(incomplete),
        "documents": len(corpus),
        "queries": {s: len(prep.split_queries(s)) for s in ("train", "dev", "test")},
    }
    return prep


def prepare_bundle(cfg: PipelineConfig, bundle: SynthBundle) -> Prepared:
    return prepare(cfg, bundle.records, bundle.incomplete, bundle.corpus)


def mine(
    cfg: PipelineConfig, prep: Prepared, table: MarginClassTable | None = None, stats: PositiveStats | None = None
) -> list[TrainingExample]:
    """Training examples from train-split records only."""
    ctx = MiningContext(
        cfg.schema, table or cfg.table, prep.train_records(cfg.schema), prep.corpus, prep.bm25,
        blocked=prep.heldout_docs,
    )
    return build_training_set(ctx, cfg.sampler, stats)


def warm_start(cfg: PipelineConfig, prep: Prepared, seed: int | None = None) -> EncoderModel:
    """Initial encoder, idf-scaled over the corpus and the training queries."""
    enc = cfg.encoder
    model = EncoderModel.init(enc.n_features, enc.dim, cfg.seed if seed is None else seed, enc.hash_seed, enc.init)
    if enc.idf_power:
        texts = [d.encoder_text for d in prep.corpus.values()]
        texts += [q.rendered_text for q in prep.split_queries("train")]
        scale_by_idf(model, texts, enc.idf_power)
    return model


def train_dense(
    cfg: PipelineConfig,
    prep: Prepared,
    examples: Sequence[TrainingExample],
    init: EncoderModel,
    train_cfg: TrainConfig | None = None,
) -> TrainResult:
    return train(
        init,
        examples,
        {qid: q.rendered_text for qid, q in prep.queries.items()},
        {d: doc.encoder_text for d, doc in prep.corpus.items()},
        train_cfg or cfg.train,
    )


def dense_run(
    model: EncoderModel, queries: Sequence[Query], k: int, index: VectorIndex | None = None,
    corpus: Mapping[str, Document] | None = None,
) -> dict[str, RankedList]:
    if index is None:
        if corpus is None:
            raise ValueError("need an index or a corpus")
        index = index_build(model, corpus)
    vecs = encode_many(model, [q.rendered_text for q in queries])
    return {q.query_id: index_search(index, v, k) for q, v in zip(queries, vecs)}


def bm25_run(index: InvertedIndex, queries: Sequence[Query], k: int) -> dict[str, RankedList]:
    return {q.query_id: bm25_search(index, q.rendered_text, k) for q in queries}


# -- synthetic benchmark -------------------------------------------------------


@dataclass
class BenchmarkResult:
    split: str
    bm25: EvalReport
    full: list[EvalReport]
    binary: list[EvalReport]
    seconds: float

    @staticmethod
    def _mean(reports: Sequence[EvalReport]) -> dict[str, float]:
        keys = reports[0].means.keys()
        return {k: float(np.mean([r.means[k] for r in reports])) for k in keys}

    def summary(self) -> dict[str, dict[str, float]]:
        return {"bm25": self.bm25.means, "full": self._mean(self.full), "binary": self._mean(self.binary)}

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "seconds": round(self.seconds, 2),
            "mean": self.summary(),
            "per_seed": {
                "full": [r.means for r in self.full],
                "binary": [r.means for r in self.binary],
            },
        }


def run_benchmark(cfg: PipelineConfig, split: str = "test", bundle: SynthBundle | None = None) -> BenchmarkResult:
    """BM25 against the full and the binary-margin dense pipelines on one bundle.

    Data, splits and mined training sets are fixed by ``cfg.seed``; each
    dense pipeline is trained once per seed in ``cfg.benchmark_seeds``.
    """
    t0 = time.perf_counter()
    bundle = bundle or generate(cfg.synth, cfg.schema)
    prep = prepare_bundle(cfg, bundle)
    queries = prep.split_queries(split)
    qrels = prep.qrels(split)
    k = max(cfg.cutoffs)

    def score(run, name):
        return evaluate_run(run, qrels, prep.queries, prep.corpus, cfg.cutoffs, name)

    bm25 = score(bm25_run(prep.bm25, queries, k), "bm25")
    reports: dict[str, list[EvalReport]] = {"full": [], "binary": []}
    for name, table in (("full", cfg.table), ("binary", binary_margin_table(cfg.table))):
        examples = mine(cfg, prep, table)
        for seed in cfg.benchmark_seeds:
            init = warm_start(cfg, prep, seed)
            train_cfg = TrainConfig(**{**cfg.train.__dict__, "seed": seed})
            model = train_dense(cfg, prep, examples, init, train_cfg).model
            reports[name].append(score(dense_run(model, queries, k, corpus=prep.corpus), f"{name}-{seed}"))
            log.info("%s seed %d: %s", name, seed, reports[name][-1].means)
    return BenchmarkResult(split, bm25, reports["full"], reports["binary"], time.perf_counter() - t0)
