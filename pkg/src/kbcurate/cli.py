"""Command-line entry point: ``kbcurate <command> [options]``.

Every command loads the packaged defaults, then ``--config``, then
``--set`` overrides and ``--seed``. The resolved configuration is echoed to
stderr and written next to the command's outputs, so each output directory
records the root seed that produced it.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure. Failures print one line to stderr::

    kbcurate: error code=3 kind=data: corpus.jsonl:4: missing or non-string field 'title'
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import yaml

from .config import ConfigError, PipelineConfig, load_config
from .encoder import EncoderModel, NumericError
from .evaluation import evaluate_run, read_qrels, read_run, write_qrels, write_run
from .kbdata import (
    SPLITS,
    KBDataError,
    SynonymTable,
    parse_corpus,
    parse_kb,
    parse_synonyms,
    write_corpus,
    write_queries,
    write_synonyms,
)
from .matching import binary_margin_table
from .pipeline import Prepared, bm25_run, dense_run, mine, prepare, run_benchmark, train_dense, warm_start
from .sampling import PositiveStats, audit_negatives, class_histogram, read_examples, write_examples
from .synthkit import CORPUS_FILE, KB_FILE, SYNONYM_FILE, generate
from .vindex import VectorIndex, index_build

log = logging.getLogger("kbcurate")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_FILE = "config.resolved.yaml"
BM25_FILE = "bm25.json"


class CLIError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


# -- helpers --------------------------------------------------------------------


def _parse_set(items: Sequence[str]) -> dict:
    """``a.b=value`` pairs into a nested mapping; values are parsed as YAML scalars."""
    out: dict = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = yaml.safe_load(value)
    return out


def _resolve_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = _parse_set(args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _config_digest(cfg: PipelineConfig) -> str:
    return hashlib.sha256(cfg.dump().encode("utf-8")).hexdigest()[:16]


def _echo_config(cfg: PipelineConfig, command: str, out: Path) -> None:
    text = cfg.dump()
    print(f"# kbcurate {command} seed={cfg.seed} config_sha256={_config_digest(cfg)}", file=sys.stderr)
    print(text, file=sys.stderr, end="")
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_FILE).write_text(text, encoding="utf-8")


def _write_manifest(cfg: PipelineConfig, command: str, out: Path, outputs: Sequence[Path]) -> None:
    """Root seed and config hash next to the outputs; no timestamps, so reruns match byte for byte."""
    _write_json(out / f"manifest.{command}.json", {
        "command": command,
        "seed": cfg.seed,
        "config": CONFIG_FILE,
        "config_sha256": _config_digest(cfg),
        "outputs": sorted(Path(p).name for p in outputs),
    })


def _data_paths(args: argparse.Namespace) -> tuple[Path, Path, Path | None]:
    data = Path(args.data) if args.data else None
    kb = Path(args.kb) if args.kb else (data / KB_FILE if data else None)
    corpus = Path(args.corpus) if args.corpus else (data / CORPUS_FILE if data else None)
    if kb is None or corpus is None:
        raise CLIError(EXIT_CONFIG, "config", "need --data DIR or both --kb and --corpus")
    synonyms = Path(args.synonyms) if args.synonyms else None
    if synonyms is None and data is not None and (data / SYNONYM_FILE).exists():
        synonyms = data / SYNONYM_FILE
    return kb, corpus, synonyms


def _load_prepared(cfg: PipelineConfig, args: argparse.Namespace) -> Prepared:
    kb, corpus_path, syn_path = _data_paths(args)
    synonyms = parse_synonyms(syn_path) if syn_path else SynonymTable()
    parsed = parse_kb(kb, cfg.schema, synonyms)
    corpus = parse_corpus(corpus_path)
    return prepare(cfg, parsed.records, parsed.incomplete, corpus)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- commands ---------------------------------------------------------------------


def cmd_ingest(cfg: PipelineConfig, args: argparse.Namespace, out: Path) -> list[Path]:
    kb, corpus_path, syn_path = _data_paths(args)
    synonyms = parse_synonyms(syn_path) if syn_path else SynonymTable()
    parsed = parse_kb(kb, cfg.schema, synonyms)
    corpus = parse_corpus(corpus_path)
    prep = prepare(cfg, parsed.records, parsed.incomplete, corpus)
    missing = sorted({r.doc_id for r in parsed.all_records} - set(corpus))
    (out / KB_FILE).write_text(Path(kb).read_text(encoding="utf-8"), encoding="utf-8")
    write_corpus(out / CORPUS_FILE, corpus)
    write_synonyms(out / SYNONYM_FILE, synonyms)
    write_queries(out / "queries.jsonl", prep.queries.values(), prep.splits)
    _write_json(out / "splits.json", prep.splits.to_json())
    for split in SPLITS:
        write_qrels(out / f"qrels.{split}.tsv", prep.qrels(split))
    prep.bm25.save(out / BM25_FILE)
    stats = dict(prep.stats, rejected=parsed.rejected, missing_documents=len(missing), seed=cfg.seed)
    _write_json(out / "stats.json", stats)
    print(json.dumps(stats, sort_keys=True))
    names = [KB_FILE, CORPUS_FILE, SYNONYM_FILE, "queries.jsonl", "splits.json", BM25_FILE, "stats.json"]
    return [out / n for n in names] + [out / f"qrels.{s}.tsv" for s in SPLITS]


def cmd_synth(cfg: PipelineConfig, args: argparse.Namespace, out: Path) -> list[Path]:
    bundle = generate(cfg.synth, cfg.schema)
    paths = bundle.write(out)
    print(json.dumps({"documents": len(bundle.corpus), "records": len(bundle.records),
                      "queries": len(bundle.qrels), "out": str(paths["kb"].parent)}, sort_keys=True))
    return list(paths.values())


def cmd_mine(cfg: PipelineConfig, args: argparse.Namespace, out: Path) -> list[Path]:
    prep = _load_prepared(cfg, args)
    table = binary_margin_table(cfg.table) if args.binary else cfg.table
    stats = PositiveStats()
    examples = mine(cfg, prep, table, stats)
    write_examples(out / "train.jsonl", examples)
    hist = class_histogram(examples)
    report = {"examples": len(examples), "histogram": hist, "skipped_positives": stats.skipped,
              "table": table.name, "seed": cfg.seed}
    _write_json(out / "histogram.json", report)
    print(json.dumps(report, sort_keys=True))
    return [out / "train.jsonl", out / "histogram.json"]


def cmd_train(cfg: PipelineConfig, args: argparse.Namespace, out: Path) -> list[Path]:
    prep = _load_prepared(cfg, args)
    examples = read_examples(args.examples) if args.examples else mine(cfg, prep)
    unknown = {e.query_id for e in examples} - set(prep.queries)
    if unknown:
        raise KBDataError(f"{len(unknown)} training queries are not in the KB, e.g. {min(unknown)!r}")
    init = warm_start(cfg, prep)
    result = train_dense(cfg, prep, examples, init)
    result.model.save(out / "model.npz")
    result.write_trace(out / "trace.csv")
    print(json.dumps({"examples": len(examples), "epoch_loss": result.epoch_loss,
                      "checkpoint": str(out / "model.npz")}, sort_keys=True))
    return [out / "model.npz", out / "trace.csv"]


def cmd_index(cfg: PipelineConfig, args: argparse.Namespace, out: Path) -> list[Path]:
    _, corpus_path, _ = _data_paths(args)
    model = EncoderModel.load(args.checkpoint)
    index = index_build(model, parse_corpus(corpus_path))
    index.save(out / "index.npz")
    print(json.dumps({"documents": len(index), "dim": index.dim, "index": str(out / "index.npz")}))
    return [out / "index.npz"]


def cmd_search(cfg: PipelineConfig, args: argparse.Namespace, out: Path) -> list[Path]:
    prep = _load_prepared(cfg, args)
    queries = prep.split_queries(args.split)
    if args.bm25:
        run = bm25_run(prep.bm25, queries, args.k)
    else:
        if not args.checkpoint:
            raise CLIError(EXIT_CONFIG, "config", "search needs --checkpoint or --bm25")
        model = EncoderModel.load(args.checkpoint)
        index = VectorIndex.load(args.index) if args.index else index_build(model, prep.corpus)
        run = dense_run(model, queries, args.k, index=index)
    name = args.name or ("bm25" if args.bm25 else "dense")
    path = out / f"run.{name}.{args.split}.tsv"
    write_run(path, run)
    print(json.dumps({"queries": len(run), "k": args.k, "run": str(path)}))
    return [path]


def cmd_eval(cfg: PipelineConfig, args: argparse.Namespace, out: Path) -> list[Path]:
    prep = _load_prepared(cfg, args)
    run = read_run(args.run)
    qrels = read_qrels(args.qrels) if args.qrels else prep.qrels(args.split)
    name = args.name or Path(args.run).stem
    report = evaluate_run(run, qrels, prep.queries, prep.corpus, cfg.cutoffs, name)
    report.write(out / f"report.{name}.json", out / f"report.{name}.csv")
    print(json.dumps({"name": name, "n_queries": len(report.per_query), "metrics": report.means}, sort_keys=True))
    return [out / f"report.{name}.json", out / f"report.{name}.csv"]


def cmd_audit(cfg: PipelineConfig, args: argparse.Namespace, out: Path) -> list[Path]:
    prep = _load_prepared(cfg, args)
    examples = read_examples(args.examples) if args.examples else mine(cfg, prep)
    report = audit_negatives(examples, prep.queries, prep.corpus, cfg.schema)
    report["seed"] = cfg.seed
    _write_json(out / "audit.json", report)
    print(json.dumps(report, sort_keys=True))
    return [out / "audit.json"]


def cmd_benchmark(cfg: PipelineConfig, args: argparse.Namespace, out: Path) -> list[Path]:
    result = run_benchmark(cfg, args.split)
    obj = result.to_json()
    # wall time would make the file differ between identical runs
    print(f"# benchmark took {obj.pop('seconds')} s", file=sys.stderr)
    obj["seed"] = cfg.seed
    _write_json(out / "benchmark.json", obj)
    print(json.dumps(obj["mean"], sort_keys=True))
    return [out / "benchmark.json"]


COMMANDS = {
    "ingest": (cmd_ingest, "parse a KB and corpus, render queries and assign splits"),
    "synth": (cmd_synth, "write a synthetic KB, corpus, synonym table and qrels"),
    "mine": (cmd_mine, "build the training set and its class histogram"),
    "train": (cmd_train, "train the encoder; writes a checkpoint and loss trace"),
    "index": (cmd_index, "encode the corpus into a flat vector index"),
    "search": (cmd_search, "retrieve top-k documents for one split's queries"),
    "eval": (cmd_eval, "score a run file against qrels"),
    "audit": (cmd_audit, "estimate how many negatives mention the query entities"),
    "benchmark": (cmd_benchmark, "BM25 against the full and binary-margin pipelines on synthetic data"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file merged over the defaults")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="config override such as train.epochs=0; repeatable")
    common.add_argument("--out", help="output directory (default: paths.work_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help=f"directory holding {KB_FILE}, {CORPUS_FILE} and optionally {SYNONYM_FILE}")
    data.add_argument("--kb")
    data.add_argument("--corpus")
    data.add_argument("--synonyms")

    parser = argparse.ArgumentParser(prog="kbcurate", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    parsers = {}
    for name, (_, help_text) in COMMANDS.items():
        parents = [common] if name in ("synth", "benchmark") else [common, data]
        parsers[name] = sub.add_parser(name, parents=parents, help=help_text, description=help_text)

    parsers["mine"].add_argument("--binary", action="store_true", help="use the binary-margin ablation table")
    for name in ("train", "audit"):
        parsers[name].add_argument("--examples", help="training set JSONL from `mine` (default: mine afresh)")
    parsers["index"].add_argument("--checkpoint", required=True)
    p = parsers["search"]
    p.add_argument("--checkpoint")
    p.add_argument("--index", help="index from `index` (default: encode the corpus)")
    p.add_argument("--bm25", action="store_true", help="BM25 run instead of the encoder")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--name")
    p = parsers["eval"]
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", help="qrels TSV (default: the split's KB references)")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--name")
    parsers["benchmark"].add_argument("--split", choices=SPLITS, default="test")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "k", 1) < 1:
            raise CLIError(EXIT_CONFIG, "config", "--k must be >= 1")
        cfg = _resolve_config(args)
        out = Path(args.out or cfg.paths.get("work_dir", "."))
        _echo_config(cfg, args.command, out)
        outputs = COMMANDS[args.command][0](cfg, args, out)
        _write_manifest(cfg, args.command, out, outputs)
    except CLIError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc))
    except KeyError as exc:
        return _fail(EXIT_DATA, "data", f"missing key {exc.args[0]!r}" if exc.args else "missing key")
    except (KBDataError, ValueError, OSError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    return EXIT_OK


def _fail(code: int, kind: str, message: str) -> int:
    one_line = " ".join(message.split())
    print(f"kbcurate: error code={code} kind={kind}: {one_line}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
