"""Pipeline configuration: one YAML document merged over the packaged defaults."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field, fields
from importlib.resources import files
from pathlib import Path
from typing import Any, Mapping

import yaml

from .encoder import TrainConfig
from .kbdata import SPLITS, RelationSchema
from .lexical import Bm25Params
from .matching import MarginClassTable, MarginTableError
from .sampling import SamplerConfig
from .synthkit import SynthSpec

# keys whose values are free-form mappings; their children are not checked
# against the defaults
_OPEN_KEYS = {("schemas",), ("margin_tables",)}
PATH_ENV_PREFIX = "KBCURATE_PATH_"


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class EncoderConfig:
    n_features: int = 1 << 14
    dim: int = 1024
    hash_seed: int = 13
    init: str = "lexical"
    # rows scaled by idf**idf_power before training; 0 disables the warm start
    idf_power: float = 2.0

    def __post_init__(self) -> None:
        if self.n_features < 2 or self.dim < 1:
            raise ValueError("n_features must be >= 2 and dim >= 1")
        if self.init not in ("lexical", "projection", "gaussian"):
            raise ValueError(f"unknown encoder init {self.init!r}")
        if self.idf_power < 0:
            raise ValueError("idf_power must be >= 0")


@dataclass
class PipelineConfig:
    seed: int
    dataset: str
    schemas: dict[str, RelationSchema]
    tables: dict[str, MarginClassTable]
    split_ratios: tuple[float, float, float]
    sampler: SamplerConfig
    encoder: EncoderConfig
    train: TrainConfig
    bm25: Bm25Params
    synth: SynthSpec
    cutoffs: tuple[int, ...]
    benchmark_seeds: tuple[int, ...]
    paths: dict[str, str]
    raw: dict = field(repr=False, default_factory=dict)

    @property
    def schema(self) -> RelationSchema:
        return self.schemas[self.dataset]

    @property
    def table(self) -> MarginClassTable:
        return self.tables[self.dataset]

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Same configuration under another root seed."""
        raw = copy.deepcopy(self.raw)
        raw["seed"] = seed
        return build_config(raw)

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


def default_raw() -> dict:
    text = files("kbcurate").joinpath("default_config.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def _merge(base: Any, override: Any, path: tuple[str, ...]) -> Any:
    if not isinstance(override, Mapping):
        return copy.deepcopy(override)
    if not isinstance(base, Mapping):
        raise ConfigError(f"{'.'.join(path) or '<root>'}: expected a scalar or list, got a mapping")
    out = copy.deepcopy(dict(base))
    for key, value in override.items():
        sub = (*path, str(key))
        if path in _OPEN_KEYS or (len(path) == 1 and path[0] in {k[0] for k in _OPEN_KEYS}):
            out[key] = copy.deepcopy(value)
            continue
        if key not in base:
            raise ConfigError(f"unknown config key {'.'.join(sub)}")
        out[key] = _merge(base[key], value, sub)
    return out


def _section(cls, raw: Mapping, name: str, **extra):
    obj = dict(raw.get(name) or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(obj) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {unknown}")
    obj.update(extra)
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def build_config(raw: Mapping) -> PipelineConfig:
    raw = copy.deepcopy(dict(raw))
    seed = int(raw["seed"])
    schemas: dict[str, RelationSchema] = {}
    for name, spec in (raw.get("schemas") or {}).items():
        unknown = set(spec) - {"query_slots", "answer_slot", "template", "surface", "variant_slot"}
        if unknown:
            raise ConfigError(f"schemas.{name}: unknown keys {sorted(unknown)}")
        try:
            schemas[name] = RelationSchema(
                name=name,
                query_slots=tuple(spec["query_slots"]),
                answer_slot=spec["answer_slot"],
                template=spec["template"],
                surface=dict(spec.get("surface") or {}),
                variant_slot=spec.get("variant_slot"),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"schemas.{name}: {exc}") from None
    tables: dict[str, MarginClassTable] = {}
    for name, entries in (raw.get("margin_tables") or {}).items():
        if name not in schemas:
            raise ConfigError(f"margin_tables.{name}: no schema of that name")
        try:
            tables[name] = MarginClassTable.from_config(name, schemas[name].slots, entries)
        except MarginTableError as exc:
            raise ConfigError(str(exc)) from None
    dataset = raw["dataset"]
    if dataset not in schemas or dataset not in tables:
        raise ConfigError(f"dataset {dataset!r} needs both a schema and a margin table")

    ratios = tuple(float(x) for x in raw["splits"]["ratios"])
    if len(ratios) != len(SPLITS) or any(r < 0 for r in ratios) or abs(sum(ratios) - 1) > 1e-9:
        raise ConfigError(f"splits.ratios must be {len(SPLITS)} non-negative numbers summing to 1")
    cutoffs = tuple(int(k) for k in raw["eval"]["cutoffs"])
    if not cutoffs or any(k < 1 for k in cutoffs):
        raise ConfigError("eval.cutoffs must be positive integers")
    bench = tuple(int(s) for s in raw["benchmark"]["train_seeds"])
    if not bench:
        raise ConfigError("benchmark.train_seeds must be non-empty")

    paths = {k: str(v) for k, v in (raw.get("paths") or {}).items()}
    for key in paths:
        env = os.environ.get(PATH_ENV_PREFIX + key.upper())
        if env:
            paths[key] = env
    raw["paths"] = paths

    synth = dict(raw.get("synth") or {})
    if synth.get("seed") is None:
        synth["seed"] = seed
    try:
        synth_spec = SynthSpec.from_dict(synth)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from None

    return PipelineConfig(
        seed=seed,
        dataset=dataset,
        schemas=schemas,
        tables=tables,
        split_ratios=ratios,  # type: ignore[arg-type]
        sampler=_section(SamplerConfig, raw, "sampler", seed=seed),
        encoder=_section(EncoderConfig, raw, "encoder"),
        train=_section(TrainConfig, raw, "train", seed=seed),
        bm25=_section(Bm25Params, raw, "bm25"),
        synth=synth_spec,
        cutoffs=cutoffs,
        benchmark_seeds=bench,
        paths=paths,
        raw=raw,
    )


def load_config(path: str | Path | None = None, overrides: Mapping | None = None) -> PipelineConfig:
    """Defaults, then the YAML file at ``path``, then ``overrides``."""
    raw = default_raw()
    if path is not None:
        try:
            user = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML ({exc})") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        if not isinstance(user, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = _merge(raw, user, ())
    if overrides:
        raw = _merge(raw, overrides, ())
    return build_config(raw)
