"""KB and corpus data model, file parsers, query rendering and leakage-free splits."""

from __future__ import annotations

import csv
import hashlib
import json
import random
import string
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

ANSWER_SEP = "|"
SPLITS = ("train", "dev", "test")


class KBDataError(ValueError):
    """Raised on malformed input files."""


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass(frozen=True)
class EntityRef:
    canonical: str
    synonyms: tuple[str, ...] = ()
    entity_type: str = ""
    full_name: str | None = None

    def __post_init__(self) -> None:
        seen = set()
        kept = []
        for syn in (self.canonical, *self.synonyms):
            key = normalize(syn)
            if key and key not in seen:
                seen.add(key)
                kept.append(syn)
        object.__setattr__(self, "synonyms", tuple(kept))

    @property
    def key(self) -> str:
        return normalize(self.canonical)


@dataclass
class SynonymTable:
    """Synonym lists keyed by (entity_type, normalized canonical)."""

    synonyms: dict[tuple[str, str], list[str]] = field(default_factory=dict)
    full_names: dict[tuple[str, str], str] = field(default_factory=dict)
    canonicals: dict[tuple[str, str], str] = field(default_factory=dict)

    def add(self, entity_type: str, canonical: str, synonym: str, kind: str = "") -> None:
        key = (entity_type, normalize(canonical))
        self.canonicals.setdefault(key, canonical)
        self.synonyms.setdefault(key, []).append(synonym)
        if kind == "full_name":
            self.full_names.setdefault(key, synonym)

    def entity(self, entity_type: str, canonical: str) -> EntityRef:
        key = (entity_type, normalize(canonical))
        return EntityRef(
            canonical=canonical,
            synonyms=tuple(self.synonyms.get(key, ())),
            entity_type=entity_type,
            full_name=self.full_names.get(key),
        )

    def __len__(self) -> int:
        return sum(len(v) for v in self.synonyms.values())


@dataclass(frozen=True)
class RelationSchema:
    name: str
    query_slots: tuple[str, ...]
    answer_slot: str
    template: str
    # slot -> "canonical" | "symbol_fullname"
    surface: Mapping[str, str] = field(default_factory=dict)
    variant_slot: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "query_slots", tuple(self.query_slots))
        if not self.query_slots:
            raise ValueError(f"schema {self.name!r}: query_slots must be non-empty")
        if self.answer_slot in self.query_slots:
            raise ValueError(f"schema {self.name!r}: answer slot repeated among query slots")
        fields = [f for _, f, _, _ in string.Formatter().parse(self.template) if f is not None]
        if sorted(fields) != sorted(self.query_slots):
            raise ValueError(
                f"schema {self.name!r}: template placeholders {fields} must name each "
                f"query slot {list(self.query_slots)} exactly once"
            )
        for slot, mode in self.surface.items():
            if slot not in self.query_slots or mode not in ("canonical", "symbol_fullname"):
                raise ValueError(f"schema {self.name!r}: bad surface rule {slot}={mode}")
        if self.variant_slot is not None and self.variant_slot not in self.query_slots:
            raise ValueError(f"schema {self.name!r}: variant_slot must be a query slot")

    @property
    def slots(self) -> tuple[str, ...]:
        return (*self.query_slots, self.answer_slot)

    @property
    def group_slot(self) -> str:
        return self.query_slots[0]

    @property
    def n_columns(self) -> int:
        return len(self.query_slots) + 2


@dataclass(frozen=True)
class KBRecord:
    record_id: str
    slot_values: Mapping[str, tuple[EntityRef, ...]]
    doc_id: str
    line_no: int = 0

    def entities(self, slot: str) -> tuple[EntityRef, ...]:
        return self.slot_values.get(slot, ())

    def query_key(self, schema: RelationSchema) -> tuple[str, ...]:
        return tuple(self.slot_values[s][0].key for s in schema.query_slots)

    def group_key(self, schema: RelationSchema) -> str:
        return self.slot_values[schema.group_slot][0].key

    def has_answer(self, schema: RelationSchema) -> bool:
        return bool(self.slot_values.get(schema.answer_slot))


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    abstract_text: str

    @property
    def text(self) -> str:
        return f"{self.title} {self.abstract_text}"

    @property
    def encoder_text(self) -> str:
        return f"{self.title} [SEP] {self.abstract_text}"


@dataclass
class Query:
    query_id: str
    schema_name: str
    query_entities: tuple[EntityRef, ...]
    rendered_text: str
    answer_entities: list[EntityRef]
    gold_doc_ids: set[str]

    @property
    def group_key(self) -> str:
        return self.query_entities[0].key

    def to_json(self) -> dict:
        return {
            "query_id": self.query_id,
            "schema": self.schema_name,
            "query_entities": [_entity_json(e) for e in self.query_entities],
            "text": self.rendered_text,
            "answer_entities": [_entity_json(e) for e in self.answer_entities],
            "gold_doc_ids": sorted(self.gold_doc_ids),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Query":
        return cls(
            query_id=obj["query_id"],
            schema_name=obj["schema"],
            query_entities=tuple(_entity_from_json(e) for e in obj["query_entities"]),
            rendered_text=obj["text"],
            answer_entities=[_entity_from_json(e) for e in obj["answer_entities"]],
            gold_doc_ids=set(obj["gold_doc_ids"]),
        )


def _entity_json(e: EntityRef) -> dict:
    out = {"canonical": e.canonical, "synonyms": list(e.synonyms), "type": e.entity_type}
    if e.full_name:
        out["full_name"] = e.full_name
    return out


def _entity_from_json(obj: Mapping) -> EntityRef:
    return EntityRef(obj["canonical"], tuple(obj["synonyms"]), obj["type"], obj.get("full_name"))


@dataclass
class ParsedKB:
    """Result of reading a KB file.

    ``records`` hold complete records. Records without an answer are kept in
    ``incomplete``: they never form queries but still serve as negative sources
    (the answer bit of the KB match can only be 0 for them).
    """

    records: list[KBRecord] = field(default_factory=list)
    incomplete: list[KBRecord] = field(default_factory=list)
    rejected: int = 0

    @property
    def dropped(self) -> int:
        return len(self.incomplete)

    @property
    def all_records(self) -> list[KBRecord]:
        return self.records + self.incomplete


@dataclass
class SplitAssignment:
    groups: dict[str, str]

    def split_of(self, query: Query) -> str:
        return self.groups[query.group_key]

    def select(self, queries: Iterable[Query], split: str) -> list[Query]:
        return [q for q in queries if self.groups.get(q.group_key) == split]

    def to_json(self) -> dict:
        return dict(sorted(self.groups.items()))


# -- parsing ---------------------------------------------------------------


def _record_id(schema: RelationSchema, cells: Sequence[str]) -> str:
    digest = hashlib.sha1("\t".join([schema.name, *cells]).encode("utf-8")).hexdigest()
    return f"{schema.name}-{digest[:12]}"


def parse_kb(
    path: str | Path, schema: RelationSchema, synonyms: SynonymTable | None = None
) -> ParsedKB:
    """Read a headerless KB TSV: query slots..., answer slot, doc_id.

    The answer cell may list several values separated by ``|``. Empty answer
    cells make a record incomplete. Lines with an empty query slot or doc_id
    are rejected (counted, not returned).
    """
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_kb_lines(fh, schema, synonyms, source=str(path))


def parse_kb_lines(
    lines: Iterable[str],
    schema: RelationSchema,
    synonyms: SynonymTable | None = None,
    source: str = "<lines>",
) -> ParsedKB:
    synonyms = synonyms or SynonymTable()
    out = ParsedKB()
    seen: dict[str, int] = {}
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        cells = line.split("\t")
        if len(cells) != schema.n_columns:
            raise KBDataError(
                f"{source}:{line_no}: expected {schema.n_columns} columns, got {len(cells)}"
            )
        rid = _record_id(schema, cells)
        if rid in seen:
            raise KBDataError(
                f"{source}:{line_no}: duplicate record {rid} (first seen on line {seen[rid]})"
            )
        seen[rid] = line_no
        *query_cells, answer_cell, doc_id = cells
        if not doc_id.strip() or any(not c.strip() for c in query_cells):
            out.rejected += 1
            continue
        values: dict[str, tuple[EntityRef, ...]] = {
            slot: (synonyms.entity(slot, cell),)
            for slot, cell in zip(schema.query_slots, query_cells)
        }
        answers = [a for a in answer_cell.split(ANSWER_SEP) if a.strip()] if answer_cell else []
        values[schema.answer_slot] = tuple(synonyms.entity(schema.answer_slot, a) for a in answers)
        record = KBRecord(rid, values, doc_id, line_no)
        (out.records if answers else out.incomplete).append(record)
    return out


def format_kb_line(record: KBRecord, schema: RelationSchema) -> str:
    cells = [record.slot_values[s][0].canonical for s in schema.query_slots]
    cells.append(ANSWER_SEP.join(e.canonical for e in record.entities(schema.answer_slot)))
    cells.append(record.doc_id)
    return "\t".join(cells)


def write_kb(path: str | Path, records: Iterable[KBRecord], schema: RelationSchema) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for rec in records:
            fh.write(format_kb_line(rec, schema) + "\n")


def parse_corpus(path: str | Path) -> dict[str, Document]:
    corpus: dict[str, Document] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise KBDataError(f"{path}:{line_no}: invalid JSON ({exc.msg})") from None
            for key in ("doc_id", "title", "abstract"):
                if not isinstance(obj.get(key), str):
                    raise KBDataError(f"{path}:{line_no}: missing or non-string field {key!r}")
            doc_id = obj["doc_id"]
            if doc_id in corpus:
                raise KBDataError(f"{path}:{line_no}: duplicate doc_id {doc_id!r}")
            corpus[doc_id] = Document(doc_id, obj["title"], obj["abstract"])
    return corpus


def write_corpus(path: str | Path, corpus: Mapping[str, Document]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in corpus.values():
            obj = {"doc_id": doc.doc_id, "title": doc.title, "abstract": doc.abstract_text}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def parse_synonyms(path: str | Path) -> SynonymTable:
    """Read ``entity_type, canonical, synonym[, kind]`` rows.

    The optional fourth column marks a synonym as ``full_name``; PTM-style
    templates render it next to the symbol.
    """
    table = SynonymTable()
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh, delimiter="\t", quoting=csv.QUOTE_NONE), 1):
            if not row or not any(c.strip() for c in row):
                continue
            if len(row) not in (3, 4):
                raise KBDataError(f"{path}:{line_no}: expected 3 or 4 columns, got {len(row)}")
            table.add(*row)
    return table


def write_synonyms(path: str | Path, table: SynonymTable) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for key, syns in table.synonyms.items():
            etype, canonical = key[0], table.canonicals[key]
            for syn in syns:
                kind = "full_name" if table.full_names.get(key) == syn else ""
                cols = [etype, canonical, syn] + ([kind] if kind else [])
                fh.write("\t".join(cols) + "\n")


# -- queries ---------------------------------------------------------------


def surface_form(entity: EntityRef, mode: str) -> str:
    if mode == "symbol_fullname" and entity.full_name:
        return f"{entity.canonical} ({entity.full_name})"
    return entity.canonical


def query_id_for(schema: RelationSchema, entities: Sequence[EntityRef]) -> str:
    return "::".join([schema.name, *(e.key for e in entities)])


def render_query(record: KBRecord, schema: RelationSchema) -> Query:
    entities = tuple(record.slot_values[s][0] for s in schema.query_slots)
    fills = {
        slot: surface_form(ent, schema.surface.get(slot, "canonical"))
        for slot, ent in zip(schema.query_slots, entities)
    }
    return Query(
        query_id=query_id_for(schema, entities),
        schema_name=schema.name,
        query_entities=entities,
        rendered_text=schema.template.format(**fills),
        answer_entities=list(record.entities(schema.answer_slot)),
        gold_doc_ids={record.doc_id},
    )


def render_queries(records: Iterable[KBRecord], schema: RelationSchema) -> list[Query]:
    """Render every record and merge duplicates sharing the query tuple."""
    merged: dict[str, Query] = {}
    for rec in records:
        q = render_query(rec, schema)
        prev = merged.get(q.query_id)
        if prev is None:
            merged[q.query_id] = q
            continue
        prev.gold_doc_ids |= q.gold_doc_ids
        have = {a.key for a in prev.answer_entities}
        prev.answer_entities.extend(a for a in q.answer_entities if a.key not in have)
    return list(merged.values())


def write_queries(path: str | Path, queries: Iterable[Query], splits: SplitAssignment | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            obj = q.to_json()
            if splits is not None:
                obj["split"] = splits.split_of(q)
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def read_queries(path: str | Path) -> list[tuple[Query, str | None]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append((Query.from_json(obj), obj.get("split")))
    return out


# -- splits ----------------------------------------------------------------


def split_dataset(
    queries: Sequence[Query],
    ratios: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 7,
) -> SplitAssignment:
    """Assign every e1 group to one split, approximating ratios in query counts.

    Groups are shuffled by ``seed`` and each is given to the split currently
    furthest below its target, so no split misses its target by more than one
    group.
    """
    if len(ratios) != len(SPLITS):
        raise ValueError(f"expected {len(SPLITS)} ratios, got {len(ratios)}")
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be non-negative and sum to 1, got {list(ratios)}")
    sizes: dict[str, int] = defaultdict(int)
    for q in queries:
        sizes[q.group_key] += 1
    active = [i for i, r in enumerate(ratios) if r > 0]
    if len(sizes) < len(active):
        raise ValueError(f"{len(sizes)} groups cannot fill {len(active)} non-empty splits")

    keys = sorted(sizes)
    random.Random(seed).shuffle(keys)
    total = sum(sizes.values())
    targets = [r * total for r in ratios]
    counts = [0] * len(ratios)
    members: list[list[str]] = [[] for _ in ratios]
    for key in keys:
        j = max(active, key=lambda i: (targets[i] - counts[i], -i))
        members[j].append(key)
        counts[j] += sizes[key]
    # a low-ratio split can be starved when large groups come first
    for j in active:
        if members[j]:
            continue
        donor = max((i for i in active if len(members[i]) > 1), key=lambda i: counts[i] - targets[i])
        moved = min(members[donor], key=lambda k: (sizes[k], k))
        members[donor].remove(moved)
        counts[donor] -= sizes[moved]
        members[j].append(moved)
        counts[j] += sizes[moved]
    return SplitAssignment({k: SPLITS[j] for j in range(len(ratios)) for k in members[j]})


def records_by_split(
    records: Iterable[KBRecord], schema: RelationSchema, splits: SplitAssignment, split: str
) -> list[KBRecord]:
    return [r for r in records if splits.groups.get(r.group_key(schema)) == split]
