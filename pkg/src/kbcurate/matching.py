"""Text matching (g), KB matching (f) and margin-class tables."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

from .kbdata import Document, EntityRef, KBRecord, RelationSchema, normalize
from .lexical import tokenize

POSITIVE = "positive"
NEGATIVE = "negative"
SOURCES = ("kb", "bm25", "random")


class MarginTableError(ValueError):
    """A margin-class table is malformed, not exhaustive or not disjoint."""


@lru_cache(maxsize=65536)
def _padded_tokens(text: str) -> str:
    return " " + " ".join(tokenize(text)) + " "


@lru_cache(maxsize=65536)
def _synonym_needles(synonyms: tuple[str, ...]) -> tuple[str, ...]:
    needles = []
    for syn in synonyms:
        toks = tokenize(syn)
        if toks:
            needles.append(" " + " ".join(toks) + " ")
    return tuple(needles)


def text_match(entity: EntityRef, doc: Document) -> int:
    """1 iff some synonym's token sequence occurs in the title or abstract."""
    hay = _padded_tokens(doc.text)
    return int(any(n in hay for n in _synonym_needles(entity.synonyms)))


def kb_match(a: KBRecord, b: KBRecord, slot: str, schema: RelationSchema) -> int:
    if slot == schema.answer_slot:
        return int(b.has_answer(schema))
    if slot not in schema.query_slots:
        raise KeyError(f"slot {slot!r} not in schema {schema.name!r}")
    return int(normalize(a.slot_values[slot][0].canonical) == normalize(b.slot_values[slot][0].canonical))


def f_pattern(a: KBRecord, b: KBRecord, schema: RelationSchema) -> tuple[int, ...]:
    return tuple(kb_match(a, b, s, schema) for s in schema.slots)


def g_pattern(record: KBRecord, doc: Document, schema: RelationSchema) -> tuple[int, ...]:
    """Per slot: does the document mention any entity filling that slot."""
    return tuple(int(any(text_match(e, doc) for e in record.entities(s))) for s in schema.slots)


def filled_pattern(record: KBRecord, schema: RelationSchema) -> tuple[int, ...]:
    return tuple(int(bool(record.entities(s))) for s in schema.slots)


# -- tables ----------------------------------------------------------------


def _parse_pattern(pattern: str | Sequence, n: int) -> str:
    if not isinstance(pattern, str):
        pattern = "".join(str(c) for c in pattern)
    pattern = pattern.replace(" ", "")
    if len(pattern) != n or set(pattern) - set("01-"):
        raise MarginTableError(f"pattern {pattern!r} must have {n} chars from '0', '1', '-'")
    return pattern


def _fits(pattern: str, bits: Sequence[int]) -> bool:
    return all(p == "-" or int(p) == b for p, b in zip(pattern, bits))


@dataclass(frozen=True)
class MarginRow:
    class_id: int
    mu: float
    polarity: str
    source: str = "kb"
    patterns: tuple[str, ...] = ()
    # g requirement on the other record's document; negatives only
    g_required: tuple[str, ...] = ()


@dataclass(frozen=True)
class MarginAssignment:
    class_id: int
    mu: float
    polarity: str
    source: str = "kb"


@dataclass
class MarginClassTable:
    """Dataset-specific map from f/g evaluation patterns to margin classes.

    Positive rows list g-patterns over the schema slots. Negative ``kb`` rows
    list f-patterns; the document of the other record must additionally
    satisfy the row's g requirement, which is 1 on every slot the f-pattern
    evaluates unless overridden (``g_overrides``). A ``-`` in an f-pattern
    leaves that slot unevaluated under both f and g. ``bm25`` and ``random``
    rows carry no patterns.
    """

    name: str
    slots: tuple[str, ...]
    rows: list[MarginRow] = field(default_factory=list)

    @classmethod
    def from_config(cls, name: str, slots: Sequence[str], entries: Iterable[Mapping]) -> "MarginClassTable":
        slots = tuple(slots)
        n = len(slots)
        rows = []
        for entry in entries:
            unknown = set(entry) - {"class", "mu", "polarity", "patterns", "g_overrides", "source", "note"}
            if unknown:
                raise MarginTableError(f"{name}: unknown keys {sorted(unknown)} in margin row")
            try:
                class_id, mu, polarity = int(entry["class"]), float(entry["mu"]), entry["polarity"]
            except KeyError as exc:
                raise MarginTableError(f"{name}: margin row missing {exc}") from None
            source = entry.get("source", "kb")
            if polarity not in (POSITIVE, NEGATIVE):
                raise MarginTableError(f"{name}: class {class_id}: bad polarity {polarity!r}")
            if source not in SOURCES or (polarity == POSITIVE and source != "kb"):
                raise MarginTableError(f"{name}: class {class_id}: bad source {source!r}")
            patterns = tuple(_parse_pattern(p, n) for p in entry.get("patterns") or ())
            if source != "kb" and patterns:
                raise MarginTableError(f"{name}: class {class_id}: {source} rows take no patterns")
            overrides = dict(entry.get("g_overrides") or {})
            if overrides and polarity == POSITIVE:
                raise MarginTableError(f"{name}: class {class_id}: g_overrides only apply to negatives")
            g_required = ()
            if polarity == NEGATIVE and source == "kb":
                g_required = tuple(_g_requirement(p, slots, overrides, name) for p in patterns)
            rows.append(MarginRow(class_id, mu, polarity, source, patterns, g_required))
        table = cls(name, slots, rows)
        table.validate()
        return table

    def to_config(self) -> list[dict]:
        out = []
        for row in self.rows:
            entry: dict = {"class": row.class_id, "mu": row.mu, "polarity": row.polarity}
            if row.polarity == NEGATIVE:
                entry["source"] = row.source
            if row.source == "kb":
                entry["patterns"] = list(row.patterns)
            overrides = {}
            for pat, req in zip(row.patterns, row.g_required):
                for slot, p, r in zip(self.slots, pat, req):
                    if p != "-" and r != "1":
                        overrides[slot] = int(r) if r != "-" else "-"
            if overrides:
                entry["g_overrides"] = overrides
            out.append(entry)
        return out

    # -- checks -----------------------------------------------------------

    def validate(self) -> None:
        n = len(self.slots)
        for row in self.rows:
            if not 0.0 <= row.mu <= 2.0:
                raise MarginTableError(f"{self.name}: class {row.class_id}: mu {row.mu} outside [0, 2]")
        for polarity in (POSITIVE, NEGATIVE):
            mus: dict[int, float] = {}
            for row in self.rows:
                if row.polarity != polarity:
                    continue
                if mus.setdefault(row.class_id, row.mu) != row.mu:
                    raise MarginTableError(f"{self.name}: {polarity} class {row.class_id} has two mu values")
            ordered = [mus[c] for c in sorted(mus)]
            if any(b < a for a, b in zip(ordered, ordered[1:])):
                raise MarginTableError(f"{self.name}: {polarity} mu must be non-decreasing in class id")
        for src in ("bm25", "random"):
            if sum(r.source == src for r in self.rows) > 1:
                raise MarginTableError(f"{self.name}: more than one {src} row")

        all_bits = list(itertools.product((0, 1), repeat=n))
        for g in all_bits:
            hits = {r.class_id for r in self._positive_rows() if any(_fits(p, g) for p in r.patterns)}
            if len(hits) != 1:
                raise MarginTableError(
                    f"{self.name}: positive g-pattern {_bits(g)} maps to classes {sorted(hits)}"
                )
        ones = (1,) * n
        for f in all_bits:
            if f == ones:
                continue
            if not self._negative_hits(f, ones):
                raise MarginTableError(f"{self.name}: negative f-pattern {_bits(f)} not covered")
            fills = [ones] if f[-1] else [ones, ones[:-1] + (0,)]
            for g in all_bits:
                if any(len(self._negative_hits(f, g, fill)) > 1 for fill in fills):
                    raise MarginTableError(
                        f"{self.name}: f={_bits(f)} g={_bits(g)} matches several negative rows"
                    )
        for a in all_bits:
            for b in all_bits:
                if a != b and all(x >= y for x, y in zip(a, b)):
                    if self.lookup_positive(a).mu > self.lookup_positive(b).mu:
                        raise MarginTableError(
                            f"{self.name}: positive mu not monotone ({_bits(a)} vs {_bits(b)})"
                        )

    # -- lookups ----------------------------------------------------------

    def _positive_rows(self) -> list[MarginRow]:
        return [r for r in self.rows if r.polarity == POSITIVE]

    def _negative_hits(self, f: Sequence[int], g: Sequence[int], filled: Sequence[int] | None = None) -> list[MarginRow]:
        filled = filled or (1,) * len(f)
        hits = []
        for row in self.rows:
            if row.polarity != NEGATIVE or row.source != "kb":
                continue
            for pat, req in zip(row.patterns, row.g_required):
                if _fits(pat, f) and all(
                    r == "-" or not fill or int(r) == gb for r, gb, fill in zip(req, g, filled)
                ):
                    hits.append(row)
                    break
        return hits

    def lookup_positive(self, g: Sequence[int]) -> MarginAssignment:
        for row in self._positive_rows():
            if any(_fits(p, g) for p in row.patterns):
                return MarginAssignment(row.class_id, row.mu, POSITIVE)
        raise MarginTableError(f"{self.name}: positive g-pattern {_bits(g)} not covered")

    def lookup_negative(
        self, f: Sequence[int], g: Sequence[int], filled: Sequence[int] | None = None
    ) -> MarginAssignment | None:
        """Class for a KB-derived candidate, or None when its g requirement fails.

        ``filled`` marks slots the other record actually fills; empty slots
        have nothing to mention and never fail a g requirement.
        """
        if all(f):
            return None
        hits = self._negative_hits(f, g, filled)
        if not hits:
            if not self._negative_hits(f, (1,) * len(f)):
                raise MarginTableError(f"{self.name}: negative f-pattern {_bits(f)} not covered")
            return None
        row = hits[0]
        return MarginAssignment(row.class_id, row.mu, NEGATIVE, "kb")

    def source_class(self, source: str) -> MarginAssignment | None:
        for row in self.rows:
            if row.polarity == NEGATIVE and row.source == source:
                return MarginAssignment(row.class_id, row.mu, NEGATIVE, source)
        return None

    def negative_classes(self) -> list[int]:
        return sorted({r.class_id for r in self.rows if r.polarity == NEGATIVE})

    def classes(self) -> dict[tuple[str, int], float]:
        return {(r.polarity, r.class_id): r.mu for r in self.rows}

    def validates(self, label: int, mu: float, class_id: int) -> bool:
        polarity = POSITIVE if label == 1 else NEGATIVE
        expected = self.classes().get((polarity, class_id))
        return expected is not None and abs(expected - mu) < 1e-12


def _bits(bits: Sequence[int]) -> str:
    return "".join(str(b) for b in bits)


def _g_requirement(pattern: str, slots: Sequence[str], overrides: Mapping, name: str) -> str:
    unknown = set(overrides) - set(slots)
    if unknown:
        raise MarginTableError(f"{name}: g_overrides name unknown slots {sorted(unknown)}")
    req = []
    for slot, p in zip(slots, pattern):
        if p == "-":
            req.append("-")
        else:
            v = str(overrides.get(slot, 1))
            if v not in ("0", "1", "-"):
                raise MarginTableError(f"{name}: bad g override {slot}={v}")
            req.append(v)
    return "".join(req)


def binary_margin_table(
    table: MarginClassTable, positive_mu: float = 0.0, negative_mu: float = 0.8, drop_negative: Iterable[int] = (2,)
) -> MarginClassTable:
    """Single-margin ablation: every positive at one mu, every negative at another.

    Dropped negative classes (by default the hard negatives resembling noisy
    positives) are removed rather than relabelled.
    """
    dropped = set(drop_negative)
    rows = []
    for row in table.rows:
        if row.polarity == POSITIVE:
            rows.append(MarginRow(row.class_id, positive_mu, POSITIVE, row.source, row.patterns))
        elif row.class_id not in dropped:
            rows.append(MarginRow(row.class_id, negative_mu, NEGATIVE, row.source, row.patterns, row.g_required))
    out = MarginClassTable(f"{table.name}-binary", table.slots, rows)
    out.validate()
    return out


# -- classification ----------------------------------------------------------


def classify_positive(
    record: KBRecord, doc: Document, table: MarginClassTable, schema: RelationSchema
) -> MarginAssignment:
    return table.lookup_positive(g_pattern(record, doc, schema))


def classify_negative(
    pos_record: KBRecord,
    other_record: KBRecord,
    doc_of_other: Document,
    table: MarginClassTable,
    schema: RelationSchema,
) -> MarginAssignment | None:
    """Margin class of ``doc_of_other`` as a negative for ``pos_record``.

    Returns None when the other record agrees on every slot (another
    positive) or its document fails the class's mention requirement.
    """
    f = f_pattern(pos_record, other_record, schema)
    if all(f):
        return None
    g = g_pattern(other_record, doc_of_other, schema)
    return table.lookup_negative(f, g, filled_pattern(other_record, schema))
