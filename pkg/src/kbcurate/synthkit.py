"""Synthetic Gene-Variant-Treatment KBs and corpora with planted relevance.

Every generated document is a bag of pseudo-words from a closed filler
vocabulary, with entity mentions and cue words inserted at random positions.
Entity tokens never collide with filler or cue tokens, so text matching is
exact by construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .evaluation import write_qrels
from .kbdata import (
    ANSWER_SEP,
    Document,
    EntityRef,
    KBRecord,
    RelationSchema,
    SynonymTable,
    parse_kb_lines,
    query_id_for,
    write_corpus,
    write_synonyms,
)

EVIDENCE_CUES = ("responded", "response", "sensitivity", "efficacy", "durable",
                 "remission", "treated", "regimen", "inhibited", "benefit")
OTHER_CUES = ("expression", "structure", "binding", "pathway", "localization",
              "knockdown", "mechanism", "crystal", "domain", "interaction")
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"
_AMINO = "ACDEFGHIKLMNPQRSTVWY"
_AMINO3 = dict(zip(_AMINO, ("Ala", "Cys", "Asp", "Glu", "Phe", "Gly", "His", "Ile", "Lys", "Leu",
                            "Met", "Asn", "Pro", "Gln", "Arg", "Ser", "Thr", "Val", "Trp", "Tyr")))
_DRUG_SUFFIX = ("nib", "mab", "tinib", "zumab", "ciclib", "parib")

KB_FILE = "kb.tsv"
CORPUS_FILE = "corpus.jsonl"
SYNONYM_FILE = "synonyms.tsv"
QRELS_FILE = "qrels.tsv"
MANIFEST_FILE = "synth.json"


@dataclass
class SynthSpec:
    n_genes: int = 50
    variants_per_gene: int = 3
    answers_per_query: int = 1
    corpus_size: int = 2000
    vocab_size: int = 600
    noise_rate: float = 0.8
    seed: int = 7
    # slots whose mentions noise may drop; empty means every slot
    noise_slots: tuple[str, ...] = ()
    n_treatments: int = 24
    evidence_per_query: int = 2
    distractors_per_gene: int = 5
    # evidence documents about a gene's treatments that no KB record cites
    unreferenced_per_gene: int = 3
    shared_variant_rate: float = 0.2
    incomplete_rate: float = 0.15
    # mean filler lengths; actual lengths are uniform in [n/2, 3n/2]
    title_words: int = 7
    abstract_words: int = 60

    def __post_init__(self) -> None:
        self.noise_slots = tuple(self.noise_slots)
        for name in ("n_genes", "variants_per_gene", "answers_per_query", "corpus_size",
                     "vocab_size", "n_treatments", "evidence_per_query", "title_words",
                     "abstract_words"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.distractors_per_gene < 0 or self.unreferenced_per_gene < 0:
            raise ValueError("distractors_per_gene and unreferenced_per_gene must be >= 0")
        for name in ("noise_rate", "shared_variant_rate", "incomplete_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.answers_per_query > self.n_treatments:
            raise ValueError("answers_per_query exceeds n_treatments")

    @classmethod
    def from_dict(cls, obj: Mapping) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        extra = sorted(set(obj) - known)
        if extra:
            raise ValueError(f"unknown synth keys: {extra}")
        return cls(**obj)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise_slots"] = list(self.noise_slots)
        return d


@dataclass
class SynthBundle:
    spec: SynthSpec
    schema: RelationSchema
    kb_lines: list[str]
    records: list[KBRecord]
    incomplete: list[KBRecord]
    corpus: dict[str, Document]
    synonyms: SynonymTable
    qrels: dict[str, set[str]]
    doc_kinds: dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / v for k, v in (("kb", KB_FILE), ("corpus", CORPUS_FILE),
                                          ("synonyms", SYNONYM_FILE), ("qrels", QRELS_FILE),
                                          ("manifest", MANIFEST_FILE))}
        paths["kb"].write_text("".join(line + "\n" for line in self.kb_lines), encoding="utf-8")
        write_corpus(paths["corpus"], self.corpus)
        write_synonyms(paths["synonyms"], self.synonyms)
        write_qrels(paths["qrels"], self.qrels)
        manifest = {
            "spec": self.spec.to_dict(),
            "schema": self.schema.name,
            "records": len(self.records),
            "incomplete": len(self.incomplete),
            "documents": len(self.corpus),
            "queries": len(self.qrels),
        }
        paths["manifest"].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return paths


class _Namer:
    """Unique pseudo-words; every issued token is reserved."""

    def __init__(self, rng: np.random.Generator, reserved=()):
        self.rng = rng
        self.used = set(reserved)

    def word(self, min_syl: int, max_syl: int, suffix: str = "") -> str:
        while True:
            n = int(self.rng.integers(min_syl, max_syl + 1))
            w = "".join(self.rng.choice(list(_CONSONANTS)) + self.rng.choice(list(_VOWELS)) for _ in range(n))
            w += suffix
            if w not in self.used:
                self.used.add(w)
                return w

    def token(self, candidate: str) -> bool:
        key = candidate.lower()
        if key in self.used:
            return False
        self.used.add(key)
        return True


def _po_schema() -> RelationSchema:
    return RelationSchema(
        name="po",
        query_slots=("Gene", "Variant"),
        answer_slot="Treatment",
        template="Treatment for gene {Gene} and variant {Variant}?",
        variant_slot="Variant",
    )


def generate(spec: SynthSpec, schema: RelationSchema | None = None) -> SynthBundle:
    """Build a KB, corpus, synonym table and qrels from ``spec``, deterministically."""
    schema = schema or _po_schema()
    if len(schema.query_slots) != 2:
        raise ValueError("synthetic data needs a schema with exactly two query slots")
    gene_slot, variant_slot = schema.query_slots
    answer_slot = schema.answer_slot
    noise_slots = spec.noise_slots or schema.slots
    unknown = set(noise_slots) - set(schema.slots)
    if unknown:
        raise ValueError(f"noise_slots not in schema: {sorted(unknown)}")

    rng = np.random.default_rng(spec.seed)
    template_tokens = {t.lower() for t in schema.template.replace("{", " ").replace("}", " ").replace("?", " ").split()}
    namer = _Namer(rng, reserved=set(EVIDENCE_CUES) | set(OTHER_CUES) | template_tokens | {"p"})
    filler = [namer.word(2, 3) for _ in range(spec.vocab_size)]
    zipf = 1.0 / np.arange(1, spec.vocab_size + 1) ** 0.9
    zipf /= zipf.sum()

    synonyms = SynonymTable()

    def new_entity(etype: str, canonical: str, extra: list[str]) -> EntityRef:
        synonyms.add(etype, canonical, canonical)
        for syn in extra:
            synonyms.add(etype, canonical, syn)
        return synonyms.entity(etype, canonical)

    def n_extra() -> int:
        return int(rng.integers(0, 3))

    def gene_entity() -> EntityRef:
        sym = namer.word(2, 2).upper() + str(int(rng.integers(1, 10)))
        while not namer.token(sym):
            sym = namer.word(2, 2).upper() + str(int(rng.integers(1, 10)))
        return new_entity(gene_slot, sym, [namer.word(2, 3).upper() for _ in range(n_extra())])

    def variant_entity() -> EntityRef:
        while True:
            a, b = rng.choice(list(_AMINO), size=2, replace=False)
            pos = int(rng.integers(10, 1000))
            canonical = f"{a}{pos}{b}"
            if namer.token(canonical):
                break
        alts = [f"p.{canonical}", f"{_AMINO3[a]}{pos}{_AMINO3[b]}"]
        namer.token(alts[1])
        return new_entity(variant_slot, canonical, alts[: n_extra()])

    def treatment_entity() -> EntityRef:
        name = namer.word(2, 3, suffix=str(rng.choice(_DRUG_SUFFIX)))
        brands = [namer.word(2, 3).capitalize() for _ in range(n_extra())]
        return new_entity(answer_slot, name.capitalize(), brands)

    genes = [gene_entity() for _ in range(spec.n_genes)]
    treatments = [treatment_entity() for _ in range(spec.n_treatments)]
    hotspots = [variant_entity() for _ in range(max(1, spec.n_genes // 10))]

    # KB rows: (gene, variant, answers or (), kind)
    rows: list[tuple[EntityRef, EntityRef, tuple[EntityRef, ...]]] = []
    gene_variants: dict[str, list[EntityRef]] = {}
    for gene in genes:
        drug_set = list(rng.choice(len(treatments), size=min(2, len(treatments)), replace=False))
        variants: list[EntityRef] = []
        while len(variants) < spec.variants_per_gene:
            if rng.random() < spec.shared_variant_rate:
                v = hotspots[int(rng.integers(len(hotspots)))]
                if any(v.key == u.key for u in variants):
                    continue
            else:
                v = variant_entity()
            variants.append(v)
        gene_variants[gene.key] = variants
        for v in variants:
            picks: list[int] = []
            while len(picks) < spec.answers_per_query:
                pool = drug_set if rng.random() < 0.7 else range(len(treatments))
                t = int(rng.choice(list(pool)))
                if t not in picks:
                    picks.append(t)
            answers = tuple(treatments[t] for t in picks)
            for _ in range(int(rng.integers(1, spec.evidence_per_query + 1))):
                rows.append((gene, v, answers))
            if rng.random() < spec.incomplete_rate:
                rows.append((gene, v, ()))
        if rng.random() < spec.incomplete_rate:
            rows.append((gene, variant_entity(), ()))

    n_distractors = spec.n_genes * (spec.distractors_per_gene + spec.unreferenced_per_gene)
    if len(rows) + n_distractors > spec.corpus_size:
        raise ValueError(
            f"corpus_size {spec.corpus_size} is too small for {len(rows)} evidence and "
            f"{n_distractors} distractor and unreferenced documents"
        )
    doc_ids = [str(i) for i in sorted(rng.choice(np.arange(10_000_000, 40_000_000), size=spec.corpus_size, replace=False))]
    order = rng.permutation(spec.corpus_size)
    next_doc = iter(doc_ids[i] for i in order)

    def fill(n: int) -> list[str]:
        return [filler[i] for i in rng.choice(spec.vocab_size, size=n, p=zipf)]

    def mention(entity: EntityRef) -> str:
        return str(entity.synonyms[int(rng.integers(len(entity.synonyms)))])

    def compose(mentions: list[str], cues: list[str], title_mentions: list[str]) -> tuple[str, str]:
        title = fill(int(rng.integers(max(1, spec.title_words // 2), spec.title_words * 3 // 2 + 1)))
        for m in title_mentions:
            title.insert(int(rng.integers(len(title) + 1)), m)
        body = fill(int(rng.integers(max(1, spec.abstract_words // 2), spec.abstract_words * 3 // 2 + 1)))
        for m in [*mentions, *cues]:
            body.insert(int(rng.integers(len(body) + 1)), m)
        return " ".join(title).capitalize(), " ".join(body) + "."

    def cues(source: tuple[str, ...], lo: int, hi: int) -> list[str]:
        return [str(c) for c in rng.choice(source, size=int(rng.integers(lo, hi + 1)))]

    corpus: dict[str, Document] = {}
    kinds: dict[str, str] = {}
    kb_lines: list[str] = []
    for gene, variant, answers in rows:
        doc_id = next(next_doc)
        present = {gene_slot: [gene], variant_slot: [variant], answer_slot: list(answers)}
        if answers and rng.random() < spec.noise_rate:
            droppable = [s for s in noise_slots if present[s]]
            if droppable:
                mask = int(rng.integers(1, 1 << len(droppable)))
                for i, s in enumerate(droppable):
                    if mask >> i & 1:
                        present[s] = []
        mentions = [mention(e) for s in schema.slots for e in present[s] for _ in range(int(rng.integers(1, 3)))]
        title_mentions = [mention(gene)] if present[gene_slot] and rng.random() < 0.5 else []
        cue_words = cues(EVIDENCE_CUES, 2, 4) if answers else cues(OTHER_CUES, 2, 4)
        title, abstract = compose(mentions, cue_words, title_mentions)
        corpus[doc_id] = Document(doc_id, title, abstract)
        kinds[doc_id] = "evidence" if answers else "incomplete"
        kb_lines.append("\t".join([gene.canonical, variant.canonical,
                                   ANSWER_SEP.join(a.canonical for a in answers), doc_id]))

    # same-gene documents with no treatment relation
    for gene in genes:
        for _ in range(spec.distractors_per_gene):
            doc_id = next(next_doc)
            mentions = [mention(gene) for _ in range(int(rng.integers(3, 7)))]
            if rng.random() < 0.5:
                variants = gene_variants[gene.key]
                mentions.append(mention(variants[int(rng.integers(len(variants)))]))
            title, abstract = compose(mentions, cues(OTHER_CUES, 2, 4), [mention(gene)])
            corpus[doc_id] = Document(doc_id, title, abstract)
            kinds[doc_id] = "distractor"

    # uncurated evidence: a gene with one of its recorded treatments
    gene_rows: dict[str, list[tuple[EntityRef, tuple[EntityRef, ...]]]] = {}
    for gene, variant, answers in rows:
        if answers:
            gene_rows.setdefault(gene.key, []).append((variant, answers))
    for gene in genes:
        options = gene_rows.get(gene.key)
        if not options:
            continue
        for _ in range(spec.unreferenced_per_gene):
            doc_id = next(next_doc)
            variant, answers = options[int(rng.integers(len(options)))]
            mentions = [mention(gene) for _ in range(int(rng.integers(1, 3)))]
            mentions.append(mention(answers[int(rng.integers(len(answers)))]))
            if rng.random() < 0.3:
                mentions.append(mention(variant))
            title_mentions = [mention(gene)] if rng.random() < 0.5 else []
            title, abstract = compose(mentions, cues(EVIDENCE_CUES, 2, 4), title_mentions)
            corpus[doc_id] = Document(doc_id, title, abstract)
            kinds[doc_id] = "unreferenced"

    # background: filler with occasional stray mentions
    for doc_id in next_doc:
        mentions = []
        if rng.random() < 0.3:
            mentions.append(mention(genes[int(rng.integers(len(genes)))]))
        if rng.random() < 0.3:
            mentions.append(mention(treatments[int(rng.integers(len(treatments)))]))
        pool = EVIDENCE_CUES if rng.random() < 0.3 else OTHER_CUES
        title, abstract = compose(mentions, cues(pool, 0, 2), [])
        corpus[doc_id] = Document(doc_id, title, abstract)
        kinds[doc_id] = "background"

    corpus = {d: corpus[d] for d in sorted(corpus)}
    parsed = parse_kb_lines(kb_lines, schema, synonyms, source="<synth>")
    qrels: dict[str, set[str]] = {}
    for rec in parsed.records:
        qid = query_id_for(schema, [rec.slot_values[s][0] for s in schema.query_slots])
        qrels.setdefault(qid, set()).add(rec.doc_id)
    return SynthBundle(spec, schema, kb_lines, parsed.records, parsed.incomplete, corpus, synonyms, qrels, kinds)

