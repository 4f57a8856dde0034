import pytest

from kbcurate.config import load_config
from kbcurate.kbdata import Document, RelationSchema, SynonymTable, parse_kb_lines
from kbcurate.synthkit import SynthSpec, generate


@pytest.fixture(scope="session")
def cfg():
    return load_config()


@pytest.fixture(scope="session")
def po_schema(cfg):
    return cfg.schemas["po"]


@pytest.fixture(scope="session")
def ptm_schema(cfg):
    return cfg.schemas["ptm"]


@pytest.fixture(scope="session")
def po_table(cfg):
    return cfg.tables["po"]


@pytest.fixture(scope="session")
def ptm_table(cfg):
    return cfg.tables["ptm"]


SMO_KB = [
    "SMO\tL412F\tVismodegib\t26822128",
    "SMO\tL412F\tVismodegib\t25759020",
    "SMO\tD473H\tSaridegib\t22550175",
    "BRAF\tL597R\tTrametinib\t22798288",
]

# abridged abstracts of the four referenced documents
SMO_DOCS = {
    "26822128": Document(
        "26822128",
        "SMO mutations in basal cell carcinoma",
        "The p.L412F mutation was found experimentally to result in increased SMO "
        "transactivating activity, and the patient responded to vismodegib therapy.",
    ),
    "25759020": Document(
        "25759020",
        "Smoothened variants and resistance",
        "We show that both classes of SMO variants respond to aPKC or GLI2 inhibitors "
        "that operate downstream of SMO.",
    ),
    "22550175": Document(
        "22550175",
        "Saridegib activity",
        "Saridegib was found to be active in cells with the D473H point mutation that "
        "rendered them resistant to another Smo inhibitor, GDC-0449.",
    ),
    "22798288": Document(
        "22798288",
        "BRAF non-V600 mutants",
        "This study shows that cells harboring BRAF(L597R) mutants are sensitive to MEK "
        "inhibitor treatment with trametinib.",
    ),
}


def smo_synonyms() -> SynonymTable:
    table = SynonymTable()
    table.add("Variant", "L412F", "p.L412F")
    table.add("Treatment", "Vismodegib", "GDC-0449")
    return table


@pytest.fixture
def smo_example(po_schema):
    parsed = parse_kb_lines(SMO_KB, po_schema, smo_synonyms())
    return parsed, dict(SMO_DOCS)


@pytest.fixture(scope="session")
def synth_default(po_schema):
    return generate(SynthSpec(), po_schema)


def make_schema(name="po"):
    return RelationSchema(name, ("Gene", "Variant"), "Treatment", "Treatment for gene {Gene} and variant {Variant}?")


# acceptance verdicts, printed once at the end of the run
_VERDICTS: dict[int, str] = {}


def record_verdict(n: int, ok: bool, detail: str) -> None:
    _VERDICTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
