from pathlib import Path

import pytest

from guti.corpus import ingest_corpus, serialize
from guti.forms import default_catalog
from guti.phonology import default_table

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def catalog():
    return default_catalog()


@pytest.fixture(scope="session")
def table():
    return default_table()


@pytest.fixture(scope="session")
def fixture_poems(catalog):
    """The bundled corpus of published poems, one per table row."""
    result = ingest_corpus(FIXTURES / "sample_poems.jsonl", catalog)
    assert not result.diagnostics, result.diagnostics
    return result.poems


@pytest.fixture(scope="session")
def toy_poems(catalog):
    result = ingest_corpus(FIXTURES / "toy_corpus.jsonl", catalog)
    assert not result.diagnostics, result.diagnostics
    return result.poems


@pytest.fixture(scope="session")
def toy_samples(toy_poems, catalog):
    return [serialize(p, catalog) for p in toy_poems]
