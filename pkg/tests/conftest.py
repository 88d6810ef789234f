from __future__ import annotations

import sys
from pathlib import Path

import pytest

from dlcrec import data, grounding, synthetic
from dlcrec.backends import OracleBackend
from dlcrec.pipeline import ControlPipeline

TESTS = Path(__file__).parent
FIXTURES = TESTS / "fixtures"
SNAPSHOTS = TESTS / "snapshots"
sys.path.insert(0, str(TESTS))


@pytest.fixture(scope="session")
def catalog():
    return synthetic.make_catalog(400, seed=3)


@pytest.fixture(scope="session")
def sequences(catalog):
    return synthetic.make_sequences(catalog, 60, seed=3)


@pytest.fixture(scope="session")
def genre_dist(catalog, sequences):
    return data.genre_distribution(sequences, catalog)


@pytest.fixture(scope="session")
def item_dist(catalog, sequences):
    return data.item_distribution(sequences, catalog)


@pytest.fixture(scope="session")
def grounder(catalog):
    provider = grounding.NgramEmbedder()
    return grounding.Grounder(grounding.build_index(catalog, provider), provider)


@pytest.fixture
def make_pipeline(catalog, sequences, genre_dist, grounder):
    def build(genre_error=0.0, item_error=0.0, seed=0, **kwargs):
        backend = OracleBackend(sequences, catalog, genre_dist, None, genre_error, item_error, seed)
        return ControlPipeline(catalog, backend, grounder, genre_dist, seed=seed, **kwargs)

    return build


def snapshot(name: str, text: str, update: bool = False) -> str:
    """Return the stored snapshot, creating it on first use."""
    path = SNAPSHOTS / name
    if update or not path.exists():
        path.write_text(text, encoding="utf-8")
    return path.read_text(encoding="utf-8")
