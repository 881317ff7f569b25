from __future__ import annotations

import sys
from importlib import resources
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from egrqa.chat import ScriptedMock  # noqa: E402
from egrqa.corpus import ingest_directory  # noqa: E402
from egrqa.embedding import HashEmbedder  # noqa: E402
from egrqa.evaluation import load_dataset  # noqa: E402
from egrqa.index import build_index  # noqa: E402

DATA = resources.files("egrqa") / "data"


@pytest.fixture(scope="session")
def sample_corpus_dir() -> Path:
    return Path(str(DATA / "sample_corpus"))


@pytest.fixture(scope="session")
def toy_dataset_path() -> Path:
    return Path(str(DATA / "toy_usmle.jsonl"))


@pytest.fixture(scope="session")
def toy_script_path() -> Path:
    return Path(str(DATA / "toy_mock_script.json"))


@pytest.fixture
def toy_mock(toy_script_path) -> ScriptedMock:
    return ScriptedMock.from_file(toy_script_path)


@pytest.fixture(scope="session")
def toy_items(toy_dataset_path):
    return load_dataset(toy_dataset_path)


@pytest.fixture(scope="session")
def sample_chunks(sample_corpus_dir):
    chunks, _ = ingest_directory(sample_corpus_dir)
    return chunks


@pytest.fixture(scope="session")
def sample_index(sample_chunks):
    return build_index(sample_chunks, HashEmbedder(64))
