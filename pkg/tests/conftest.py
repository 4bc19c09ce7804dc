import os
import tempfile

import pytest

from fedloc import dataset, synthetic

# One synthetic corpus per profile, cached across pytest runs; regeneration
# happens automatically when the default profile changes.
CORPUS_DIR = os.environ.get(
    "FEDLOC_TEST_CORPUS_DIR",
    os.path.join(tempfile.gettempdir(), "fedloc-test-corpus"),
)


@pytest.fixture(scope="session")
def corpus_paths():
    return synthetic.ensure_corpus(CORPUS_DIR, synthetic.CorpusProfile())


@pytest.fixture(scope="session")
def training_set(corpus_paths):
    return dataset.load_csv(corpus_paths.training_csv, "training")


@pytest.fixture(scope="session")
def validation_set(corpus_paths):
    return dataset.load_csv(corpus_paths.validation_csv, "validation")


@pytest.fixture(scope="session")
def b1(training_set):
    return dataset.filter_records(training_set, 1)


@pytest.fixture(scope="session")
def v1(validation_set):
    return dataset.filter_records(validation_set, 1)


@pytest.fixture(scope="session")
def b1f1(training_set):
    return dataset.filter_records(training_set, 1, 1)


@pytest.fixture(scope="session")
def v1f1(validation_set):
    return dataset.filter_records(validation_set, 1, 1)
