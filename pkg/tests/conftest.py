import numpy as np
import pytest

from timnet.config import RunConfig
from timnet.data import load_dataset, read_manifest
from timnet.synth import write_corpus

_ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(20230415)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """The 3 x 20 synthetic corpus written by ``timnet synth`` with seed 0."""
    return write_corpus(tmp_path_factory.mktemp("toy"), 20, seed=0)


@pytest.fixture(scope="session")
def toy_dataset(toy_corpus):
    data, T = load_dataset(read_manifest(toy_corpus), RunConfig().feature_config())
    return data


@pytest.fixture
def criterion():
    """Record a one-line PASS/FAIL verdict for the acceptance summary."""

    def record(number, passed, detail):
        _ACCEPTANCE_LINES.append((number, "PASS" if passed else "FAIL", detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, verdict, detail in sorted(_ACCEPTANCE_LINES, key=lambda r: (int(str(r[0]).split(".")[0]), str(r[0]))):
        terminalreporter.write_line(f"criterion {number:>4}: {verdict}  {detail}")
