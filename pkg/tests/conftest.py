from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crashbucket.synthetic import generate  # noqa: E402


@pytest.fixture(scope="session")
def synthetic_corpus(tmp_path_factory):
    """300 crashes from three families (280 unique + 20 exact copies)."""
    root = tmp_path_factory.mktemp("synthetic")
    corpus = root / "corpus"
    truth = generate(corpus, n_unique=280, n_duplicates=20, seed=7)
    return corpus, root / "corpus_truth.csv", truth


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
