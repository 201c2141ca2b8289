import numpy as np
import pytest

from samp.encoder import Engine
from samp.synthetic import SAMPLE_TEXTS, calibrated_archive


@pytest.fixture(scope="session")
def tiny_archive():
    return calibrated_archive(seed=0)


@pytest.fixture(scope="session")
def tiny_engine(tiny_archive):
    return Engine(tiny_archive)


@pytest.fixture(scope="session")
def matching_archive():
    return calibrated_archive(
        task="text_matching",
        texts=[f"{a}\t{b}" for a, b in zip(SAMPLE_TEXTS, reversed(SAMPLE_TEXTS))],
        seed=3,
    )


@pytest.fixture(scope="session")
def tagging_archive():
    return calibrated_archive(task="sequence_labeling", num_labels=3, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    rows = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call":
                continue
            if "test_acceptance.py" in rep.nodeid:
                rows.append((rep.nodeid.split("::")[-1], status == "passed"))
    if rows:
        terminalreporter.section("acceptance criteria")
        for name, ok in sorted(rows):
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
