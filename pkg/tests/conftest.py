import time

import numpy as np
import pytest

from densemarks import embedder as emb
from densemarks import synthetic as syn

TRAIN_SEEDS = range(20)
HELD_OUT_SEEDS = range(1000, 1004)


@pytest.fixture(scope="session")
def template():
    return syn.make_template()


@pytest.fixture(scope="session")
def small_seq(template):
    return syn.generate_sequence(5, frames=4, size=32, template=template)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def train_set(template):
    return [syn.generate_sequence(s, template=template) for s in TRAIN_SEEDS]


@pytest.fixture(scope="session")
def held_out(template):
    return [syn.generate_sequence(s, template=template) for s in HELD_OUT_SEEDS]


@pytest.fixture(scope="session")
def trained(train_set):
    """Default-config runs in both embedder modes, shared by the slow checks."""
    runs, seconds = {}, {}
    for mode in (emb.CANONICAL, emb.DIRECT):
        t0 = time.perf_counter()
        runs[mode] = emb.train(train_set, emb.TrainConfig(mode=mode))
        seconds[mode] = time.perf_counter() - t0
    return runs, seconds


_VERDICTS = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert it."""

    def report(number, ok, detail):
        _VERDICTS.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
