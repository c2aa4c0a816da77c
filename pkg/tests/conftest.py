"""Shared small-scale fixtures: a 3-class, 8x8-pixel corpus and a matching encoder config."""

import numpy as np
import pytest

from crossview_uda.config import TrainConfig
from crossview_uda.synthetic import Corpus, default_spec, generate_corpus
from crossview_uda.trainer import prepare_data

SMALL_SPEC = dict(K=3, n_clips_per_class=8, T=4, H=8, W=8, seed=3)
SMALL_CFG = dict(
    K=3, T=4, H=8, W=8, C=3, d_model=16, n_blocks=2, n_heads=2, patch_t=2, patch_hw=4, d_proj=8,
    epochs_phase1=2, epochs_phase2=2, batch_phase1=4, batch_phase2=8, queue_capacity=16, seed=5,
)


@pytest.fixture(scope="session")
def small_spec():
    return default_spec(**SMALL_SPEC)


@pytest.fixture(scope="session")
def small_generated(small_spec):
    return generate_corpus(small_spec)


@pytest.fixture(scope="session")
def small_corpus(small_generated):
    return Corpus.from_generated(*small_generated)


@pytest.fixture(scope="session")
def small_bundle(small_corpus):
    return prepare_data(small_corpus, seed=5)


@pytest.fixture
def small_cfg():
    return TrainConfig(**SMALL_CFG)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance report ------------------------------------------------------

ACCEPTANCE_LINES: dict[str, str] = {}


@pytest.fixture
def report():
    """Record a criterion's verdict; the terminal summary prints one line per criterion."""

    def record(criterion: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[criterion] = f"{'PASS' if passed else 'FAIL'}  {criterion}: {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: [int(p) if p.isdigit() else p for p in k.split()[0]]):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
