import numpy as np
import pytest

from mtcvr.data import SyntheticConfig, generate_synthetic
from mtcvr.model import Architecture

# acceptance lines collected by tests/test_acceptance.py, echoed at the end of the run
ACCEPTANCE_LINES = []

TINY_VOCAB = {"user": 6, "item": 5, "comb": 4}


def tiny_arch(**kw):
    base = dict(embedding_dim=3, ctr_layers=[4], cvr_layers=[4], imp_layers=[4])
    base.update(kw)
    return Architecture(**base)


def tiny_batch_arrays(rng, n=12, vocab=TINY_VOCAB, click_rate=0.5):
    feats = {f: rng.integers(0, vocab[f], (n, 1)) for f in vocab}
    click = (rng.random(n) < click_rate).astype(float)
    conv = click * (rng.random(n) < 0.5)
    return feats, click, conv


@pytest.fixture(scope="session")
def small_synthetic():
    cfg = SyntheticConfig(num_records=4000, num_users=100, num_items=60, target_cvr=0.05, seed=3)
    return generate_synthetic(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
