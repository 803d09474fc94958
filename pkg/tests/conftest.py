import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sdrgnn.data import MODALITIES, Conversation, Dataset

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_conversation(rng, n=5, dims=(3, 3, 3), classes=3, speakers=None, cid="c0"):
    speakers = rng.integers(0, 2, n) if speakers is None else np.asarray(speakers)
    feats = {m: rng.standard_normal((n, d)) for m, d in zip(MODALITIES, dims)}
    return Conversation(cid, speakers, rng.integers(0, classes, n), feats, np.ones((n, 3)))


def make_dataset(rng, convs=3, n=6, dims=(3, 3, 3), classes=3):
    return Dataset([make_conversation(rng, n, dims, classes, cid=f"c{k}") for k in range(convs)], classes, dims)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
