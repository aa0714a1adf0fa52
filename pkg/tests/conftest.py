import numpy as np
import pytest

from ldmlplus.dataset import MultiViewPairSet
from ldmlplus.metric import PsdMetric

# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_psd(rng, dim, scale=1.0):
    a = rng.standard_normal((dim, dim))
    return scale * (a @ a.T) / dim


def random_pair_set(rng, n_pairs=12, dims=(3,), priv_dim=4, scale=0.4):
    """Pair set built from random difference vectors with both labels present."""
    labels = np.where(np.arange(n_pairs) % 3 == 0, 1.0, -1.0)
    rng.shuffle(labels)
    view_diffs = [scale * rng.standard_normal((n_pairs, d)) for d in dims]
    priv = scale * rng.standard_normal((n_pairs, priv_dim))
    return MultiViewPairSet.from_diffs(view_diffs, priv, labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_ids():
    # 4 identities, 2 cameras, 1 sample per camera
    return np.repeat(np.arange(4), 2), np.tile([0, 1], 4)


@pytest.fixture
def small_metric(rng):
    return PsdMetric.from_factor(rng.standard_normal((4, 2)))
