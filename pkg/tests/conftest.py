import numpy as np
import pytest

from dsde.datamodel import ExperimentConfig


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def worked_pvals():
    """Four-model example used throughout: two strong signals, two nulls."""
    return {"A": 0.01, "B": 0.02, "C": 0.5, "D": 0.9}


@pytest.fixture
def cfg4():
    return ExperimentConfig(alpha=0.05, beta=1.0, c_m=0.25)


def random_pvectors(rng, n, m_max=64, tie_frac=0.2):
    """Random p-vectors of varying length, some with ties and exact 0/1 values."""
    out = []
    for _ in range(n):
        m = int(rng.integers(1, m_max + 1))
        kind = rng.random()
        if kind < 0.4:
            p = rng.random(m)
        elif kind < 0.8:
            p = rng.random(m) ** rng.uniform(1, 8)
        else:
            p = rng.choice([0.0, 0.001, 0.01, 0.02, 0.05, 0.5, 1.0], size=m)
        if rng.random() < tie_frac and m > 1:
            p[rng.integers(0, m)] = p[rng.integers(0, m)]
        out.append(p)
    return out
