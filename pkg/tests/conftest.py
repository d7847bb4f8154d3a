import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

from colbisbm import BipartiteNetwork, EmissionKind, NetworkCollection  # noqa: E402


def make_collection(mats, emission="bernoulli", masks=None):
    masks = masks or [None] * len(mats)
    nets = tuple(
        BipartiteNetwork(np.asarray(x), None if k is None else np.asarray(k, bool), name=f"n{m}")
        for m, (x, k) in enumerate(zip(mats, masks))
    )
    return NetworkCollection(nets, EmissionKind.parse(emission))


def planted(rng, n1, n2, alpha, pi=None, rho=None):
    alpha = np.asarray(alpha, float)
    q1, q2 = alpha.shape
    z = rng.choice(q1, size=n1, p=pi)
    w = rng.choice(q2, size=n2, p=rho)
    x = (rng.random((n1, n2)) < alpha[z][:, w]).astype(int)
    return x, z, w


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
