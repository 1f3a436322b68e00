import numpy as np
import pytest

from badgeinf import synthgen
from badgeinf.model_core import UserTrace


@pytest.fixture(scope="session")
def small_dataset():
    return synthgen.generate_dataset(synthgen.SyntheticConfig(n_users=200, delta_lambda=2.0, seed=3))


def make_trace(uid="u", start=0.0, end=10.0, badge=5.0, events=(), covariates=(0.0,), truth=None):
    return UserTrace(uid, start, end, badge, np.asarray(events, dtype=float), np.asarray(covariates), truth)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
