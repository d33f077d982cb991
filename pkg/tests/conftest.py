import numpy as np
import pytest

from fedpm.data import partition_even, synth_logistic
from fedpm.objectives import LogisticL2Objective, QuadraticObjective


def random_spd(rng, d, floor=0.5):
    M = rng.standard_normal((d, d))
    return M @ M.T / d + floor * np.eye(d)


def logistic_clients(d=30, n_clients=10, per_client=50, lam=1e-3, separation=1.0, seed=0):
    ds = synth_logistic(d, n_clients * per_client, separation, seed)
    part = partition_even(ds, n_clients)
    return [LogisticL2Objective(ds.X[s], ds.y[s], lam) for s in part.shards]


def quadratic_clients(rng, d, n_clients):
    return [QuadraticObjective(random_spd(rng, d), rng.standard_normal(d)) for _ in range(n_clients)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if rep.when == "call" and "test_acceptance.py::test_c" in rep.nodeid:
                name = rep.nodeid.split("::")[-1]
                lines.append((name, "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict in sorted(lines):
            number = int(name[6:8])
            terminalreporter.write_line(f"criterion {number:2d} {verdict}  {name[9:]}")
