"""Shared fixtures: the synthetic suites and the trained models used by the acceptance tests.

Training runs once per session; each fixture is only built when a test asks for it.
"""
import time

import numpy as np
import pytest

from awm import nn, scenario, train
from awm.dynamics import SimConfig

MAIN_KINDS = ["straight", "arc", "s-curve", "stop-go"]

# training recipe used by the acceptance suite
APG_RECIPE = dict(lr=1e-3, batch_size=8, apg_epochs=150, awm_epochs=0, seed=0)
AWM_RECIPE = dict(lr=1e-3, awm_lr=3e-3, apg_epochs=0, awm_epochs=300, seed=0,
                  weights={"policy": 0.0, "odo": 1.0, "plan": 1.0, "inv": 1.0})
FORK_RECIPE = dict(lr=1e-3, batch_size=8, apg_epochs=100, awm_epochs=0, seed=0, route="none", wta="state")

_ACCEPTANCE = {}


def record_acceptance(criterion, passed, detail):
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    _ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[k])


@pytest.fixture(scope="session")
def acceptance_report():
    return record_acceptance


@pytest.fixture(scope="session")
def main_train():
    return scenario.generate_dataset(MAIN_KINDS, 64, 0)


@pytest.fixture(scope="session")
def main_heldout():
    return scenario.generate_dataset(MAIN_KINDS, 64, 1000)


@pytest.fixture(scope="session")
def fork_train():
    return scenario.generate_dataset(["fork"], 32, 0)


@pytest.fixture(scope="session")
def apg_model(main_train):
    t0 = time.perf_counter()
    res = train.train(main_train, train.TrainConfig(**APG_RECIPE))
    assert res.diverged is None
    return res.params, time.perf_counter() - t0


@pytest.fixture(scope="session")
def awm_model(apg_model, main_train, main_heldout):
    """Policy from ``apg_model`` plus odometry, planner and inverse-state heads."""
    res = train.train(main_train, train.TrainConfig(**AWM_RECIPE), params=apg_model[0], heldout=main_heldout)
    assert res.diverged is None
    return res.params


@pytest.fixture(scope="session")
def fork_model(fork_train):
    res = train.train(fork_train, train.TrainConfig(**FORK_RECIPE))
    assert res.diverged is None
    return res.params


@pytest.fixture(scope="session")
def sim_cfg():
    return SimConfig()


@pytest.fixture
def tiny_params():
    return nn.init_params(nn.NetConfig(hidden=8, encoder_hidden=8, head_hidden=8, mixture=3), 0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
