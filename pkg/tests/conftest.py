"""
Shared fixtures: the three-user, two-day worked scenario, its exact
optimum and a high-accuracy oracle solution.
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from mechanism.oracle import CentralSolution, OracleConfig, solve_centralized  # noqa: E402
from mechanism.scenario import load_scenario  # noqa: E402

FIXTURE = Path(__file__).parent.parent / 'fixtures' / 'paper_example.json'

# Constraint multiplier of the community sum row in closed form
LAMBDA_SUM = (249 + math.sqrt(106201)) / 520


def exact_solution() -> CentralSolution:
    """Closed-form optimum: x11 sits on its lower bound and slot 2 is the only peak slot."""
    lam = np.zeros(7)
    lam[6] = LAMBDA_SUM
    lam[0] = LAMBDA_SUM - 0.9
    mu = np.array([0.0, 0.05])
    p = np.array([0.1, 0.2])
    x = np.array([[(i + 1) * (t + 1) / (LAMBDA_SUM + p[t] + mu[t]) - 2.0 for t in range(2)]
                  for i in range(3)])
    x[0, 0] = -1.0
    return CentralSolution(x=x, w=float(x.sum(axis=0).max()), lam=lam, mu=mu)


@pytest.fixture(scope='session')
def scenario():
    return load_scenario(FIXTURE)


@pytest.fixture(scope='session')
def inst(scenario):
    return scenario.instance


@pytest.fixture(scope='session')
def network(scenario):
    return scenario.network


@pytest.fixture(scope='session')
def exact():
    return exact_solution()


@pytest.fixture(scope='session')
def solution(inst):
    """Oracle solution tight enough for the 1e-9 budget identities."""
    return solve_centralized(inst, OracleConfig(tol=1e-11))
