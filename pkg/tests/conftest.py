import math

import numpy as np
import pytest

from hyperest.estimators import run_continuous_observer, run_discrete_observer, run_hybrid_observer
from hyperest.scenarios import BALL_X0, build_bouncing_ball, build_regressor_eq261


@pytest.fixture(scope="session")
def eq261():
    """Regression data and error pair over 9 periods, gamma = 1."""
    return build_regressor_eq261(1.0, 9)


@pytest.fixture(scope="session")
def ball_traces():
    out = {}
    for u in (0.0, 20.0):
        plant, cfg, sim = build_bouncing_ball(9.81, u)
        for name, run in (("hybrid", run_hybrid_observer), ("continuous", run_continuous_observer),
                          ("discrete", run_discrete_observer)):
            out[(u, name)] = run(plant, [9.81], u, BALL_X0, cfg, sim)
    return out


TWO_PI = 2.0 * math.pi


def rng(seed=0):
    return np.random.default_rng(seed)
