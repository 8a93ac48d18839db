import numpy as np
import pytest

from knode_online.dynamics import NX, QuadParams
from knode_online.ensemble import EnsembleModel
from knode_online.mlp import Mlp

SMALL_DIMS = (17, 8, 13)


def random_state(rng, pos_scale=1.0, vel_scale=0.5, rate_scale=0.5):
    """Random state with a unit quaternion near level attitude."""
    x = np.zeros(NX)
    x[0:3] = rng.normal(0, pos_scale, 3)
    x[3:6] = rng.normal(0, vel_scale, 3)
    q = np.array([1.0, 0, 0, 0]) + rng.normal(0, 0.2, 4)
    x[6:10] = q / np.linalg.norm(q)
    x[10:13] = rng.normal(0, rate_scale, 3)
    return x


def random_control(rng, params=None, spread=0.1):
    p = params or QuadParams()
    u = p.hover_input().copy()
    u[0] *= 1.0 + rng.normal(0, spread)
    u[1:] = rng.normal(0, spread * p.torque_max, 3)
    return u


def random_z(rng, n=None, params=None):
    if n is None:
        return np.concatenate([random_state(rng), random_control(rng, params)])
    return np.array([random_z(rng, None, params) for _ in range(n)])


def random_net(rng, dims=SMALL_DIMS, scale=1.0):
    net = Mlp.initialize(dims, rng)
    return net.with_params(net.params * scale)


def filled_model(rng, n_members=3, dims=SMALL_DIMS, capacity=3, scale=1e-2):
    model = EnsembleModel(QuadParams(), capacity, (), 0, dims)
    for _ in range(n_members):
        model = model.push(random_net(rng, dims, scale))
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance lines recorded by test_acceptance.py, echoed after the run so they
# show up even when pytest captures test output
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
