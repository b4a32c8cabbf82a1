import numpy as np
import pytest

from cbf_hqp.dynamics import load_bundled_model


@pytest.fixture(scope="session")
def panda():
    return load_bundled_model("panda")


@pytest.fixture(scope="session")
def twolink():
    return load_bundled_model("twolink")


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_panda_state(model, rng, vel_scale=1.0):
    """Interior joint configuration away from the limits."""
    lo, hi = model.q_min, model.q_max
    q = lo + (0.2 + 0.6 * rng.random(model.n_joints)) * (hi - lo)
    qd = vel_scale * rng.uniform(-1.0, 1.0, model.n_joints)
    return q, qd
