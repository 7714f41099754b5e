import pytest
import numpy as np
from psiphi_core.network import EGO, init_params
from psiphi_core.optim import Adam, AdamState, sgd_step
from psiphi_core.parameters import NetworkConfig, OptimizerConfig

CONFIG = NetworkConfig(hidden_sizes=(3,), cumulant_dim=2, ensemble_size=1)


@pytest.fixture
def params():
    return init_params(2, 2, ("1", EGO), CONFIG, seed=4)


def test_first_step_moves_by_lr(params):
    grads = {"phi.b": np.array([2.0, -0.5, 0.0, 1e3])}
    new, state = sgd_step(params, grads, lr=1e-2)
    delta = new["phi.b"] - params["phi.b"]
    assert np.allclose(delta[[0, 1, 3]], [-1e-2, 1e-2, -1e-2], rtol=1e-6)
    assert delta[2] == 0.0
    assert state.t == {"phi.b": 1}


def test_untouched_blocks_are_kept(params):
    new, state = sgd_step(params, {"w.1": np.ones(2)})
    for key in params.arrays:
        if key != "w.1":
            assert new[key] is params[key]
    assert set(state.m) == {"w.1"}


def test_inputs_not_modified(params):
    before = params.copy()
    state = AdamState()
    sgd_step(params, {"phi.W": np.ones_like(params["phi.W"])}, state)
    assert params.equals(before)
    assert state.t == {}


def test_per_block_step_counts(params):
    state = None
    for _ in range(2):
        params, state = sgd_step(params, {"w.1": np.ones(2)}, state)
    params, state = sgd_step(params, {f"w.{EGO}": np.ones(2)}, state)
    assert state.t == {"w.1": 2, f"w.{EGO}": 1}


def test_adam_minimizes_quadratic(params):
    target = np.array([0.7, -0.3])
    adam = Adam(OptimizerConfig(lr=0.05))
    for _ in range(1000):
        params = adam.step(params, {"w.1": 2 * (params.w(1) - target)})
    assert np.allclose(params.w(1), target, atol=2e-2)
