import pytest
import numpy as np
from psiphi_core.demos import DemoBatch, EgoBatch
from psiphi_core.interfaces import NonFiniteLoss, ShapeMismatch, UnknownAgentId
from psiphi_core.losses import (
    LossSpec,
    add_grads,
    bc_nll,
    bcq_loss,
    compute_loss,
    grad,
    itd_loss,
    l1_subgradient,
    q_td_loss,
    reward_loss,
    sf_td_loss,
)
from psiphi_core.network import EGO, TargetStore, forward, greedy_actions, init_params, pessimistic_q
from psiphi_core.parameters import NetworkConfig
from psiphi_core.seeding import SeedStream

# input 2, hidden 3, |A| 2, d 2, heads {1, ego} x 2 members: 93 parameters
SMALL = NetworkConfig(hidden_sizes=(3,), cumulant_dim=2, ensemble_size=2)
B = 6


def small_store(seed):
    params = init_params(2, 2, ("1", EGO), SMALL, seed=seed)
    rng = SeedStream(seed + 100).next()
    # Preferences away from 0 so the L1 term is differentiable
    return params.with_arrays({
        "w.1": rng.choice([-1.0, 1.0], size=2) * rng.uniform(0.3, 1.0, size=2),
        f"w.{EGO}": rng.choice([-1.0, 1.0], size=2) * rng.uniform(0.3, 1.0, size=2),
    })


@pytest.fixture
def params():
    return small_store(0)


@pytest.fixture
def targets():
    return small_store(1)


@pytest.fixture
def demo_batch():
    rng = SeedStream(7).next()
    return DemoBatch(
        obs=rng.normal(size=(B, 2)),
        actions=rng.integers(2, size=B),
        next_obs=rng.normal(size=(B, 2)),
        next_actions=rng.integers(2, size=B),
        agent_ids=np.ones(B, dtype=np.int64),
        has_next=np.array([1.0, 1.0, 0.0, 1.0, 1.0, 0.0]),
    )


@pytest.fixture
def ego_batch():
    rng = SeedStream(8).next()
    return EgoBatch(
        obs=rng.normal(size=(B, 2)),
        actions=rng.integers(2, size=B),
        rewards=rng.normal(size=B),
        next_obs=rng.normal(size=(B, 2)),
        discounts=np.array([0.81, 0.9, 0.0, 0.81, 0.729, 0.9]),
        rewards_1=rng.normal(size=B),
        next_obs_1=rng.normal(size=(B, 2)),
        discounts_1=np.array([0.9, 0.9, 0.0, 0.9, 0.9, 0.9]),
    )


def check_gradients(loss_fn, params, h=1e-5):
    """Central differences against the analytic gradient, block by block."""
    analytic = loss_fn(params).grads
    for key, g in analytic.items():
        numeric = np.zeros_like(g)
        base = params[key]
        for idx in np.ndindex(base.shape):
            up, down = base.copy(), base.copy()
            up[idx] += h
            down[idx] -= h
            numeric[idx] = (
                loss_fn(params.with_arrays({key: up})).value
                - loss_fn(params.with_arrays({key: down})).value
            ) / (2 * h)
        np.testing.assert_allclose(g, numeric, rtol=1e-4, atol=1e-7, err_msg=key)
    return analytic


def test_parameter_count(params):
    assert params.n_parameters == 93


def test_forward_shapes(params):
    fwd = forward(params, np.zeros((4, 2)))
    assert fwd.phi.shape == (4, 2, 2)
    assert set(fwd.psi) == {"1", EGO}
    assert fwd.psi[EGO].shape == (2, 4, 2, 2)
    assert pessimistic_q(fwd.psi[EGO], params.w(EGO)).shape == (4, 2)
    assert greedy_actions(params, np.zeros((4, 2)), EGO).shape == (4,)


def test_forward_errors(params):
    with pytest.raises(ShapeMismatch):
        forward(params, np.zeros((4, 3)))
    with pytest.raises(UnknownAgentId):
        forward(params, np.zeros((4, 2)), heads=[7])
    with pytest.raises(ShapeMismatch):
        params.with_arrays({"phi.b": np.zeros(3)})


def test_zero_init():
    params = init_params(2, 2, ("1",), NetworkConfig(hidden_sizes=(3,), cumulant_dim=2, init="zeros"))
    fwd = forward(params, np.ones((1, 2)))
    assert not fwd.phi.any()
    assert not fwd.psi["1"].any()


def test_bcq_gradients(params, demo_batch):
    grads = check_gradients(lambda p: bcq_loss(p, demo_batch, lambda_w=0.05), params)
    assert set(grads) == {"torso.0.W", "torso.0.b", "psi.1.0.W", "psi.1.0.b", "psi.1.1.W", "psi.1.1.b", "w.1"}


def test_itd_gradients(params, targets, demo_batch):
    grads = check_gradients(lambda p: itd_loss(p, targets, demo_batch, gamma=0.9), params)
    assert set(grads) == {"torso.0.W", "torso.0.b", "phi.W", "phi.b", "psi.1.0.W", "psi.1.0.b", "psi.1.1.W", "psi.1.1.b"}


def test_reward_gradients(params, ego_batch):
    grads = check_gradients(lambda p: reward_loss(p, ego_batch), params)
    assert set(grads) == {"torso.0.W", "torso.0.b", "phi.W", "phi.b", f"w.{EGO}"}


def test_q_td_gradients(params, targets, ego_batch):
    grads = check_gradients(lambda p: q_td_loss(p, targets, ego_batch), params)
    assert set(grads) == {"torso.0.W", "torso.0.b"} | {f"psi.{EGO}.{m}.{x}" for m in (0, 1) for x in "Wb"}


def test_sf_td_gradients(params, targets, ego_batch):
    grads = check_gradients(lambda p: sf_td_loss(p, targets, ego_batch, scale=0.5), params)
    assert set(grads) == {"torso.0.W", "torso.0.b"} | {f"psi.{EGO}.{m}.{x}" for m in (0, 1) for x in "Wb"}


def test_itd_terminal_pairs_ignore_bootstrap(params, targets, demo_batch):
    # Changing the successor of a has_next = 0 pair leaves the loss unchanged
    moved = DemoBatch(
        obs=demo_batch.obs,
        actions=demo_batch.actions,
        next_obs=demo_batch.next_obs.copy(),
        next_actions=demo_batch.next_actions,
        agent_ids=demo_batch.agent_ids,
        has_next=demo_batch.has_next,
    )
    moved.next_obs[2] += 10.0
    a = itd_loss(params, targets, demo_batch, 0.9).value
    b = itd_loss(params, targets, moved, 0.9).value
    assert a == pytest.approx(b, rel=1e-12)


def test_bcq_unknown_agent(params, demo_batch):
    bad = DemoBatch(
        obs=demo_batch.obs,
        actions=demo_batch.actions,
        next_obs=demo_batch.next_obs,
        next_actions=demo_batch.next_actions,
        agent_ids=np.full(B, 5),
        has_next=demo_batch.has_next,
    )
    with pytest.raises(UnknownAgentId):
        bcq_loss(params, bad)


def test_non_finite_loss(params, demo_batch):
    broken = params.with_arrays({"w.1": np.array([np.nan, 1.0])})
    with pytest.raises(NonFiniteLoss):
        bcq_loss(broken, demo_batch)


def test_bc_nll_matches_softmax():
    logits = np.array([[1.0, 2.0, 0.5]])
    expected = -np.log(np.exp(2.0) / np.exp(logits).sum())
    assert bc_nll(logits, np.array([1]))[0] == pytest.approx(expected)


def test_l1_dead_zone():
    g = l1_subgradient(np.array([0.5, -0.2, 1e-9, 0.0]), 0.05)
    assert g.tolist() == [0.05, -0.05, 0.0, 0.0]


def test_dispatch(params, targets, demo_batch, ego_batch):
    direct = itd_loss(params, targets, demo_batch, gamma=0.9)
    via = compute_loss(LossSpec.ITD, params, demo_batch, targets, gamma=0.9)
    assert direct.value == via.value
    assert set(grad(params, "td_psi", ego_batch, targets)) == set(sf_td_loss(params, targets, ego_batch).grads)
    l1 = compute_loss(LossSpec.L1, params, lambda_w=0.1, heads=["1"])
    assert set(l1.grads) == {"w.1"}
    merged = add_grads({"a": np.ones(2)}, {"a": np.ones(2), "b": np.zeros(1)})
    assert merged["a"].tolist() == [2.0, 2.0] and "b" in merged


def test_target_refresh(params):
    target = TargetStore.of(params, update_period=3)
    moved = params.with_arrays({"phi.b": params["phi.b"] + 1.0})
    assert not target.maybe_refresh(moved, 2)
    assert target.params.equals(params)
    assert target.maybe_refresh(moved, 3)
    assert target.params.equals(moved)
    assert target.last_refresh == 3


def three_action_store(seed=0):
    return init_params(2, 3, ("1",), SMALL, seed=seed)


def test_bcq_loss_is_log_actions_at_zero_preferences(demo_batch):
    result = bcq_loss(three_action_store(), demo_batch, lambda_w=0.05)
    assert result.value == pytest.approx(np.log(3.0), abs=1e-12)


def test_bcq_loss_ignores_translation_of_successor_features(params, demo_batch):
    rng = SeedStream(11).next()
    shift_b = rng.normal(scale=5.0, size=SMALL.cumulant_dim)
    shift_W = rng.normal(scale=5.0, size=(SMALL.hidden_sizes[-1], SMALL.cumulant_dim))
    moved = {}
    for m in range(SMALL.ensemble_size):
        # The same vector for every action, so Q(s, ·) moves by a constant
        moved[f"psi.1.{m}.b"] = params[f"psi.1.{m}.b"] + np.tile(shift_b, 2)
        moved[f"psi.1.{m}.W"] = params[f"psi.1.{m}.W"] + np.tile(shift_W, (1, 2))
    before = bcq_loss(params, demo_batch, lambda_w=0.05).value
    after = bcq_loss(params.with_arrays(moved), demo_batch, lambda_w=0.05).value
    assert after == pytest.approx(before, abs=1e-10)


def test_itd_loss_vanishes_on_exact_successor_features():
    n, A, gamma = 6, 3, 0.9
    network = NetworkConfig(hidden_sizes=(), cumulant_dim=2, ensemble_size=2)
    rng = SeedStream(3).next()
    next_state = rng.integers(n, size=(n, A))
    policy = rng.integers(A, size=n)
    phi = rng.normal(size=(n, A, 2))

    P = np.zeros((n, n))
    P[np.arange(n), next_state[np.arange(n), policy]] = 1.0
    psi_policy = np.linalg.solve(np.eye(n) - gamma * P, phi[np.arange(n), policy])
    psi = phi + gamma * psi_policy[next_state]

    params = init_params(n, A, ("1",), network, seed=0).with_arrays({
        "phi.W": phi.reshape(n, A * 2),
        "phi.b": np.zeros(A * 2),
        **{f"psi.1.{m}.W": psi.reshape(n, A * 2) for m in range(2)},
        **{f"psi.1.{m}.b": np.zeros(A * 2) for m in range(2)},
    })
    states = np.repeat(np.arange(n), A)
    actions = np.tile(np.arange(A), n)
    successors = next_state[states, actions]
    batch = DemoBatch(
        obs=np.eye(n)[states],
        actions=actions,
        next_obs=np.eye(n)[successors],
        next_actions=policy[successors],
        agent_ids=np.ones(n * A, dtype=np.int64),
        has_next=np.ones(n * A),
    )
    assert itd_loss(params, params, batch, gamma).value < 1e-12
