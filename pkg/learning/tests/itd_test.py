import pytest
import numpy as np
from psiphi_core.demos import DemoSet
from psiphi_core.gridworld import TaskVector, canonical_coingrid, one_coin_grid
from psiphi_core.interfaces import EmptyDataset, UnknownAgentId
from psiphi_core.network import agent_heads, greedy_actions, init_params
from psiphi_core.oracle import build_tabular_model, generate_demonstrations, value_iteration
from psiphi_core.parameters import ItdConfig, NetworkConfig
from psiphi_learning.itd import (
    ItdTrainer,
    head_policy,
    preference_cosine,
    recover_reward,
    recovered_rewards,
    run_itd,
)

SMALL = NetworkConfig(hidden_sizes=(16,), cumulant_dim=2, ensemble_size=2)


@pytest.fixture(scope="module")
def demos():
    model = build_tabular_model(one_coin_grid())
    tasks = [TaskVector.named("collect-red"), TaskVector.named("-R-G")]
    return generate_demonstrations(model, tasks, episodes_per_agent=8, seed=3)


@pytest.fixture
def config():
    return ItdConfig(batch=32, lr=1e-3, max_steps=20, target_period=5, network=SMALL)


def test_zero_steps_returns_initial_params(demos, config):
    width = demos.arrays().obs.shape[1]
    params = init_params(width, 3, agent_heads(2, ego=False), SMALL, seed=0)
    trained, log = run_itd(demos, ItdConfig(max_steps=0, network=SMALL), params=params)
    assert trained.equals(params)
    assert len(log) == 0
    assert list(log.to_frame().columns) == ["step", "loss_bcq", "loss_itd", "l1_w"]


def test_log_records_every_step(demos, config, tmp_path):
    _, log = run_itd(demos, config, seed=1)
    frame = log.to_frame()
    assert list(frame["step"]) == list(range(1, 21))
    assert list(frame.columns) == ["step", "loss_bcq", "loss_itd", "l1_w", "accuracy_1", "accuracy_2"]
    assert np.all(np.isfinite(frame[["loss_bcq", "loss_itd", "l1_w"]].to_numpy()))
    log.save(tmp_path / "itd.csv")
    assert (tmp_path / "itd.csv").read_text().startswith("step,loss_bcq,loss_itd,l1_w")


def test_deterministic_given_seed(demos, config):
    a, _ = run_itd(demos, config, seed=5)
    b, _ = run_itd(demos, config, seed=5)
    c, _ = run_itd(demos, config, seed=6)
    assert a.equals(b)
    assert not a.equals(c)


def test_policy_next_action_mode(demos, config):
    params, log = run_itd(demos, ItdConfig(batch=16, max_steps=3, next_action="policy", network=SMALL), seed=2)
    assert params.is_finite()
    assert len(log) == 3


def test_alternate_ratio_runs_extra_bc_steps(demos):
    width = demos.arrays().obs.shape[1]
    params = init_params(width, 3, agent_heads(2, ego=False), SMALL, seed=0)
    trainer = ItdTrainer(demos, ItdConfig(batch=64, alternate_ratio=3, network=SMALL), params, seed=0)
    trainer.step()
    # Three BC-Q updates and one ITD update touch the torso four times
    assert trainer.optimizer.state.t["torso.0.W"] == 4
    assert trainer.optimizer.state.t["phi.W"] == 1
    assert trainer.optimizer.state.t["w.1"] == 3


def test_empty_demos():
    with pytest.raises(EmptyDataset):
        run_itd(DemoSet(n_agents=1))


def test_missing_head(demos):
    width = demos.arrays().obs.shape[1]
    params = init_params(width, 3, agent_heads(1, ego=False), SMALL, seed=0)
    with pytest.raises(UnknownAgentId):
        ItdTrainer(demos, ItdConfig(network=SMALL), params)


def test_recovered_reward_zero_preferences(demos):
    width = demos.arrays().obs.shape[1]
    params = init_params(width, 3, agent_heads(2, ego=False), SMALL, seed=0)
    obs = demos.trajectories[0].steps[0][0]
    assert recover_reward(params, 1, obs, 2) == 0.0
    assert not recovered_rewards(params, 2, demos.arrays().obs).any()
    with pytest.raises(UnknownAgentId):
        recover_reward(params, 3, obs, 0)


def test_recovered_reward_is_phi_dot_w(demos):
    width = demos.arrays().obs.shape[1]
    params = init_params(width, 3, ("1",), NetworkConfig(hidden_sizes=(), cumulant_dim=1, init="zeros"))
    # Φ ≡ 1 and w = c give the constant reward c
    params = params.with_arrays({"phi.b": np.ones(3), "w.1": np.array([0.7])})
    rewards = recovered_rewards(params, 1, demos.arrays().obs[:5])
    assert np.allclose(rewards, 0.7)


def test_head_policy_is_uniform_at_zero_preferences(demos):
    width = demos.arrays().obs.shape[1]
    params = init_params(width, 3, agent_heads(2, ego=False), SMALL, seed=0)
    probs = head_policy(params, 1, demos.arrays().obs[:4])
    assert np.allclose(probs, 1.0 / 3)


def test_preference_cosine(demos):
    width = demos.arrays().obs.shape[1]
    params = init_params(width, 3, agent_heads(2, ego=False), SMALL, seed=0)
    assert preference_cosine(params, (1, 2)) == 0.0
    params = params.with_arrays({"w.1": np.array([1.0, 0.0]), "w.2": np.array([0.0, 2.0])})
    assert preference_cosine(params, (1, 2)) == pytest.approx(0.0)
    params = params.with_arrays({"w.2": np.array([3.0, 0.0])})
    assert preference_cosine(params, (1, 2)) == pytest.approx(1.0)


@pytest.mark.slow
def test_single_demonstrator_is_imitated():
    base = build_tabular_model(one_coin_grid())
    red = TaskVector.named("collect-red")
    demos = generate_demonstrations(base, [red], temperature=0.02, episodes_per_agent=50, seed=0)
    config = ItdConfig(batch=64, lr=3e-3, max_steps=3000, network=NetworkConfig(hidden_sizes=(64,), cumulant_dim=4))
    params, log = run_itd(demos, config, seed=0)

    # Shortest paths tie, so any optimal action counts as a match
    model = base.for_task(red)
    q, _ = value_iteration(model, model.reward(red))
    obs = demos.arrays().obs
    chosen = greedy_actions(params, obs, 1)
    states = [model.index_of(o) for o in obs]
    optimal = [q[s, a] >= q[s].max() - 1e-9 for s, a in zip(states, chosen)]
    assert np.mean(optimal) >= 0.95
    frame = log.to_frame()
    assert frame["loss_bcq"].iloc[-100:].mean() < frame["loss_bcq"].iloc[:100].mean()


@pytest.mark.slow
def test_opposing_demonstrators_get_dissimilar_preferences():
    model = build_tabular_model(canonical_coingrid())
    tasks = [TaskVector.named("collect-red"), TaskVector.named("collect-green")]
    demos = generate_demonstrations(model, tasks, episodes_per_agent=100, seed=0)
    config = ItdConfig(batch=64, lr=1e-3, max_steps=3000, target_period=200,
                       network=NetworkConfig(hidden_sizes=(64,), cumulant_dim=4))
    params, _ = run_itd(demos, config, seed=0)
    assert preference_cosine(params, (1, 2)) < 0.2
