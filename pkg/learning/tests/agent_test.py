import pytest
import numpy as np
from psiphi_core.demos import EgoTransition, ReplayBuffer
from psiphi_core.gridworld import CoinGridEnv, TaskVector, one_coin_grid
from psiphi_core.interfaces import InvalidArgument
from psiphi_core.network import EGO, forward, greedy_actions, init_params, q_values
from psiphi_core.oracle import build_tabular_model, generate_demonstrations
from psiphi_core.parameters import EpsilonSchedule, ItdConfig, NetworkConfig, PsiPhiConfig
from psiphi_core.seeding import SeedStream
from psiphi_learning.agent import (
    EvalPoint,
    GpiPolicy,
    PsiPhiAgent,
    eval_points_frame,
    gpi_act,
    gpi_choice,
    gpi_values,
    infer_task,
    train_psiphi,
)

RED = TaskVector.named("collect-red")
ZEROS = NetworkConfig(hidden_sizes=(), cumulant_dim=2, ensemble_size=2, init="zeros")
SMALL = NetworkConfig(hidden_sizes=(16,), cumulant_dim=2, ensemble_size=2)


def one_hot(i, size=4):
    v = np.zeros(size)
    v[i] = 1.0
    return v


def with_q(params, head, q, member=None):
    """Constant Q-values (first cumulant dimension) for a head on zero weights."""
    updates = {}
    for m in range(params.ensemble_size):
        if member is not None and m != member:
            continue
        b = np.zeros(params.n_actions * params.d)
        b[0::params.d] = q
        updates[f"psi.{head}.{m}.b"] = b
    return params.with_arrays(updates)


@pytest.fixture
def two_heads():
    return init_params(4, 3, ("1", EGO), ZEROS)


@pytest.fixture(scope="module")
def demos():
    model = build_tabular_model(one_coin_grid())
    return generate_demonstrations(model, [RED, TaskVector.named("-R-G")], episodes_per_agent=4, seed=0)


@pytest.fixture
def tiny_config():
    return PsiPhiConfig(
        itd=ItdConfig(batch=16, lr=1e-3, target_period=10, network=SMALL),
        epsilon=EpsilonSchedule(start=1.0, end=0.1, decay_fraction=0.5),
        target_period=10,
        lr=1e-3,
        batch=16,
        n_step=2,
        buffer_capacity=500,
        env_steps=60,
        learning_steps_per_episode=2,
        task_inference_window=200,
        eval_every=30,
        eval_episodes=2,
    )


def test_single_head_is_plain_greedy():
    params = init_params(4, 3, (EGO,), SMALL, seed=3)
    w = np.array([0.4, -1.0])
    obs = one_hot(2)
    expected = greedy_actions(params, obs, EGO, w)[0]
    assert gpi_act(params, obs, w, 0.0, SeedStream(0)) == expected


def test_dominating_head_is_followed(two_heads):
    params = with_q(two_heads, "1", [0.0, 5.0, 0.0])
    params = with_q(params, EGO, [1.0, 0.0, 0.0])
    w = np.array([1.0, 0.0])
    assert gpi_act(params, one_hot(0), w, 0.0, SeedStream(0)) == 1
    assert gpi_choice(params, one_hot(0), w) == (1, 0)
    # Restricted to the ego head the greedy action changes
    assert gpi_act(params, one_hot(0), w, 0.0, SeedStream(0), heads=[EGO]) == 0


def test_ties_go_to_lowest_action_and_head(two_heads):
    assert gpi_choice(two_heads, one_hot(1), np.array([1.0, 1.0])) == (0, 0)
    params = with_q(two_heads, "1", [0.0, 2.0, 2.0])
    params = with_q(params, EGO, [0.0, 2.0, 2.0])
    assert gpi_choice(params, one_hot(1), np.array([1.0, 0.0])) == (1, 0)


def test_acting_value_is_pessimistic(two_heads):
    params = with_q(two_heads, EGO, [3.0, 1.0, 0.0], member=0)
    params = with_q(params, EGO, [-1.0, 2.0, 0.5], member=1)
    w = np.array([1.0, 0.0])
    acting = gpi_values(params, one_hot(3), w, heads=[EGO])[0]
    members = q_values(forward(params, one_hot(3), heads=[EGO]).psi[EGO], w)
    assert np.all(acting <= members[0]) and np.all(acting <= members[1])
    assert acting[0].tolist() == [-1.0, 1.0, 0.0]
    assert gpi_choice(params, one_hot(3), w, heads=[EGO])[0] == 1


def test_epsilon_exploration(two_heads):
    stream = SeedStream(4)
    actions = [gpi_act(two_heads, one_hot(0), np.ones(2), 1.0, stream) for _ in range(300)]
    assert set(actions) == {0, 1, 2}
    with pytest.raises(InvalidArgument):
        gpi_act(two_heads, one_hot(0), np.ones(2), 1.5, stream)


def fill_buffer(params, w_true, n, seed=0):
    buffer = ReplayBuffer(capacity=n, observation_size=params.input_size)
    rng = SeedStream(seed).next()
    for _ in range(n):
        s, a = int(rng.integers(params.input_size)), int(rng.integers(params.n_actions))
        phi = forward(params, one_hot(s, params.input_size), heads=[]).phi[0, a]
        buffer.push(EgoTransition(one_hot(s, params.input_size), a, one_hot(s, params.input_size), float(phi @ w_true), False))
    return buffer


def tabular_store(seed):
    params = init_params(4, 3, (EGO,), ZEROS)
    rng = SeedStream(seed).next()
    return params.with_arrays({"phi.W": rng.normal(size=(4, 6))})


def test_infer_task_recovers_linear_rewards():
    params = tabular_store(1)
    w_true = np.array([0.8, -0.3])
    w = infer_task(params, fill_buffer(params, w_true, 200))
    np.testing.assert_allclose(w, w_true, atol=1e-5)


def test_infer_task_zero_rewards():
    params = tabular_store(2)
    assert np.array_equal(infer_task(params, fill_buffer(params, np.zeros(2), 50)), np.zeros(2))


def test_infer_task_needs_d_transitions():
    params = tabular_store(3).with_arrays({f"w.{EGO}": np.array([0.5, 0.5])})
    buffer = fill_buffer(params, np.ones(2), 1)
    assert infer_task(params, buffer).tolist() == [0.5, 0.5]


def test_infer_task_rank_deficient():
    params = init_params(4, 3, (EGO,), ZEROS).with_arrays({"phi.b": np.ones(6)})
    # Φ ≡ (1, 1): the ridge picks the minimum-norm split of the mean reward
    w = infer_task(params, fill_buffer(params, np.array([1.0, 0.0]), 20))
    assert np.all(np.isfinite(w))
    np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-5)


def test_infer_task_window():
    params = tabular_store(4)
    buffer = fill_buffer(params, np.array([1.0, 1.0]), 100)
    rng = SeedStream(9).next()
    for _ in range(50):
        s, a = int(rng.integers(4)), int(rng.integers(3))
        phi = forward(params, one_hot(s), heads=[]).phi[0, a]
        buffer.push(EgoTransition(one_hot(s), a, one_hot(s), float(phi @ np.array([-2.0, 0.0])), False))
    np.testing.assert_allclose(infer_task(params, buffer, window=50), [-2.0, 0.0], atol=1e-5)


def test_gpi_policy_matches_gpi_choice(two_heads):
    params = with_q(two_heads, "1", [0.0, 0.0, 1.0])
    policy = GpiPolicy(params, np.array([1.0, 0.0]))
    assert policy.act(one_hot(0), SeedStream(0).next()) == 2


def test_agent_layout(demos, tiny_config):
    agent = PsiPhiAgent(CoinGridEnv(one_coin_grid(), RED), demos, tiny_config, seed=0)
    assert agent.params.head_ids == ("1", "2", EGO)
    assert agent.acting_heads == ("1", "2", EGO)

    plain = PsiPhiAgent(CoinGridEnv(one_coin_grid(), RED), None, PsiPhiConfig(plain_q=True, gpi_enabled=False), seed=0)
    assert plain.params.head_ids == (EGO,)
    assert plain.params.d == 1
    assert plain.w_ego.tolist() == [1.0]
    assert tuple(plain.acting_heads) == (EGO,)


def test_itd_updates_share_the_agent_optimizer(demos, tiny_config):
    agent = PsiPhiAgent(CoinGridEnv(one_coin_grid(), RED), demos, tiny_config, seed=0)
    assert agent._itd.optimizer is agent.optimizer
    assert agent.optimizer.config.lr == tiny_config.lr


def test_training_loop(demos, tiny_config):
    env = CoinGridEnv(one_coin_grid(), RED)
    agent = PsiPhiAgent(env, demos, tiny_config, seed=1)
    points = agent.train()
    assert agent.env_steps == 60
    assert len(agent.buffer) == 60
    assert agent.learner_steps == 2 * agent.episodes
    assert [p.env_steps for p in points][0] == 0
    assert points[-1].env_steps == 60
    for p in points:
        assert p.normalized_return <= 1.0
        assert sum(p.head_usage.values()) == pytest.approx(1.0)
        assert set(p.head_usage) == {"1", "2", EGO}
    assert agent.params.is_finite()
    frame = eval_points_frame(points)
    assert list(frame.columns[:5]) == ["env_steps", "episodes", "mean_return", "normalized_return", "seed"]


def test_zero_learning_rate_keeps_params(demos, tiny_config):
    config = PsiPhiConfig(
        itd=ItdConfig(batch=8, lr=0.0, network=SMALL),
        lr=0.0, batch=8, env_steps=40, eval_every=0,
        task_inference_enabled=False, learning_steps_per_episode=1,
    )
    agent = PsiPhiAgent(CoinGridEnv(one_coin_grid(), RED), demos, config, seed=2)
    initial = agent.params.copy()
    agent.train()
    assert agent.params.equals(initial)


def test_same_seed_same_run(demos, tiny_config):
    a, points_a = train_psiphi(CoinGridEnv(one_coin_grid(), RED), demos, tiny_config, seed=3)
    b, points_b = train_psiphi(CoinGridEnv(one_coin_grid(), RED), demos, tiny_config, seed=3)
    assert a.equals(b)
    assert [p.mean_return for p in points_a] == [p.mean_return for p in points_b]


def test_checkpoint_restore(demos, tiny_config, tmp_path):
    agent = PsiPhiAgent(CoinGridEnv(one_coin_grid(), RED), demos, tiny_config, seed=4)
    agent.train(30)
    path = tmp_path / "agent.ckpt"
    agent.save(path)

    resumed = PsiPhiAgent(CoinGridEnv(one_coin_grid(), RED), demos, tiny_config, seed=4)
    resumed.restore(path)
    assert resumed.params.equals(agent.params)
    assert resumed.targets.params.equals(agent.targets.params)
    assert resumed.env_steps == agent.env_steps
    assert resumed.learner_steps == agent.learner_steps
    assert resumed.streams["act"].state() == agent.streams["act"].state()


def test_set_task(demos, tiny_config):
    env = CoinGridEnv(one_coin_grid(), RED)
    agent = PsiPhiAgent(env, demos, tiny_config, seed=0)
    agent.set_task(TaskVector.named("-R-G"))
    assert env.task.weights.tolist() == [-1.0, -1.0, 0.0, 0.0]


def test_online_demos_hook(demos, tiny_config):
    extra = demos.trajectories[0]
    agent = PsiPhiAgent(
        CoinGridEnv(one_coin_grid(), RED),
        generate_demonstrations(build_tabular_model(one_coin_grid()), [RED, TaskVector.named("-R-G")], episodes_per_agent=2, seed=5),
        tiny_config,
        seed=0,
        online_demos=lambda a: [extra],
    )
    before = len(agent.demos)
    agent.run_episode()
    assert len(agent.demos) == before + 1


def test_eval_point_frame_empty():
    assert eval_points_frame([]).empty
    row = eval_points_frame([EvalPoint(10, 2, 0.5, 0.25, seed=1, head_usage={EGO: 1.0})]).iloc[0]
    assert row["usage_ego"] == 1.0


@pytest.mark.slow
def test_psiphi_with_demonstrations_reaches_oracle_on_one_coin_grid():
    env_config = dict(
        itd=ItdConfig(batch=32, lr=1e-3, target_period=200, network=NetworkConfig(hidden_sizes=(64,), cumulant_dim=4)),
        lr=1e-3, batch=32, target_period=200, env_steps=6000, eval_every=500, eval_episodes=5,
    )
    base = build_tabular_model(one_coin_grid())
    demos = generate_demonstrations(base, [RED], episodes_per_agent=50, seed=0)
    _, with_demos = train_psiphi(CoinGridEnv(one_coin_grid(), RED), demos, PsiPhiConfig(**env_config), seed=0)
    assert max(p.normalized_return for p in with_demos) >= 0.9
