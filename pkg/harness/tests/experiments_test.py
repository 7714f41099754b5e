from dataclasses import replace

import pytest
import numpy as np
import pandas as pd
from psiphi_core.demos import DemoSet
from psiphi_core.gridworld import FORWARD, ONE_COIN_MAP, CoinGridEnv, TaskVector, canonical_coingrid, parse_map, transition
from psiphi_core.interfaces import InvalidArgument
from psiphi_core.network import init_params
from psiphi_core.oracle import build_tabular_model, plan
from psiphi_core.parameters import (
    DemoConfig,
    EpsilonSchedule,
    EvalConfig,
    ExperimentConfig,
    ItdConfig,
    NetworkConfig,
    PsiPhiConfig,
)
from psiphi_learning.agent import EvalPoint
from psiphi_learning.itd import run_itd
from psiphi_harness.experiments import (
    TRANSFER_TASKS,
    TransferTask,
    _probe_state,
    acceleration_ratio,
    cumulant_color_contrast,
    dump_cumulants,
    eval_acceleration,
    eval_few_shot,
    eval_imitation,
    eval_irl,
    evaluate_policy,
    few_shot_summary,
    irl_rows,
    make_demos,
    steps_to_return,
    sweep_cumulant_dim,
    sweep_pattern,
    train_on_reward,
    true_reward_fn,
    with_cumulant_dim,
)

RED = TaskVector.named("collect-red")
SMALL = NetworkConfig(hidden_sizes=(16,), cumulant_dim=2, ensemble_size=2)
WALLED_MAP = """\
>.#.
....
...R
"""


@pytest.fixture(scope="module")
def config(tmp_path_factory):
    path = tmp_path_factory.mktemp("maps") / "one_coin.txt"
    path.write_text(ONE_COIN_MAP)
    itd = ItdConfig(batch=16, lr=1e-3, max_steps=20, target_period=10, network=SMALL)
    return ExperimentConfig(
        map_path=str(path),
        demo=DemoConfig(tasks=("collect-red", "-R-G"), episodes_per_agent=4),
        itd=itd,
        psiphi=PsiPhiConfig(
            itd=itd,
            epsilon=EpsilonSchedule(start=1.0, end=0.1, decay_fraction=0.5),
            target_period=10,
            lr=1e-3,
            batch=16,
            buffer_capacity=500,
            env_steps=60,
            learning_steps_per_episode=2,
            task_inference_window=200,
            eval_every=0,
            eval_episodes=2,
        ),
        eval=EvalConfig(
            episodes=2,
            learner="planner",
            shots=(0, 1),
            transfer_tasks=("R+G", "-R-G"),
            imitation_phases=("collect-red", "R+G"),
            cumulant_dims=(1, 2),
            n_mdps=2,
            itd_mdps=0,
        ),
    )


@pytest.fixture(scope="module")
def demos(config):
    return make_demos(config, seed=0)


@pytest.fixture(scope="module")
def spec():
    return parse_map(ONE_COIN_MAP)


def test_make_demos_one_agent_per_task(demos):
    assert demos.n_agents == 2
    assert len(demos) == 8


def test_transfer_task_validation():
    assert TransferTask("-R+G", shots=1).w_true.weights[:2].tolist() == [-1.0, 1.0]
    with pytest.raises(InvalidArgument):
        TransferTask("R*G")
    with pytest.raises(InvalidArgument):
        TransferTask("R+G", shots=-1)


def test_probe_state_steps_onto_cell(spec):
    for cell in [(0, 0), (1, 1), (2, 3)]:
        state = _probe_state(spec, cell)
        assert state is not None
        assert state.agent_cell != cell
        assert transition(state, FORWARD, spec)[0].agent_cell == cell


def test_dump_cumulants_shapes_and_walls():
    spec = parse_map(WALLED_MAP)
    network = NetworkConfig(hidden_sizes=(), cumulant_dim=2, init="zeros")
    params = init_params(spec.observation_size, 3, ("1",), network)
    grids = dump_cumulants(params, spec)
    assert sorted(grids) == [0, 1]
    grid = grids[0]
    assert list(grid.columns) == ["c0", "c1", "c2", "c3"]
    assert grid.shape == (3, 4)
    assert np.isnan(grid.iloc[0, 2])
    assert np.nansum(np.abs(grid.to_numpy())) == 0.0
    assert grid.notna().sum().sum() == 11


def test_dump_cumulants_single_dimension(spec):
    network = NetworkConfig(hidden_sizes=(), cumulant_dim=1, init="zeros")
    params = init_params(spec.observation_size, 3, ("1",), network)
    assert list(dump_cumulants(params, spec)) == [0]


def test_cumulant_color_contrast(spec):
    values = np.ones((3, 4))
    values[2, 3] = 5.0
    frame = cumulant_color_contrast({0: pd.DataFrame(values)}, spec)
    # Only red coins are on the grid
    assert frame["color"].tolist() == ["red"]
    row = frame.iloc[0]
    assert row["on_coin"] == 5.0
    assert row["elsewhere"] == 1.0
    assert row["ratio"] == 5.0


def test_planner_scores_one(spec):
    env = CoinGridEnv(spec, RED)
    mean, normalized = evaluate_policy(env, plan(build_tabular_model(spec), RED), episodes=2)
    assert mean == 1.0
    assert normalized == pytest.approx(1.0)


def test_training_on_true_reward_reaches_oracle(spec, config):
    env = CoinGridEnv(spec, RED)
    policy = train_on_reward(env, true_reward_fn(env, config.psiphi.gamma), config)
    _, normalized = evaluate_policy(env, policy, episodes=2)
    assert normalized == pytest.approx(1.0)


def test_eval_irl_rows(demos, config):
    frame = eval_irl(demos, config, seed=0)
    assert len(frame) == 8
    assert set(frame["method"]) == {"itd", "bc", "true_reward", "random_reward"}
    assert frame["task"].tolist()[:4] == ["collect-red"] * 4
    true_rows = frame[frame["method"] == "true_reward"]
    assert true_rows["normalized_return"].tolist() == pytest.approx([1.0, 1.0])
    assert frame["normalized_return"].between(-1.0, 1.0).all()


def test_eval_irl_arguments(demos, config):
    with pytest.raises(InvalidArgument):
        eval_irl(DemoSet(), config)
    with pytest.raises(InvalidArgument):
        irl_rows(demos, config, 0, ("magic",))


def test_with_cumulant_dim(config):
    changed = with_cumulant_dim(config, 8)
    assert changed.itd.network.cumulant_dim == 8
    assert changed.psiphi.itd.network.cumulant_dim == 8
    assert config.itd.network.cumulant_dim == 2


def test_sweep_matches_single_run(demos, config):
    frame = sweep_cumulant_dim(demos, config, dims=[2], seeds=[0], workers=1)
    assert set(frame["d"]) == {2}
    expected = pd.DataFrame(irl_rows(demos, with_cumulant_dim(config, 2), 0, ("itd",)))
    assert frame["normalized_return"].tolist() == expected["normalized_return"].tolist()


def test_sweep_arguments(demos, config):
    with pytest.raises(InvalidArgument):
        sweep_cumulant_dim(demos, config, dims=[], seeds=[0])
    with pytest.raises(InvalidArgument):
        sweep_cumulant_dim(demos, config, dims=[1], seeds=[])


def test_sweep_pattern():
    frame = pd.DataFrame({
        "d": [1, 1, 4, 4, 8, 8],
        "normalized_return": [0.2, 0.4, 0.8, 0.8, 0.9, 0.7],
    })
    pattern = sweep_pattern(frame, robust=(4, 8))
    assert pattern["median_d1"] == pytest.approx(0.3)
    assert pattern["robust_spread"] == pytest.approx(0.0)
    assert pattern["small_gap"] == pytest.approx(0.5)
    assert "robust_spread" not in sweep_pattern(frame, robust=(16,))


def test_few_shot_summary():
    frame = pd.DataFrame({
        "method": ["psiphi"] * 3,
        "task": ["R+G", "R+G", "-R-G"],
        "shots": [1, 1, 1],
        "normalized_return": [1.0, 0.5, 0.0],
    })
    summary = few_shot_summary(frame)
    assert list(summary.columns) == ["method", "task", "shots", "mean", "sem", "count"]
    row = summary[summary["task"] == "R+G"].iloc[0]
    assert row["mean"] == 0.75
    assert row["count"] == 2


def test_eval_imitation_matches_itd_steps(demos, config):
    frame = eval_imitation(demos, config, seed=0)
    assert list(frame.columns) == ["method", "phase_index", "phase", "itd_steps", "split", "agent", "accuracy"]
    assert set(frame["method"]) == {"psiphi", "itd", "bc"}
    assert set(frame["split"]) == {"train", "test"}
    assert frame["accuracy"].between(0.0, 1.0).all()
    for phase_index in (0, 1):
        steps = frame[frame["phase_index"] == phase_index].groupby("method")["itd_steps"].first()
        assert steps["psiphi"] == steps["itd"]
    assert frame[frame["method"] == "psiphi"]["itd_steps"].max() > 0


def test_eval_imitation_without_rl(demos, config):
    frame = eval_imitation(demos, config, seed=0, with_rl=False)
    assert "psiphi" not in set(frame["method"])
    itd = frame[frame["method"] == "itd"]
    assert itd.groupby("phase_index")["itd_steps"].first().tolist() == [10, 20]


def test_eval_imitation_needs_a_phase(demos, config):
    with pytest.raises(InvalidArgument):
        eval_imitation(demos, config, phases=[])


def test_eval_few_shot_rows(demos, config):
    frame = eval_few_shot(demos, config, seed=0)
    psiphi = frame[frame["method"] == "psiphi"]
    assert len(psiphi) == 4
    assert sorted(set(psiphi["shots"])) == [0, 1]
    oracle = frame[frame["method"] == "oracle"]
    assert oracle["task"].tolist() == ["R+G", "-R-G"]
    assert oracle["normalized_return"].tolist() == pytest.approx([1.0, 1.0])


def test_steps_to_return():
    points = [EvalPoint(0, 2, 0.0, 0.1), EvalPoint(30, 2, 1.0, 0.95), EvalPoint(60, 2, 1.0, 0.5)]
    assert steps_to_return(points) == 30
    assert steps_to_return(points, threshold=0.99) is None
    assert steps_to_return([]) is None


def test_eval_acceleration_pairs_arms(demos, config):
    evaluated = replace(config, psiphi=replace(config.psiphi, eval_every=30))
    frame = eval_acceleration(demos, evaluated, seeds=[0, 1])
    assert list(frame.columns) == ["seed", "arm", "steps_to_threshold", "reached", "final_normalized_return"]
    assert frame["arm"].tolist() == ["psiphi", "ablation"] * 2
    assert frame["steps_to_threshold"].between(0, 60).all()
    assert (frame.loc[~frame["reached"], "steps_to_threshold"] == 60).all()
    with pytest.raises(InvalidArgument):
        eval_acceleration(demos, config, seeds=[0])
    with pytest.raises(InvalidArgument):
        eval_acceleration(demos, evaluated, seeds=[])


def test_acceleration_ratio():
    frame = pd.DataFrame({
        "arm": ["psiphi", "ablation"] * 3,
        "steps_to_threshold": [1000, 4000, 2000, 5000, 3000, 3000],
    })
    assert acceleration_ratio(frame) == pytest.approx(0.5)


BIG = NetworkConfig(hidden_sizes=(64, 64), cumulant_dim=4)


def coingrid_config(**kwargs):
    """Canonical two-color grid with red and green demonstrators."""
    itd = ItdConfig(batch=64, lr=1e-3, max_steps=3000, target_period=200, network=BIG)
    defaults = dict(
        demo=DemoConfig(tasks=("collect-red", "collect-green"), episodes_per_agent=200),
        itd=itd,
        psiphi=PsiPhiConfig(itd=itd, lr=1e-3, batch=32, target_period=200, env_steps=20000, eval_every=0),
        eval=EvalConfig(episodes=20, learner="q_baseline"),
    )
    defaults.update(kwargs)
    return ExperimentConfig(**defaults)


@pytest.mark.slow
def test_itd_reward_beats_behaviour_cloning_on_coingrid():
    config = coingrid_config()
    itd, bc = [], []
    for seed in range(3):
        frame = eval_irl(make_demos(config, seed), config, seed, methods=("itd", "bc"))
        medians = frame.groupby("method")["normalized_return"].median()
        itd.append(medians["itd"])
        bc.append(medians["bc"])
    assert np.median(itd) >= 0.75
    assert np.median(itd) >= np.median(bc)


@pytest.mark.slow
def test_one_shot_transfer_and_zero_shot_ordering():
    config = coingrid_config(
        ego_task="R+G",
        eval=EvalConfig(episodes=20, shots=(0, 1), transfer_tasks=TRANSFER_TASKS),
    )
    frame = pd.concat([eval_few_shot(make_demos(config, seed), config, seed) for seed in range(3)])
    summary = few_shot_summary(frame)
    psiphi = summary[summary["method"] == "psiphi"].set_index(["task", "shots"])["mean"]
    for task in TRANSFER_TASKS:
        assert psiphi[(task, 1)] >= 0.9
    mixed = [psiphi[("R-G", 0)], psiphi[("-R+G", 0)]]
    assert psiphi[("R+G", 0)] > max(mixed)
    assert min(mixed) > psiphi[("-R-G", 0)]


@pytest.mark.slow
def test_demonstrations_halve_steps_to_threshold():
    config = coingrid_config(
        ego_task="collect-red",
        psiphi=PsiPhiConfig(
            itd=ItdConfig(batch=64, lr=1e-3, target_period=200, network=BIG),
            lr=1e-3, target_period=200, env_steps=30000, eval_every=1000, eval_episodes=10,
        ),
    )
    frame = eval_acceleration(make_demos(config, 0), config, seeds=[0, 1, 2, 3, 4])
    assert frame[frame["arm"] == "psiphi"]["reached"].sum() >= 3
    assert acceleration_ratio(frame) <= 0.5


@pytest.mark.slow
def test_ego_learning_improves_held_out_imitation():
    config = coingrid_config(
        demo=DemoConfig(tasks=("collect-red", "collect-green"), episodes_per_agent=100),
        psiphi=PsiPhiConfig(
            itd=ItdConfig(batch=64, lr=1e-3, target_period=200, network=BIG),
            lr=1e-3, target_period=200, env_steps=15000, eval_every=0,
        ),
        eval=EvalConfig(imitation_phases=("collect-red", "collect-green", "R+G")),
    )
    gains = []
    for seed in range(3):
        frame = eval_imitation(make_demos(config, seed), config, seed)
        last = frame[(frame["phase_index"] == 2) & (frame["split"] == "test")]
        accuracy = last.groupby("method")["accuracy"].mean()
        gains.append(accuracy["psiphi"] - accuracy["itd"])
    assert np.median(gains) > 0


@pytest.mark.slow
def test_cumulant_dimension_sensitivity():
    config = coingrid_config(eval=EvalConfig(episodes=20, learner="planner"))
    frame = sweep_cumulant_dim(make_demos(config, 0), config, dims=[1, 4, 8, 16], seeds=[0, 1, 2], workers=1)
    pattern = sweep_pattern(frame)
    assert pattern["median_d4"] - pattern["median_d1"] >= 0.15
    robust = [pattern[f"median_d{d}"] for d in (4, 8, 16)]
    assert max(robust) - min(robust) <= 0.1 * max(robust)


@pytest.mark.slow
def test_trained_cumulants_single_out_coin_colors():
    config = coingrid_config()
    params, _ = run_itd(make_demos(config, 0), config.itd, seed=0)
    spec = canonical_coingrid()
    contrast = cumulant_color_contrast(dump_cumulants(params, spec), spec)
    strong = {color: set(rows["dim"][rows["ratio"] >= 3.0]) for color, rows in contrast.groupby("color")}
    red, green = strong.get("red", set()), strong.get("green", set())
    assert any(i != j for i in red for j in green)
