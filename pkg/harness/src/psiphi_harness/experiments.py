"""Desk-scale CoinGrid experiments: IRL quality, imitation accuracy, few-shot
transfer, acceleration by demonstrations, cumulant maps and the
cumulant-dimension sweep."""
import logging
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from psiphi_core.demos import DemoSet
from psiphi_core.factory import ComponentFactory
from psiphi_core.gridworld import (
    COLORS,
    DELTAS,
    FORWARD,
    N_ACTIONS,
    CoinGridEnv,
    EnvState,
    GridSpec,
    TaskVector,
    encode,
    normalized_return,
    run_episodes,
)
from psiphi_core.interfaces import InvalidArgument, PolicyInterface
from psiphi_core.network import ParamStore, agent_heads, forward, init_params
from psiphi_core.oracle import (
    PlannerPolicy,
    TabularModel,
    build_tabular_model,
    generate_demonstrations,
    plan,
    reference_returns,
    value_iteration,
)
from psiphi_core.parameters import ExperimentConfig
from psiphi_core.seeding import SeedStream
from psiphi_learning.agent import REFERENCE_EPISODES, EvalPoint, PsiPhiAgent, train_psiphi
from psiphi_learning.baselines import RecoveredRewardEnv, RewardFn, bc_baseline, q_baseline, recovered_reward_fn
from psiphi_learning.itd import ItdTrainer, action_accuracy, run_itd

logger = logging.getLogger(__name__)

TRANSFER_TASKS = ("R+G", "R-G", "-R+G", "-R-G")


@dataclass(frozen=True)
class TransferTask:
    """A few-shot transfer target.

    Attributes:
        name: One of R+G, R-G, -R+G, -R-G; a minus sign means the color is avoided
        shots: Episodes of experience allowed before evaluation
    """
    name: str
    shots: int = 0

    def __post_init__(self):
        if self.name not in TRANSFER_TASKS:
            raise InvalidArgument(f"unknown transfer task: {self.name}")
        if self.shots < 0:
            raise InvalidArgument("shots cannot be negative")

    @property
    def w_true(self) -> TaskVector:
        return TaskVector.named(self.name)


def make_demos(config: ExperimentConfig, seed: int = 0) -> DemoSet:
    """One Boltzmann demonstrator per config.demo.tasks entry on the configured grid."""
    model = ComponentFactory.create_model(config)
    tasks = [TaskVector.named(t) for t in config.demo.tasks]
    return generate_demonstrations(model, tasks, config.demo.temperature, config.demo.episodes_per_agent, seed)


def evaluate_policy(env: CoinGridEnv, policy: PolicyInterface, episodes: int, seed: int = 0) -> Tuple[float, float]:
    """Mean return of policy on env's task and its normalized value."""
    returns = run_episodes(env, policy, episodes, SeedStream(seed).next())
    mean = float(returns.mean())
    random_return, oracle_return = reference_returns(env, REFERENCE_EPISODES, seed)
    return mean, normalized_return(mean, random_return, oracle_return)


def true_reward_fn(env: CoinGridEnv, gamma: float = 0.9) -> RewardFn:
    """Ground-truth r(s, a) of env's current task, looked up through the tabular model."""
    model = build_tabular_model(env.spec, gamma)
    reward = model.reward(env.task)
    A = model.n_actions

    def fn(obs: np.ndarray, action: int) -> float:
        return float(reward[model.index_of(obs) * A + int(action)])
    return fn


def random_reward_fn(env: CoinGridEnv, seed: int = 0, gamma: float = 0.9) -> RewardFn:
    """Standard-normal r(s, a) per tabular row, the random-reward control."""
    model = build_tabular_model(env.spec, gamma)
    reward = SeedStream(seed).spawn(5).next().normal(size=model.n_states * model.n_actions)
    A = model.n_actions

    def fn(obs: np.ndarray, action: int) -> float:
        return float(reward[model.index_of(obs) * A + int(action)])
    return fn


def reward_table(model: TabularModel, reward_fn: RewardFn) -> np.ndarray:
    """reward_fn over every live (s, a) row; the absorbing state pays nothing."""
    A = model.n_actions
    table = np.zeros(model.n_states * A)
    for s in range(model.n_states):
        if s == model.absorbing:
            continue
        obs = model.observation(s).vector()
        for a in range(A):
            table[s * A + a] = reward_fn(obs, a)
    return table


def train_on_reward(env: CoinGridEnv, reward_fn: RewardFn, config: ExperimentConfig, seed: int = 0) -> PolicyInterface:
    """Learner trained on reward_fn with env's dynamics and termination.

    config.eval.learner picks plain Q-learning on the wrapped environment or
    exact planning on the reward table.
    """
    if config.eval.learner == "planner":
        model = build_tabular_model(env.spec, config.psiphi.gamma).for_task(env.task)
        _, greedy = value_iteration(model, reward_table(model, reward_fn))
        return PlannerPolicy(model, greedy)
    return q_baseline(RecoveredRewardEnv(env, reward_fn), config.psiphi, seed)


def irl_rows(demos: DemoSet, config: ExperimentConfig, seed: int, methods: Sequence[str]) -> List[Dict]:
    """Normalized return per demonstrator of each reward-recovery method.

    Methods: "itd" trains the learner on the ITD-recovered reward of agent k,
    "bc" evaluates behaviour cloning on agent k's demos, "true_reward"
    trains the same learner on the ground-truth reward and "random_reward"
    on a random one.
    """
    spec = ComponentFactory.create_spec(config)
    params: Optional[ParamStore] = None
    if "itd" in methods:
        params, _ = run_itd(demos, config.itd, seed)
    rows = []
    for k, task_name in enumerate(config.demo.tasks[:demos.n_agents], start=1):
        env = CoinGridEnv(spec, TaskVector.named(task_name))
        for method in methods:
            if method == "itd":
                policy = train_on_reward(env, recovered_reward_fn(params, k), config, seed)
            elif method == "bc":
                policy = bc_baseline(demos, config.itd, seed, pooled=True, agent_ids=[k])
            elif method == "true_reward":
                policy = train_on_reward(env, true_reward_fn(env, config.psiphi.gamma), config, seed)
            elif method == "random_reward":
                policy = train_on_reward(env, random_reward_fn(env, seed, config.psiphi.gamma), config, seed)
            else:
                raise InvalidArgument(f"unknown method: {method}")
            mean, normalized = evaluate_policy(env, policy, config.eval.episodes, seed)
            rows.append({
                "seed": seed,
                "agent": k,
                "task": task_name,
                "method": method,
                "mean_return": mean,
                "normalized_return": normalized,
            })
            logger.info(f"IRL seed {seed} agent {k} ({task_name}) {method}: normalized {normalized:.3f}")
    return rows


def eval_irl(
    demos: DemoSet,
    config: ExperimentConfig,
    seed: int = 0,
    methods: Sequence[str] = ("itd", "bc", "true_reward", "random_reward")
) -> pd.DataFrame:
    """IRL quality: ITD → recovered reward → learner, against BC, the true reward and a random reward.

    Raises:
        InvalidArgument: If demos has no demonstrator
    """
    if demos.n_agents < 1:
        raise InvalidArgument("IRL evaluation needs at least one demonstrator")
    return pd.DataFrame(irl_rows(demos, config, seed, methods))


def _accuracy_rows(method: str, phase_index: int, phase: str, itd_steps: int, params: ParamStore,
                   splits: Dict[str, DemoSet]) -> List[Dict]:
    rows = []
    for split, demos in splits.items():
        if demos.n_steps == 0:
            continue
        for k, acc in action_accuracy(params, demos).items():
            rows.append({
                "method": method,
                "phase_index": phase_index,
                "phase": phase,
                "itd_steps": itd_steps,
                "split": split,
                "agent": k,
                "accuracy": acc,
            })
    return rows


def eval_imitation(
    demos: DemoSet,
    config: ExperimentConfig,
    seed: int = 0,
    with_rl: bool = True,
    phases: Optional[Sequence[str]] = None
) -> pd.DataFrame:
    """Train/test action-prediction accuracy over an ego task schedule.

    Demos are split 80/20 per agent. With with_rl the ΨΦ agent trains on
    each phase's ego task in turn, and an ITD-only learner is scored after
    the same number of ITD steps for comparison; without it only the ITD
    learner runs, config.itd.max_steps spread over the phases. A
    behaviour-cloning row per split gives the memorization reference.

    Returns:
        Rows of method, phase_index, phase, itd_steps, split, agent, accuracy
    """
    phases = list(phases or config.eval.imitation_phases)
    if not phases:
        raise InvalidArgument("at least one phase is required")
    train, test = demos.split(0.8, seed)
    splits = {"train": train, "test": test}
    spec = ComponentFactory.create_spec(config)
    rows: List[Dict] = []

    itd_budget = [config.itd.max_steps * (i + 1) // len(phases) for i in range(len(phases))]
    if with_rl:
        env = CoinGridEnv(spec, TaskVector.named(phases[0]))
        agent = PsiPhiAgent(env, train, config.psiphi, seed)
        per_phase = config.psiphi.env_steps // len(phases)
        for i, phase in enumerate(phases):
            agent.set_task(TaskVector.named(phase))
            agent.train(env_steps=per_phase)
            itd_budget[i] = agent.itd_steps
            rows += _accuracy_rows("psiphi", i, phase, agent.itd_steps, agent.params, splits)
            logger.info(f"Imitation phase {i} ({phase}) done after {agent.env_steps} env steps")

    width = train.arrays().obs.shape[1]
    itd_config = config.psiphi.itd if with_rl else config.itd
    params = init_params(width, N_ACTIONS, agent_heads(train.n_agents, ego=False), itd_config.network, seed)
    trainer = ItdTrainer(train, itd_config, params, seed=seed)
    for i, phase in enumerate(phases):
        trainer.run(itd_budget[i] - trainer.steps)
        rows += _accuracy_rows("itd", i, phase, trainer.steps, trainer.params, splits)

    bc = bc_baseline(train, config.itd, seed, pooled=False)
    rows += _accuracy_rows("bc", len(phases) - 1, phases[-1], config.itd.max_steps, bc.params, splits)
    return pd.DataFrame(rows)


def eval_few_shot(
    demos: DemoSet,
    config: ExperimentConfig,
    seed: int = 0,
    tasks: Optional[Sequence[str]] = None,
    shots: Optional[Sequence[int]] = None,
    pretrain_task: str = "R+G"
) -> pd.DataFrame:
    """Few-shot transfer of a pretrained ΨΦ agent to new preference vectors.

    The agent first trains on pretrain_task with the demonstrations. For
    each transfer task and shot count it is restored from that checkpoint,
    given the new task, allowed `shots` episodes of experience, refits
    w^ego by task inference and is evaluated greedily. An oracle planner row
    per task gives the upper reference.

    Returns:
        Rows of seed, task, shots, method, mean_return, normalized_return
    """
    transfer = [TransferTask(t, n) for t in (tasks or config.eval.transfer_tasks) for n in (shots or config.eval.shots)]
    spec = ComponentFactory.create_spec(config)
    agent = PsiPhiAgent(CoinGridEnv(spec, TaskVector.named(pretrain_task)), demos, config.psiphi, seed)
    logger.info(f"Pretraining on {pretrain_task} for {config.psiphi.env_steps} env steps")
    agent.train()

    rows = []
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "pretrained.ckpt"
        agent.save(ckpt)
        for item in transfer:
            env = CoinGridEnv(spec, item.w_true)
            learner = PsiPhiAgent(env, demos, config.psiphi, seed)
            learner.restore(ckpt)
            learner.set_task(item.w_true)
            for _ in range(item.shots):
                learner.run_episode(explore=True)
            learner.infer_task()
            point = learner.evaluate(config.eval.episodes)
            rows.append({
                "seed": seed,
                "task": item.name,
                "shots": item.shots,
                "method": "psiphi",
                "mean_return": point.mean_return,
                "normalized_return": point.normalized_return,
            })
            logger.info(f"Transfer {item.name} {item.shots}-shot: normalized {point.normalized_return:.3f}")

    model = build_tabular_model(spec, config.psiphi.gamma)
    for name in dict.fromkeys(t.name for t in transfer):
        env = CoinGridEnv(spec, TaskVector.named(name))
        mean, normalized = evaluate_policy(env, plan(model, env.task), config.eval.episodes, seed)
        rows.append({
            "seed": seed, "task": name, "shots": 0, "method": "oracle",
            "mean_return": mean, "normalized_return": normalized,
        })
    return pd.DataFrame(rows)


def few_shot_summary(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard error of normalized return per (method, task, shots)."""
    grouped = frame.groupby(["method", "task", "shots"], sort=True)["normalized_return"]
    return grouped.agg(["mean", "sem", "count"]).reset_index()


def steps_to_return(points: Sequence[EvalPoint], threshold: float = 0.9) -> Optional[int]:
    """Env steps at the first evaluation reaching threshold normalized return, None if none does."""
    for point in points:
        if point.normalized_return >= threshold:
            return point.env_steps
    return None


def eval_acceleration(
    demos: DemoSet,
    config: ExperimentConfig,
    seeds: Sequence[int],
    threshold: float = 0.9
) -> pd.DataFrame:
    """Paired runs on the ego task: ΨΦ with the demonstrations against the
    K=0 ablation without GPI.

    An arm that never reaches threshold is charged its whole env_steps
    budget, with reached False.

    Returns:
        Rows of seed, arm, steps_to_threshold, reached, final_normalized_return

    Raises:
        InvalidArgument: If seeds is empty or evaluation is disabled
    """
    if not seeds:
        raise InvalidArgument("seeds must not be empty")
    if config.psiphi.eval_every == 0:
        raise InvalidArgument("acceleration needs periodic evaluation (psiphi.eval_every > 0)")
    spec = ComponentFactory.create_spec(config)
    arms = {
        "psiphi": (demos, config.psiphi),
        "ablation": (DemoSet(), replace(config.psiphi, gpi_enabled=False)),
    }
    rows = []
    for seed in seeds:
        for arm, (arm_demos, psiphi) in arms.items():
            env = CoinGridEnv(spec, TaskVector.named(config.ego_task))
            _, points = train_psiphi(env, arm_demos, psiphi, seed)
            steps = steps_to_return(points, threshold)
            rows.append({
                "seed": seed,
                "arm": arm,
                "steps_to_threshold": psiphi.env_steps if steps is None else steps,
                "reached": steps is not None,
                "final_normalized_return": points[-1].normalized_return if points else float("nan"),
            })
            logger.info(f"Acceleration seed {seed} {arm}: threshold {threshold} at {rows[-1]['steps_to_threshold']} steps")
    return pd.DataFrame(rows)


def acceleration_ratio(frame: pd.DataFrame) -> float:
    """Median steps-to-threshold with demonstrations over the ablation's median."""
    medians = frame.groupby("arm")["steps_to_threshold"].median()
    return float(medians["psiphi"] / medians["ablation"])


def _probe_state(spec: GridSpec, cell: Tuple[int, int]) -> Optional[EnvState]:
    """A state whose FORWARD action steps onto cell, with every coin still present."""
    for orientation, (dr, dc) in enumerate(DELTAS):
        origin = (cell[0] - dr, cell[1] - dc)
        if spec.is_free(origin):
            coins = frozenset(c for c in spec.coins if c[0] != origin)
            return EnvState(origin, orientation, coins, 0)
    return None


def dump_cumulants(params: ParamStore, spec: GridSpec) -> Dict[int, pd.DataFrame]:
    """Φ_i(s, FORWARD) for the state that steps onto each cell, one grid per dimension.

    Walls and cells that cannot be entered are NaN. Frames have one row per
    grid row and columns c0..c{width-1}.
    """
    grids = np.full((params.d, spec.height, spec.width), np.nan)
    for r in range(spec.height):
        for c in range(spec.width):
            if not spec.is_free((r, c)):
                continue
            state = _probe_state(spec, (r, c))
            if state is None:
                continue
            phi = forward(params, encode(state, spec).vector(), heads=[], with_phi=True).phi[0, FORWARD]
            grids[:, r, c] = phi
    columns = [f"c{c}" for c in range(spec.width)]
    return {i: pd.DataFrame(grids[i], columns=columns) for i in range(params.d)}


def cumulant_color_contrast(grids: Dict[int, pd.DataFrame], spec: GridSpec) -> pd.DataFrame:
    """mean|Φ_i| on cells holding a coin of each color over mean|Φ_i| elsewhere."""
    rows = []
    for i, grid in grids.items():
        values = np.abs(grid.to_numpy())
        for color in COLORS:
            cells = [cell for cell, col in spec.coins if col == color]
            if not cells:
                continue
            mask = np.zeros(values.shape, dtype=bool)
            for r, c in cells:
                mask[r, c] = True
            on = np.nanmean(values[mask])
            off = np.nanmean(values[~mask])
            rows.append({
                "dim": i,
                "color": color,
                "on_coin": on,
                "elsewhere": off,
                "ratio": on / off if off > 0 else float("inf") if on > 0 else float("nan"),
            })
    return pd.DataFrame(rows, columns=["dim", "color", "on_coin", "elsewhere", "ratio"])


def with_cumulant_dim(config: ExperimentConfig, d: int) -> ExperimentConfig:
    network = replace(config.itd.network, cumulant_dim=d)
    psiphi_network = replace(config.psiphi.itd.network, cumulant_dim=d)
    return replace(
        config,
        itd=replace(config.itd, network=network),
        psiphi=replace(config.psiphi, itd=replace(config.psiphi.itd, network=psiphi_network)),
    )


def _sweep_job(args: Tuple[int, int, DemoSet, ExperimentConfig]) -> pd.DataFrame:
    d, seed, demos, config = args
    frame = pd.DataFrame(irl_rows(demos, with_cumulant_dim(config, d), seed, ("itd",)))
    frame.insert(0, "d", d)
    return frame


def sweep_cumulant_dim(
    demos: DemoSet,
    config: ExperimentConfig,
    dims: Sequence[int],
    seeds: Sequence[int],
    workers: Optional[int] = None
) -> pd.DataFrame:
    """ITD reward quality as a function of the cumulant dimension.

    Each (d, seed) pair is an independent job; with workers > 1 the jobs
    fan out over processes and their frames are concatenated in job order.

    Returns:
        One row per (d, seed, agent) with the ITD learner's normalized return

    Raises:
        InvalidArgument: If dims or seeds is empty
    """
    if not dims:
        raise InvalidArgument("dims must not be empty")
    if not seeds:
        raise InvalidArgument("seeds must not be empty")
    workers = config.eval.workers if workers is None else workers
    jobs = [(int(d), int(seed), demos, config) for d in dims for seed in seeds]
    logger.info(f"Sweeping {len(jobs)} (d, seed) job(s) on {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            frames = list(executor.map(_sweep_job, jobs))
    else:
        frames = [_sweep_job(job) for job in jobs]
    return pd.concat(frames, ignore_index=True)


def sweep_pattern(frame: pd.DataFrame, small: int = 1, robust: Sequence[int] = (4, 8, 16)) -> Dict[str, float]:
    """Median normalized return per d, the gap of `small` below the robust set and the robust spread."""
    medians = frame.groupby("d")["normalized_return"].median()
    present = [d for d in robust if d in medians.index]
    result = {f"median_d{d}": float(v) for d, v in medians.items()}
    if present:
        robust_values = medians.loc[present]
        result["robust_spread"] = float(robust_values.max() - robust_values.min())
        if small in medians.index:
            result["small_gap"] = float(robust_values.min() - medians.loc[small])
    return result
