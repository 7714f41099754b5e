"""The ΨΦ learner: GPI acting over demonstrator and ego heads, ITD on the
demonstrations, and ego reward/TD learning from its own replay buffer."""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import linalg

from psiphi_core.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from psiphi_core.demos import DemoSet, EgoTransition, ReplayBuffer, Trajectory
from psiphi_core.gridworld import CoinGridEnv, TaskVector, normalized_return
from psiphi_core.interfaces import EnvironmentInterface, InvalidArgument, PolicyInterface
from psiphi_core.losses import add_grads, q_td_loss, reward_loss, sf_td_loss
from psiphi_core.network import EGO, ParamStore, TargetStore, agent_heads, forward, init_params, pessimistic_q
from psiphi_core.optim import Adam
from psiphi_core.oracle import reference_returns
from psiphi_core.parameters import OptimizerConfig, PsiPhiConfig
from psiphi_core.seeding import SeedStream

from .itd import ItdTrainer

logger = logging.getLogger(__name__)

RIDGE = 1e-6
REFERENCE_EPISODES = 100

ReferenceFn = Callable[[EnvironmentInterface], Tuple[float, float]]
DemoHook = Callable[["PsiPhiAgent"], Optional[Sequence[Trajectory]]]


@dataclass
class EvalPoint:
    """One greedy evaluation during training.

    Attributes:
        env_steps: Interaction steps taken before the evaluation
        episodes: Evaluation episodes averaged
        mean_return: Mean undiscounted return
        normalized_return: Return normalized against random and oracle
            policies (NaN when no reference is available)
        seed: Training seed
        head_usage: Share of greedy actions contributed by each head
    """
    env_steps: int
    episodes: int
    mean_return: float
    normalized_return: float
    seed: int = 0
    head_usage: Dict[str, float] = field(default_factory=dict)


def eval_points_frame(points: Sequence[EvalPoint]) -> pd.DataFrame:
    rows = []
    for p in points:
        row = {
            "env_steps": p.env_steps,
            "episodes": p.episodes,
            "mean_return": p.mean_return,
            "normalized_return": p.normalized_return,
            "seed": p.seed,
        }
        row.update({f"usage_{h}": u for h, u in sorted(p.head_usage.items())})
        rows.append(row)
    return pd.DataFrame(rows, columns=None if rows else ["env_steps", "episodes", "mean_return", "normalized_return", "seed"])


def gpi_values(params: ParamStore, obs, w: np.ndarray, heads: Optional[Sequence[str]] = None) -> np.ndarray:
    """Pessimistic Ψᵀw of each head, shape (heads, B, |A|)."""
    heads = list(params.head_ids if heads is None else heads)
    fwd = forward(params, obs, heads=heads, with_phi=False)
    return np.stack([pessimistic_q(fwd.psi[h], w) for h in heads])


def gpi_choice(params: ParamStore, obs, w: np.ndarray, heads: Optional[Sequence[str]] = None) -> Tuple[int, int]:
    """Greedy GPI action for one observation and the index of the head supplying it."""
    q = gpi_values(params, obs, w, heads)[:, 0, :]
    action = int(q.max(axis=0).argmax())
    return action, int(q[:, action].argmax())


def gpi_act(
    params: ParamStore,
    obs,
    w: np.ndarray,
    epsilon: float,
    stream: Union[SeedStream, np.random.Generator],
    heads: Optional[Sequence[str]] = None
) -> int:
    """ε-greedy over argmax_a max_heads min_members Ψ(s, a)ᵀw.

    Ties go to the lowest action index, then the lowest head index.
    """
    if not 0 <= epsilon <= 1:
        raise InvalidArgument("epsilon must lie in [0, 1]")
    rng = stream.next() if isinstance(stream, SeedStream) else stream
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(params.n_actions))
    return gpi_choice(params, obs, w, heads)[0]


def infer_task(params: ParamStore, buffer: ReplayBuffer, window: Optional[int] = None, ridge: float = RIDGE) -> np.ndarray:
    """Least-squares w^ego from the most recent ego rewards and the current Φ.

    Solves (ΦᵀΦ + ridge·I) w = Φᵀr over the last `window` transitions. With
    fewer than d transitions the current w^ego is returned unchanged.
    """
    d = params.d
    batch = buffer.recent(len(buffer) if window is None else window)
    if len(batch) < d:
        logger.debug(f"Task inference skipped: {len(batch)} transitions < d={d}")
        return params.w(EGO).copy()
    phi = forward(params, batch.obs, heads=[], with_phi=True).phi[np.arange(len(batch)), batch.actions]
    gram = phi.T @ phi + ridge * np.eye(d)
    return linalg.solve(gram, phi.T @ batch.rewards_1, assume_a="pos")


class GpiPolicy(PolicyInterface):
    """Greedy (or ε-greedy) GPI policy over a fixed parameter snapshot."""

    def __init__(self, params: ParamStore, w: np.ndarray, heads: Optional[Sequence[str]] = None, epsilon: float = 0.0):
        self.params = params
        self.w = np.asarray(w, dtype=np.float64)
        self.heads = list(params.head_ids if heads is None else heads)
        self.epsilon = epsilon

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> int:
        if self.epsilon > 0:
            return gpi_act(self.params, obs, self.w, self.epsilon, rng, self.heads)
        return gpi_choice(self.params, obs, self.w, self.heads)[0]


def coingrid_reference(episodes: int = REFERENCE_EPISODES, seed: int = 0) -> ReferenceFn:
    def reference(env: EnvironmentInterface) -> Tuple[float, float]:
        return reference_returns(env, episodes, seed)
    return reference


class PsiPhiAgent:
    """Learner state and the interaction/learning schedule.

    Args:
        env: Ego environment
        demos: Reward-free demonstrations (may be empty)
        config: ΨΦ settings
        seed: Root seed for initialization, acting, sampling and evaluation
        reference_fn: Maps the env to (random, oracle) returns for
            normalization; CoinGrid environments get an exact reference
        online_demos: Optional hook called after each episode whose
            trajectories are appended to demos
    """

    def __init__(
        self,
        env: EnvironmentInterface,
        demos: Optional[DemoSet] = None,
        config: Optional[PsiPhiConfig] = None,
        seed: int = 0,
        reference_fn: Optional[ReferenceFn] = None,
        online_demos: Optional[DemoHook] = None
    ):
        self.env = env
        self.config = config or PsiPhiConfig()
        self.demos = demos if demos is not None else DemoSet()
        self.seed = seed
        self.online_demos = online_demos
        if reference_fn is None and isinstance(env, CoinGridEnv):
            reference_fn = coingrid_reference(seed=seed)
        self.reference_fn = reference_fn
        self._reference: Optional[Tuple[float, float]] = None

        network = self.config.itd.network
        if self.config.plain_q:
            network = replace(network, cumulant_dim=1)
        n_agents = self.demos.n_agents
        self.heads = agent_heads(n_agents, ego=True)
        self.params = init_params(env.observation_size, env.n_actions, self.heads, network, seed)
        if self.config.plain_q:
            self.params = self.params.with_arrays({f"w.{EGO}": np.ones(1)})

        root = SeedStream(seed)
        self.streams = {
            "act": root.spawn(1),
            "learn": root.spawn(2),
            "itd": root.spawn(3),
            "eval": root.spawn(4),
        }
        self.optimizer = Adam(OptimizerConfig(lr=self.config.lr))
        self.targets = TargetStore.of(self.params, self.config.target_period)
        self.buffer = ReplayBuffer(self.config.buffer_capacity, env.observation_size, rng_seed=seed)
        self._itd: Optional[ItdTrainer] = None
        if n_agents > 0 and self.demos.n_steps > 0 and not self.config.plain_q:
            self._itd = ItdTrainer(
                self.demos, self.config.itd, self.params,
                seed=self.streams["itd"].base,
                optimizer=self.optimizer,
                targets=self.targets,
                refresh_targets=False,
            )
        self.env_steps = 0
        self.episodes = 0
        self.learner_steps = 0
        self.evaluations: List[EvalPoint] = []

    @property
    def acting_heads(self) -> Sequence[str]:
        return self.heads if self.config.gpi_enabled else (EGO,)

    @property
    def w_ego(self) -> np.ndarray:
        return self.params.w(EGO)

    @property
    def itd_steps(self) -> int:
        return self._itd.steps if self._itd else 0

    def policy(self, epsilon: float = 0.0) -> GpiPolicy:
        return GpiPolicy(self.params, self.w_ego, self.acting_heads, epsilon)

    def set_task(self, task: TaskVector) -> None:
        """Switch the ego task (phase change or transfer task)."""
        if not hasattr(self.env, "task"):
            raise InvalidArgument("environment has no task to switch")
        self.env.task = task
        self._reference = None
        logger.info(f"Ego task set to {task.weights.tolist()}")

    def reference(self) -> Optional[Tuple[float, float]]:
        if self._reference is None and self.reference_fn is not None:
            self._reference = self.reference_fn(self.env)
        return self._reference

    def infer_task(self) -> np.ndarray:
        """Refit w^ego by least squares on the recent ego transitions."""
        if self.config.plain_q:
            return self.w_ego
        w = infer_task(self.params, self.buffer, self.config.task_inference_window)
        self.params = self.params.with_arrays({f"w.{EGO}": w})
        return w

    def run_episode(self, max_steps: Optional[int] = None, explore: bool = True) -> float:
        """One ego episode under ε-GPI, pushing every transition to the buffer."""
        if self.config.task_inference_enabled:
            self.infer_task()
        obs = self.env.reset()
        done = False
        total = 0.0
        steps = 0
        rng = self.streams["act"].next()
        while not done and (max_steps is None or steps < max_steps):
            epsilon = self.config.epsilon.value(self.env_steps, self.config.env_steps) if explore else 0.0
            action = gpi_act(self.params, obs, self.w_ego, epsilon, rng, self.acting_heads)
            next_obs, reward, done, _ = self.env.step(action)
            self.buffer.push(EgoTransition(obs, action, next_obs, reward, done))
            obs = next_obs
            total += reward
            steps += 1
            self.env_steps += 1
        self.episodes += 1
        if self.online_demos is not None:
            for traj in self.online_demos(self) or ():
                self.demos.append(traj)
        return total

    def learn(self, iterations: Optional[int] = None) -> Dict[str, float]:
        """Learning phases: ITD on demos, then L_R, then L_Q + scale·L_TD-Ψ."""
        metrics: Dict[str, float] = {}
        iterations = self.config.learning_steps_per_episode if iterations is None else iterations
        for _ in range(iterations):
            if self._itd is not None:
                self._itd.params = self.params
                for _ in range(self.config.itd_steps_per_iteration):
                    metrics.update(self._itd.step())
                self.params = self._itd.params
            if len(self.buffer) == 0:
                continue
            batch = self.buffer.sample_batch(
                self.config.batch, self.streams["learn"], self.config.gamma, self.config.n_step
            )
            if self.config.reward_loss_enabled and not self.config.plain_q:
                r = reward_loss(self.params, batch)
                self.params = self.optimizer.step(self.params, r.grads)
                metrics.update(r.metrics)
            q = q_td_loss(self.params, self.targets.params, batch)
            grads = q.grads
            metrics.update(q.metrics)
            if not self.config.plain_q:
                psi = sf_td_loss(self.params, self.targets.params, batch, self.config.sf_scale)
                grads = add_grads(grads, psi.grads)
                metrics.update(psi.metrics)
            self.params = self.optimizer.step(self.params, grads)
            self.learner_steps += 1
            self.targets.maybe_refresh(self.params, self.learner_steps)
        return metrics

    def evaluate(self, episodes: Optional[int] = None) -> EvalPoint:
        """Greedy GPI episodes without learning or buffer writes."""
        episodes = self.config.eval_episodes if episodes is None else episodes
        reference = self.reference()
        policy = self.policy()
        returns = np.zeros(episodes)
        usage = np.zeros(len(policy.heads))
        for i in range(episodes):
            obs = self.env.reset()
            done = False
            while not done:
                action, head = gpi_choice(self.params, obs, policy.w, policy.heads)
                usage[head] += 1
                obs, reward, done, _ = self.env.step(action)
                returns[i] += reward
        mean = float(returns.mean())
        normalized = normalized_return(mean, *reference) if reference is not None else float("nan")
        total = usage.sum()
        point = EvalPoint(
            env_steps=self.env_steps,
            episodes=episodes,
            mean_return=mean,
            normalized_return=normalized,
            seed=self.seed,
            head_usage={h: float(u / total) if total else 0.0 for h, u in zip(policy.heads, usage)},
        )
        logger.info(
            f"Eval at {self.env_steps} env steps: return={mean:.3f} normalized={normalized:.3f}"
        )
        return point

    def train(self, env_steps: Optional[int] = None) -> List[EvalPoint]:
        """Alternate episodes and learning phases until the step budget is spent."""
        budget = self.config.env_steps if env_steps is None else env_steps
        stop = self.env_steps + budget
        every = self.config.eval_every
        next_eval = self.env_steps
        while self.env_steps < stop:
            if every and self.env_steps >= next_eval:
                self.evaluations.append(self.evaluate())
                next_eval = self.env_steps + every
            self.run_episode(max_steps=stop - self.env_steps)
            self.learn()
        if every:
            self.evaluations.append(self.evaluate())
        return self.evaluations

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            params=self.params,
            targets=self.targets.params,
            optimizer=self.optimizer.state,
            streams=dict(self.streams),
            metadata={
                "env_steps": self.env_steps,
                "episodes": self.episodes,
                "learner_steps": self.learner_steps,
                "target_refresh": self.targets.last_refresh,
                "itd_steps": self._itd.steps if self._itd else 0,
                "itd_stream": list(self._itd.stream.state()) if self._itd else None,
                "seed": self.seed,
            },
        )

    def save(self, path: Union[str, Path]) -> int:
        return save_checkpoint(self.checkpoint(), path)

    def restore(self, path: Union[str, Path]) -> None:
        """Load parameters, optimizer, streams and counters from a checkpoint.

        The replay buffer is not part of a checkpoint and starts empty.
        """
        ckpt = load_checkpoint(path)
        if ckpt.params.head_ids != self.params.head_ids:
            raise InvalidArgument(f"checkpoint heads {ckpt.params.head_ids} != {self.params.head_ids}")
        self.params = ckpt.params
        self.targets = TargetStore(ckpt.targets, self.config.target_period, ckpt.metadata["target_refresh"])
        self.optimizer.state = ckpt.optimizer
        self.streams.update(ckpt.streams)
        self.env_steps = ckpt.metadata["env_steps"]
        self.episodes = ckpt.metadata["episodes"]
        self.learner_steps = ckpt.metadata["learner_steps"]
        if self._itd is not None:
            self._itd.targets = self.targets
            self._itd.steps = ckpt.metadata["itd_steps"]
            self._itd.stream = SeedStream(*ckpt.metadata["itd_stream"])


def train_psiphi(
    env: EnvironmentInterface,
    demos: Optional[DemoSet] = None,
    config: Optional[PsiPhiConfig] = None,
    seed: int = 0,
    reference_fn: Optional[ReferenceFn] = None
) -> Tuple[ParamStore, List[EvalPoint]]:
    """Train a ΨΦ agent from scratch.

    Returns:
        Tuple of (final parameters, evaluation points)
    """
    agent = PsiPhiAgent(env, demos, config, seed, reference_fn)
    logger.info(
        f"Training ΨΦ for {agent.config.env_steps} env steps with {agent.demos.n_agents} demonstrators"
    )
    points = agent.train()
    return agent.params, points
