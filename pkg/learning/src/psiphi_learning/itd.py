"""Inverse temporal difference learning on reward-free demonstrations.

Each outer step runs `alternate_ratio` BC-Q updates of the per-agent SF
heads and preferences, then one ITD update of the shared cumulants and the
SF heads against a periodically refreshed target copy.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

from psiphi_core.demos import DemoBatch, DemoSet, sample_demo_batch, sample_demo_steps
from psiphi_core.gridworld import N_ACTIONS, Observation
from psiphi_core.interfaces import EmptyDataset
from psiphi_core.losses import bcq_loss, itd_loss
from psiphi_core.network import ParamStore, TargetStore, agent_heads, forward, greedy_actions, init_params, q_values
from psiphi_core.optim import Adam
from psiphi_core.parameters import ItdConfig, OptimizerConfig
from psiphi_core.seeding import SeedStream

logger = logging.getLogger(__name__)


@dataclass
class ItdLog:
    """Per-step training record: losses, L1 penalty and per-agent accuracy."""
    rows: List[Dict[str, float]] = field(default_factory=list)

    def record(self, step: int, metrics: Dict[str, float]) -> None:
        self.rows.append({"step": step, **metrics})

    def __len__(self) -> int:
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.rows)
        if frame.empty:
            return pd.DataFrame(columns=["step", "loss_bcq", "loss_itd", "l1_w"])
        leading = ["step", "loss_bcq", "loss_itd", "l1_w"]
        accuracy = sorted(c for c in frame.columns if c.startswith("accuracy_"))
        return frame[leading + accuracy]

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)


def head_policy(params: ParamStore, k: Union[int, str], obs) -> np.ndarray:
    """Boltzmann policy of head k: softmax over the member-averaged Ψᵀwᵏ, shape (B, |A|)."""
    head = params.check_head(k)
    fwd = forward(params, obs, heads=[head], with_phi=False)
    return softmax(q_values(fwd.psi[head], params.w(head)).mean(axis=0), axis=1)


def recovered_rewards(params: ParamStore, k: Union[int, str], obs) -> np.ndarray:
    """Φ(s, ·)ᵀwᵏ for a batch of observations, shape (B, |A|)."""
    w = params.w(k)
    return forward(params, obs, heads=[], with_phi=True).phi @ w


def recover_reward(params: ParamStore, k: Union[int, str], state: Union[np.ndarray, Observation], action: int) -> float:
    """R^k(s, a) ≈ Φ(s, a)ᵀwᵏ.

    Raises:
        UnknownAgentId: If k has no head
    """
    return float(recovered_rewards(params, k, state)[0, int(action)])


def action_accuracy(params: ParamStore, demos: DemoSet, heads: Optional[Dict[int, str]] = None) -> Dict[int, float]:
    """Fraction of demo steps where head k's greedy action matches agent k's action.

    Args:
        params: Trained parameters
        demos: Demonstrations to score
        heads: Optional agent id → head id mapping (default: same id)
    """
    arr = demos.arrays()
    result = {}
    for k in np.unique(arr.agent_ids):
        rows = arr.agent_ids == k
        head = (heads or {}).get(int(k), int(k))
        predicted = greedy_actions(params, arr.obs[rows], head)
        result[int(k)] = float(np.mean(predicted == arr.actions[rows]))
    return result


class ItdTrainer:
    """Runs ITD updates on a parameter store that may carry more heads (e.g. ego).

    Args:
        demos: Reward-free demonstrations, ids 1..K
        config: ITD settings
        params: Parameters holding heads "1".."K"
        seed: Seed for minibatch sampling
        optimizer: Shared optimizer; a fresh Adam with config.lr when None
        targets: Shared target store; a fresh one when None
        refresh_targets: Whether step() refreshes the target store; an owner
            that counts its own learner steps passes False
    """

    def __init__(
        self,
        demos: DemoSet,
        config: ItdConfig,
        params: ParamStore,
        seed: int = 0,
        optimizer: Optional[Adam] = None,
        targets: Optional[TargetStore] = None,
        refresh_targets: bool = True
    ):
        if demos.n_steps == 0:
            raise EmptyDataset("ITD needs at least one demonstration step")
        for k in range(1, demos.n_agents + 1):
            params.check_head(k)
        self.demos = demos
        self.config = config
        self.params = params
        self.optimizer = optimizer or Adam(OptimizerConfig(lr=config.lr))
        self.targets = targets or TargetStore.of(params, config.target_period)
        self.refresh_targets = refresh_targets
        self.stream = SeedStream(seed)
        self.steps = 0
        self.log = ItdLog()

    def _next_actions(self, batch: DemoBatch) -> DemoBatch:
        """Resample a' from each head's current Boltzmann policy."""
        rng = self.stream.next()
        actions = batch.next_actions.copy()
        for k in np.unique(batch.agent_ids):
            rows = np.flatnonzero(batch.agent_ids == k)
            probs = head_policy(self.params, int(k), batch.next_obs[rows])
            cumulative = probs.cumsum(axis=1)
            draws = rng.random(len(rows))[:, None]
            actions[rows] = np.minimum((draws > cumulative).sum(axis=1), probs.shape[1] - 1)
        return DemoBatch(batch.obs, batch.actions, batch.next_obs, actions, batch.agent_ids, batch.has_next)

    def step(self) -> Dict[str, float]:
        """One outer iteration; returns the step's metrics."""
        metrics: Dict[str, float] = {}
        for _ in range(self.config.alternate_ratio):
            batch = sample_demo_steps(self.demos, self.config.batch, self.stream)
            bc = bcq_loss(self.params, batch, self.config.lambda_w)
            self.params = self.optimizer.step(self.params, bc.grads)
            metrics.update(bc.metrics)

        batch = sample_demo_batch(self.demos, self.config.batch, self.stream, include_terminal=True)
        if self.config.next_action == "policy":
            batch = self._next_actions(batch)
        itd = itd_loss(self.params, self.targets.params, batch, self.config.gamma)
        self.params = self.optimizer.step(self.params, itd.grads)
        metrics.update(itd.metrics)

        self.steps += 1
        if self.refresh_targets:
            self.targets.maybe_refresh(self.params, self.steps)
        metrics.pop("accuracy", None)
        self.log.record(self.steps, metrics)
        return metrics

    def run(self, steps: int) -> ParamStore:
        for _ in range(steps):
            metrics = self.step()
            if self.steps % 500 == 0:
                logger.info(
                    f"ITD step {self.steps}: bcq={metrics['loss_bcq']:.4f} "
                    f"itd={metrics['loss_itd']:.5f} l1={metrics['l1_w']:.4f}"
                )
        return self.params


def run_itd(
    demos: DemoSet,
    config: Optional[ItdConfig] = None,
    seed: int = 0,
    params: Optional[ParamStore] = None,
    n_actions: int = N_ACTIONS
) -> Tuple[ParamStore, ItdLog]:
    """Offline multi-task IRL: fit Ψᵏ, wᵏ and a shared Φ to the demonstrations.

    Args:
        demos: Non-empty demonstration set
        config: ITD settings
        seed: Seeds both initialization and minibatch sampling
        params: Starting parameters; a fresh store with heads "1".."K"
            shaped by config.network when None
        n_actions: |A| for a fresh store

    Returns:
        Tuple of (trained parameters, training log)

    Raises:
        EmptyDataset: If demos holds no steps
    """
    config = config or ItdConfig()
    if demos.n_steps == 0:
        raise EmptyDataset("ITD needs at least one demonstration step")
    if params is None:
        width = demos.arrays().obs.shape[1]
        params = init_params(width, n_actions, agent_heads(demos.n_agents, ego=False), config.network, seed)
    trainer = ItdTrainer(demos, config, params, seed=seed)
    logger.info(f"Running ITD for {config.max_steps} steps on {demos.n_steps} steps from {demos.n_agents} agents")
    trained = trainer.run(config.max_steps)
    return trained, trainer.log


def preference_cosine(params: ParamStore, heads: Sequence[Union[int, str]]) -> float:
    """Cosine similarity of two heads' preference vectors (0 if either is zero)."""
    a, b = (params.w(h) for h in heads)
    norm = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / norm) if norm > 0 else 0.0
