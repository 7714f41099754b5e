"""Comparators: behaviour cloning and plain Q-learning, plus an environment
wrapper that swaps the true reward for a recovered one."""
import logging
from dataclasses import replace
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from psiphi_core.demos import DemoSet, sample_demo_steps
from psiphi_core.gridworld import N_ACTIONS
from psiphi_core.interfaces import EmptyDataset, EnvironmentInterface, PolicyInterface
from psiphi_core.losses import bcq_loss
from psiphi_core.network import ParamStore, agent_heads, head_id, init_params
from psiphi_core.optim import Adam
from psiphi_core.parameters import ItdConfig, OptimizerConfig, PsiPhiConfig
from psiphi_core.seeding import SeedStream

from .agent import GpiPolicy, PsiPhiAgent
from .itd import action_accuracy, head_policy, recovered_rewards

logger = logging.getLogger(__name__)

RewardFn = Callable[[np.ndarray, int], float]


class BCPolicy(PolicyInterface):
    """Greedy policy of a behaviour-cloned head."""

    def __init__(self, params: ParamStore, head: str = "1"):
        self.params = params
        self.head = params.check_head(head)

    def probs(self, obs) -> np.ndarray:
        return head_policy(self.params, self.head, obs)

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> int:
        return int(self.probs(obs)[0].argmax())

    def for_agent(self, k: int) -> "BCPolicy":
        return BCPolicy(self.params, head_id(k))

    def accuracy(self, demos: DemoSet) -> Dict[int, float]:
        """Per-agent greedy agreement; pooled policies score every agent with this head."""
        heads = {k: self.head for k in range(1, demos.n_agents + 1)} if len(self.params.head_ids) == 1 else None
        return action_accuracy(self.params, demos, heads)


def bc_baseline(
    demos: DemoSet,
    config: Optional[ItdConfig] = None,
    seed: int = 0,
    pooled: bool = True,
    agent_ids: Optional[Sequence[int]] = None,
    n_actions: int = N_ACTIONS
) -> BCPolicy:
    """Supervised action cross-entropy on the demonstrations.

    Each head is a d=1 SF head with its preference fixed at 1, so its
    logits are plain action values and only the torso and head train.

    Args:
        demos: Demonstrations
        config: Batch, lr, max_steps and network shape (d is forced to 1)
        seed: Initialization and sampling seed
        pooled: Erase agent ids and fit one head to all selected demos
        agent_ids: Restrict to these demonstrators first
        n_actions: |A|

    Raises:
        EmptyDataset: If no demonstration steps remain after selection
    """
    config = config or ItdConfig()
    selected = demos.filter(agent_ids) if agent_ids is not None else demos
    if pooled:
        selected = selected.pooled()
    if selected.n_steps == 0:
        raise EmptyDataset("behaviour cloning needs at least one demonstration step")

    network = replace(config.network, cumulant_dim=1)
    width = selected.arrays().obs.shape[1]
    heads = agent_heads(selected.n_agents, ego=False)
    params = init_params(width, n_actions, heads, network, seed)
    params = params.with_arrays({f"w.{h}": np.ones(1) for h in heads})

    optimizer = Adam(OptimizerConfig(lr=config.lr))
    stream = SeedStream(seed)
    for step in range(1, config.max_steps + 1):
        batch = sample_demo_steps(selected, config.batch, stream)
        result = bcq_loss(params, batch, lambda_w=0.0)
        grads = {k: g for k, g in result.grads.items() if not k.startswith("w.")}
        params = optimizer.step(params, grads)
        if step % 500 == 0:
            logger.info(f"BC step {step}: nll={result.value:.4f} accuracy={result.metrics['accuracy']:.3f}")
    return BCPolicy(params, heads[0])


def recovered_reward_fn(params: ParamStore, k: int) -> RewardFn:
    """R^k(s, a) ≈ Φ(s, a)ᵀwᵏ as a callable on observation vectors."""
    params.check_head(k)

    def reward(obs: np.ndarray, action: int) -> float:
        return float(recovered_rewards(params, k, obs)[0, int(action)])
    return reward


class RecoveredRewardEnv(EnvironmentInterface):
    """Wraps an environment and pays reward_fn(s, a) instead of its reward.

    Dynamics and termination stay those of the wrapped environment; the
    true reward is kept in info["true_reward"].
    """

    def __init__(self, env: EnvironmentInterface, reward_fn: RewardFn):
        self.env = env
        self.reward_fn = reward_fn
        self._obs: Optional[np.ndarray] = None

    @property
    def n_actions(self) -> int:
        return self.env.n_actions

    @property
    def observation_size(self) -> int:
        return self.env.observation_size

    def reset(self) -> np.ndarray:
        self._obs = self.env.reset()
        return self._obs

    def step(self, action: int) -> Tuple[np.ndarray, float, bool, Dict[str, Any]]:
        if self._obs is None:
            raise RuntimeError("Environment has not been reset")
        reward = self.reward_fn(self._obs, action)
        obs, true_reward, done, info = self.env.step(action)
        self._obs = obs
        return obs, reward, done, {**info, "true_reward": true_reward}


def q_baseline(
    env: EnvironmentInterface,
    config: Optional[PsiPhiConfig] = None,
    seed: int = 0
) -> GpiPolicy:
    """Plain deep Q-learning: no demonstrators, no GPI, a d=1 head with w fixed at 1."""
    config = replace(
        config or PsiPhiConfig(),
        plain_q=True,
        gpi_enabled=False,
        task_inference_enabled=False,
        reward_loss_enabled=False,
    )
    agent = PsiPhiAgent(env, None, config, seed)
    logger.info(f"Training Q baseline for {config.env_steps} env steps")
    agent.train()
    return agent.policy()
