"""Exact tabular solvers used as demonstrators and as ground truth."""
import functools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.special import softmax

from .demos import DemoSet, Trajectory
from .gridworld import (
    CoinGridEnv,
    GridSpec,
    N_ACTIONS,
    N_CHANNELS,
    N_FEATURES,
    Observation,
    TaskVector,
    coins_exhausted,
    encode,
    enumerate_states,
    state_index,
    transition,
)
from .interfaces import InvalidArgument, NonConvergence, PolicyInterface, SingularSystem
from .seeding import SeedStream

logger = logging.getLogger(__name__)

DEFAULT_MAX_SWEEPS = 100_000
VI_TOLERANCE = 1e-10
SOLVE_TOLERANCE = 1e-9


@dataclass
class TabularModel:
    """Explicit CMP ⟨S, A, P, γ⟩ with ground-truth features.

    Rows of transition and features are indexed by s * n_actions + a.

    Attributes:
        n_states: Number of states, including the absorbing state if any
        n_actions: Number of actions
        transition: Sparse (S·A) × S row-stochastic matrix
        features: Dense (S·A) × d feature matrix
        gamma: Discount in [0, 1)
        start_state: Index where rollouts begin
        absorbing: Index of the zero-feature absorbing state, if any
        horizon: Rollout truncation length
        encoder: Maps a state index to its Observation; None means one-hot
        terminal_fn: Given a task, the mask of states whose entry ends the
            episode (redirected to the absorbing state by for_task)
    """
    n_states: int
    n_actions: int
    transition: sparse.csr_matrix
    features: np.ndarray
    gamma: float
    start_state: int = 0
    absorbing: Optional[int] = None
    horizon: int = 50
    encoder: Optional[Callable[[int], Observation]] = field(default=None, repr=False)
    terminal_fn: Optional[Callable[[TaskVector], np.ndarray]] = field(default=None, repr=False)
    _obs_index: Optional[Dict[bytes, int]] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise InvalidArgument("gamma must lie in [0, 1)")
        self.transition = sparse.csr_matrix(self.transition)
        sa = self.n_states * self.n_actions
        if self.transition.shape != (sa, self.n_states):
            raise InvalidArgument(f"transition shape {self.transition.shape} != {(sa, self.n_states)}")
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != sa:
            raise InvalidArgument("features must be (n_states * n_actions) x d")
        sums = np.asarray(self.transition.sum(axis=1)).ravel()
        if np.any(np.abs(sums - 1.0) > 1e-12):
            raise InvalidArgument("transition rows must sum to 1")

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def reward(self, task: Union[TaskVector, np.ndarray]) -> np.ndarray:
        weights = task.weights if isinstance(task, TaskVector) else np.asarray(task, dtype=np.float64)
        return self.features @ weights

    def observation(self, s: int) -> Observation:
        if self.encoder is not None:
            return self.encoder(s)
        channels = np.zeros(self.n_states, dtype=np.uint8)
        channels[s] = 1
        return Observation(channels)

    def observation_matrix(self, states: Optional[Sequence[int]] = None) -> np.ndarray:
        """Stacked observation vectors, one row per requested state."""
        states = range(self.n_states) if states is None else states
        return np.stack([self.observation(s).vector() for s in states])

    def index_of(self, obs: np.ndarray) -> int:
        """Inverse of observation(); requires an injective encoder."""
        if self._obs_index is None:
            live = [s for s in range(self.n_states) if s != self.absorbing]
            self._obs_index = {self.observation(s).bits().tobytes(): s for s in live}
        return self._obs_index[np.asarray(obs).astype(np.uint8).tobytes()]

    def for_task(self, task: TaskVector) -> "TabularModel":
        """Same CMP with task-dependent episode ends routed to the absorbing state."""
        if self.terminal_fn is None or self.absorbing is None:
            return self
        terminal = self.terminal_fn(task)
        P = self.transition.tocsr(copy=True)
        P.indices = np.where(terminal[P.indices], self.absorbing, P.indices).astype(P.indices.dtype)
        P.sum_duplicates()
        model = TabularModel(
            n_states=self.n_states,
            n_actions=self.n_actions,
            transition=P,
            features=self.features,
            gamma=self.gamma,
            start_state=self.start_state,
            absorbing=self.absorbing,
            horizon=self.horizon,
            encoder=self.encoder,
        )
        model._obs_index = self._obs_index
        return model


@dataclass
class SoftPolicy:
    """Boltzmann policy over a Q table.

    Attributes:
        probs: n_states × n_actions, rows sum to 1, entries > 0
        temperature: ν > 0
    """
    probs: np.ndarray
    temperature: float

    def __post_init__(self):
        if self.temperature <= 0:
            raise InvalidArgument("temperature must be positive")
        if np.any(np.abs(self.probs.sum(axis=1) - 1.0) > 1e-10):
            raise InvalidArgument("policy rows must sum to 1")


@dataclass
class ExactSF:
    """Successor features Ψ^π, one row per (s, a)."""
    psi: np.ndarray

    def q(self, w: np.ndarray, n_actions: int) -> np.ndarray:
        return (self.psi @ np.asarray(w, dtype=np.float64)).reshape(-1, n_actions)


PolicyLike = Union[SoftPolicy, np.ndarray]


def policy_matrix(policy: PolicyLike, n_actions: int) -> np.ndarray:
    """Probabilities n_states × n_actions from a SoftPolicy, a prob matrix or greedy actions."""
    if isinstance(policy, SoftPolicy):
        return policy.probs
    arr = np.asarray(policy)
    if arr.ndim == 1:
        return greedy_policy_matrix(arr, n_actions)
    return arr.astype(np.float64)


def greedy_policy_matrix(actions: np.ndarray, n_actions: int) -> np.ndarray:
    probs = np.zeros((len(actions), n_actions))
    probs[np.arange(len(actions)), actions] = 1.0
    return probs


def value_iteration(
    model: TabularModel,
    reward: np.ndarray,
    max_sweeps: int = DEFAULT_MAX_SWEEPS,
    tol: float = VI_TOLERANCE
) -> Tuple[np.ndarray, np.ndarray]:
    """Optimal Q by repeated Bellman optimality sweeps.

    Args:
        model: Tabular model
        reward: Reward per (s, a) row
        max_sweeps: Sweep limit
        tol: Stop once the sup-norm change falls below this

    Returns:
        Tuple of (Q* as n_states × n_actions, greedy actions with
        lowest-index tie-breaking)

    Raises:
        NonConvergence: If tol is not reached within max_sweeps
    """
    reward = np.asarray(reward, dtype=np.float64)
    if not np.all(np.isfinite(reward)):
        raise InvalidArgument("reward must be finite")
    S, A = model.n_states, model.n_actions
    R = reward.reshape(S, A)
    Q = np.zeros((S, A))
    for sweep in range(max_sweeps):
        V = Q.max(axis=1)
        Q_new = R + model.gamma * (model.transition @ V).reshape(S, A)
        delta = np.max(np.abs(Q_new - Q))
        Q = Q_new
        if delta < tol:
            logger.debug(f"Value iteration converged after {sweep + 1} sweeps")
            return Q, Q.argmax(axis=1)
    raise NonConvergence(f"value iteration did not converge in {max_sweeps} sweeps")


def soft_q_iteration(
    model: TabularModel,
    reward: np.ndarray,
    temperature: float,
    max_sweeps: int = DEFAULT_MAX_SWEEPS
) -> SoftPolicy:
    """Boltzmann demonstrator π(a|s) = softmax(Q*(s, ·) / ν) over the hard-optimal Q*."""
    if temperature <= 0:
        raise InvalidArgument("temperature must be positive")
    Q, _ = value_iteration(model, reward, max_sweeps=max_sweeps)
    probs = softmax(Q / temperature, axis=1)
    # keep every action possible after underflow
    probs = np.maximum(probs, np.finfo(np.float64).tiny)
    probs /= probs.sum(axis=1, keepdims=True)
    return SoftPolicy(probs=probs, temperature=temperature)


def _policy_operator(model: TabularModel, probs: np.ndarray) -> sparse.csr_matrix:
    """P^π over (s, a) rows: (s, a) → (s', a') with P(s'|s,a) π(a'|s')."""
    S, A = model.n_states, model.n_actions
    pi = sparse.csr_matrix(
        (probs.ravel(), (np.repeat(np.arange(S), A), np.arange(S * A))),
        shape=(S, S * A),
    )
    return (model.transition @ pi).tocsr()


def _solve_policy_system(model: TabularModel, probs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if probs.shape != (model.n_states, model.n_actions):
        raise InvalidArgument(f"policy shape {probs.shape} does not match the model")
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-10):
        raise InvalidArgument("policy rows must sum to 1")
    sa = model.n_states * model.n_actions
    system = (sparse.identity(sa, format="csr") - model.gamma * _policy_operator(model, probs)).tocsc()
    rhs2 = rhs.reshape(sa, -1)
    try:
        solution = np.asarray(spsolve(system, rhs2)).reshape(sa, -1)
    except RuntimeError as e:
        raise SingularSystem(f"linear solve failed: {str(e)}")
    if not np.all(np.isfinite(solution)):
        raise SingularSystem("linear solve produced non-finite values")
    residual = np.max(np.abs(system @ solution - rhs2)) if sa else 0.0
    if residual > SOLVE_TOLERANCE * max(1.0, np.max(np.abs(rhs2), initial=0.0)):
        raise SingularSystem(f"linear solve residual {residual:.3e} above tolerance")
    return solution


def exact_successor_features(model: TabularModel, policy: PolicyLike) -> ExactSF:
    """Solve (I - γ P^π) Ψ = Φ directly.

    Raises:
        SingularSystem: If the solve fails (malformed inputs)
    """
    probs = policy_matrix(policy, model.n_actions)
    return ExactSF(psi=_solve_policy_system(model, probs, model.features))


def policy_evaluation(model: TabularModel, reward: np.ndarray, policy: PolicyLike) -> np.ndarray:
    """Q^π for a scalar reward, as n_states × n_actions."""
    probs = policy_matrix(policy, model.n_actions)
    q = _solve_policy_system(model, probs, np.asarray(reward, dtype=np.float64))
    return q.reshape(model.n_states, model.n_actions)


def gpi_policy(psis: Sequence[Union[ExactSF, np.ndarray]], w: np.ndarray, n_actions: int) -> np.ndarray:
    """argmax_a max_i Ψ^{π_i}(s, a)ᵀw for every state."""
    tables = [p.psi if isinstance(p, ExactSF) else np.asarray(p) for p in psis]
    q = np.stack([(t @ np.asarray(w, dtype=np.float64)).reshape(-1, n_actions) for t in tables])
    return q.max(axis=0).argmax(axis=1)


def potential_shaping(model: TabularModel, reward: np.ndarray, potential: np.ndarray) -> np.ndarray:
    """r(s,a) + γ E[F(s')] - F(s) per (s, a) row."""
    expected_next = model.transition @ potential
    return reward + model.gamma * expected_next - np.repeat(potential, model.n_actions)


def rollout(
    model: TabularModel,
    probs: np.ndarray,
    rng: np.random.Generator,
    start: Optional[int] = None,
    horizon: Optional[int] = None
) -> List[Tuple[int, int]]:
    """Sample one episode as a list of (state, action) pairs.

    Stops after horizon actions or once the absorbing state is entered.
    """
    horizon = model.horizon if horizon is None else horizon
    s = model.start_state if start is None else start
    P = model.transition
    A = model.n_actions
    steps = []
    for _ in range(horizon):
        a = int(rng.choice(A, p=probs[s]))
        steps.append((s, a))
        row = s * A + a
        lo, hi = P.indptr[row], P.indptr[row + 1]
        if hi - lo == 1:
            s = int(P.indices[lo])
        else:
            s = int(rng.choice(P.indices[lo:hi], p=P.data[lo:hi]))
        if s == model.absorbing:
            break
    return steps


def episode_return(model: TabularModel, reward: np.ndarray, steps: List[Tuple[int, int]]) -> float:
    A = model.n_actions
    return float(sum(reward[s * A + a] for s, a in steps))


def generate_demonstrations(
    model: TabularModel,
    tasks: Sequence[TaskVector],
    temperature: float = 0.1,
    episodes_per_agent: int = 200,
    seed: int = 0
) -> DemoSet:
    """Reward-free trajectories from one Boltzmann demonstrator per task.

    Demonstrator k (1-based) acts for tasks[k-1]. Trajectories store
    observations and actions only.

    Raises:
        InvalidArgument: If tasks is empty or episodes_per_agent < 1
    """
    if not tasks:
        raise InvalidArgument("at least one task is required")
    if episodes_per_agent < 1:
        raise InvalidArgument("episodes_per_agent must be at least 1")
    stream = SeedStream(seed)
    trajectories = []
    for k, task in enumerate(tasks, start=1):
        task_model = model.for_task(task)
        policy = soft_q_iteration(task_model, task_model.reward(task), temperature)
        rng = stream.next()
        for _ in range(episodes_per_agent):
            steps = rollout(task_model, policy.probs, rng)
            trajectories.append(
                Trajectory(agent_id=k, steps=[(task_model.observation(s), a) for s, a in steps])
            )
        logger.info(f"Generated {episodes_per_agent} demonstrations for agent {k}")
    return DemoSet(trajectories=trajectories, n_agents=len(tasks))


@functools.lru_cache(maxsize=8)
def build_tabular_model(spec: GridSpec, gamma: float = 0.9) -> TabularModel:
    """Tabular CMP of a grid with an absorbing state appended last.

    The returned model is shared through a cache and must not be mutated.
    """
    states = enumerate_states(spec)
    index = state_index(states)
    n_live = len(states)
    absorbing = n_live
    S, A = n_live + 1, N_ACTIONS
    next_states = np.empty(S * A, dtype=np.int64)
    features = np.zeros((S * A, N_FEATURES))
    for i, state in enumerate(states):
        for a in range(A):
            nxt, phi = transition(state, a, spec)
            next_states[i * A + a] = index[nxt.key]
            features[i * A + a] = phi
    next_states[absorbing * A:] = absorbing
    P = sparse.csr_matrix((np.ones(S * A), (np.arange(S * A), next_states)), shape=(S * A, S))

    remaining = [s.remaining_coins for s in states]

    def terminal_fn(task: TaskVector) -> np.ndarray:
        mask = np.zeros(S, dtype=bool)
        mask[:n_live] = [coins_exhausted(coins, spec, task) for coins in remaining]
        return mask

    blank = Observation(
        np.zeros((spec.height, spec.width, N_CHANNELS), dtype=np.uint8), np.zeros(4, dtype=np.uint8)
    )

    def encoder(s: int) -> Observation:
        return blank if s == absorbing else encode(states[s], spec)

    logger.info(f"Built tabular model with {S} states")
    return TabularModel(
        n_states=S,
        n_actions=A,
        transition=P,
        features=features,
        gamma=gamma,
        start_state=index[spec.start_state().key],
        absorbing=absorbing,
        horizon=spec.episode_horizon,
        encoder=encoder,
        terminal_fn=terminal_fn,
    )


def random_tabular_model(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int = 3,
    feature_dim: int = 4,
    gamma: float = 0.9,
    deterministic: bool = False,
    horizon: int = 50
) -> TabularModel:
    """Random CMP with Dirichlet (or deterministic) transitions and U[0,1) features."""
    if n_states < 1 or n_actions < 1 or feature_dim < 1:
        raise InvalidArgument("model sizes must be positive")
    sa = n_states * n_actions
    if deterministic:
        nxt = rng.integers(n_states, size=sa)
        P = sparse.csr_matrix((np.ones(sa), (np.arange(sa), nxt)), shape=(sa, n_states))
    else:
        dense = rng.dirichlet(np.ones(n_states), size=sa)
        # exact row sums after float rounding
        dense /= dense.sum(axis=1, keepdims=True)
        P = sparse.csr_matrix(dense)
    features = rng.uniform(0.0, 1.0, size=(sa, feature_dim))
    return TabularModel(
        n_states=n_states,
        n_actions=n_actions,
        transition=P,
        features=features,
        gamma=gamma,
        horizon=horizon,
    )


class PlannerPolicy(PolicyInterface):
    """Acts from a per-state action table by decoding observations."""

    def __init__(self, model: TabularModel, actions: np.ndarray):
        self.model = model
        self.actions = np.asarray(actions)

    def act(self, obs: np.ndarray, rng: np.random.Generator) -> int:
        return int(self.actions[self.model.index_of(obs)])


def plan(model: TabularModel, task: TaskVector) -> PlannerPolicy:
    """Value-iteration greedy policy for a task."""
    task_model = model.for_task(task)
    _, greedy = value_iteration(task_model, task_model.reward(task))
    return PlannerPolicy(task_model, greedy)


def reference_returns(env: CoinGridEnv, episodes: int, seed: int, gamma: float = 0.9) -> Tuple[float, float]:
    """Mean undiscounted returns of the uniform policy and the optimal planner.

    Returns:
        Tuple of (random_return, oracle_return) for env's current task
    """
    model = build_tabular_model(env.spec, gamma).for_task(env.task)
    reward = model.reward(env.task)
    _, greedy = value_iteration(model, reward)
    rng = SeedStream(seed).next()
    uniform = np.full((model.n_states, model.n_actions), 1.0 / model.n_actions)
    random_return = np.mean([episode_return(model, reward, rollout(model, uniform, rng)) for _ in range(episodes)])
    greedy_probs = greedy_policy_matrix(greedy, model.n_actions)
    oracle_return = episode_return(model, reward, rollout(model, greedy_probs, rng))
    logger.debug(f"Reference returns: random={random_return:.3f} oracle={oracle_return:.3f}")
    return float(random_return), float(oracle_return)
