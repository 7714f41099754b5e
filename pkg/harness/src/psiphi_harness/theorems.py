"""Property suites for the guarantees behind ITD and GPI, checked on random tabular MDPs.

Three checks run per MDP:

* generalisation bound: the GPI policy built from noisy successor features of
  source-task optimal policies stays within the bound of the optimal value on
  a new task, with reward and SF errors measured rather than assumed
* value-fit lemma: a policy's value and its SF value under the least-squares
  preferences differ by at most the reward residual / (1 - γ)
* policy invariance: scaling a reward and adding a potential-based shaping
  term keeps the greedy policy, and the reward ITD recovers from a single
  near-greedy demonstrator induces the demonstrator's greedy policy
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from psiphi_core.demos import DemoSet
from psiphi_core.gridworld import TaskVector
from psiphi_core.interfaces import InvalidArgument, InvariantViolation
from psiphi_core.oracle import (
    TabularModel,
    exact_successor_features,
    generate_demonstrations,
    gpi_policy,
    policy_evaluation,
    potential_shaping,
    random_tabular_model,
    value_iteration,
)
from psiphi_core.parameters import ItdConfig, NetworkConfig
from psiphi_core.seeding import SeedStream
from psiphi_learning.itd import recovered_rewards, run_itd

logger = logging.getLogger(__name__)

BOUND_TOLERANCE = 1e-6
LEMMA_TOLERANCE = 1e-8
OPTIMAL_TOLERANCE = 1e-9
MAX_STATES = 50
MAX_FEATURES = 4
AGREEMENT_THRESHOLD = 0.95
DEMONSTRATOR_TEMPERATURE = 0.05


@dataclass
class BoundRecord:
    """One (s, a) entry of the generalisation-bound check.

    Attributes:
        mdp_id: Index of the random MDP
        state: State index
        action: Action index
        gap: Q*(s, a) - Q^π(s, a) for the GPI policy π on the target task
        rhs: Right-hand side of the bound
        delta_r: Largest reward residual ‖Φw - r‖∞ over source and target tasks
        delta_psi: Largest SF error max ‖Ψ̃(s, a) - Ψ(s, a)‖₂ over source policies
        phi_max: max ‖φ(s, a)‖₂
        w_distance: min_j ‖w' - w_j‖₂
    """
    mdp_id: int
    state: int
    action: int
    gap: float
    rhs: float
    delta_r: float
    delta_psi: float
    phi_max: float
    w_distance: float

    @property
    def holds(self) -> bool:
        return self.gap <= self.rhs + BOUND_TOLERANCE


@dataclass
class LemmaRecord:
    """Value-fit lemma outcome for one MDP and policy."""
    mdp_id: int
    gamma: float
    lhs: float
    rhs: float

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs + LEMMA_TOLERANCE


@dataclass
class InvarianceRecord:
    """Policy-invariance outcome for one MDP.

    Attributes:
        mdp_id: Index of the random MDP
        exact_invariant: Scaled and shaped reward keeps every greedy action optimal
        agreement: Share of demo-visited states where the recovered reward's
            greedy action is optimal for the true reward (NaN without ITD)
        pearson: Correlation of the potential-corrected recovered reward with
            the true reward (NaN without ITD)
        n_visited: Distinct states visited by the demonstrator
    """
    mdp_id: int
    exact_invariant: bool
    agreement: float = float("nan")
    pearson: float = float("nan")
    n_visited: int = 0

    @property
    def learned_passed(self) -> bool:
        return bool(self.agreement >= AGREEMENT_THRESHOLD)


@dataclass
class TheoremReport:
    """Outcome of check_theorems; the frames are what the CLI writes to CSV."""
    bounds: List[BoundRecord] = field(default_factory=list)
    lemma: List[LemmaRecord] = field(default_factory=list)
    invariance: List[InvarianceRecord] = field(default_factory=list)

    @property
    def bound_violations(self) -> int:
        return sum(not r.holds for r in self.bounds)

    @property
    def lemma_violations(self) -> int:
        return sum(not r.holds for r in self.lemma)

    @property
    def invariance_violations(self) -> int:
        return sum(not r.exact_invariant for r in self.invariance)

    @property
    def violations(self) -> int:
        """Failures of the exact checks; the learned agreement is reported only."""
        return self.bound_violations + self.lemma_violations + self.invariance_violations

    def bounds_frame(self) -> pd.DataFrame:
        columns = [f.name for f in BoundRecord.__dataclass_fields__.values()]
        frame = pd.DataFrame([asdict(r) for r in self.bounds], columns=columns)
        frame["holds"] = [r.holds for r in self.bounds]
        return frame

    def lemma_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([asdict(r) for r in self.lemma], columns=["mdp_id", "gamma", "lhs", "rhs"])
        frame["holds"] = [r.holds for r in self.lemma]
        return frame

    def invariance_frame(self) -> pd.DataFrame:
        columns = ["mdp_id", "exact_invariant", "agreement", "pearson", "n_visited"]
        frame = pd.DataFrame([asdict(r) for r in self.invariance], columns=columns)
        frame["learned_passed"] = [r.learned_passed for r in self.invariance]
        return frame

    def summary(self) -> Dict[str, float]:
        learned = [r.agreement for r in self.invariance if not np.isnan(r.agreement)]
        return {
            "n_mdps": len({r.mdp_id for r in self.lemma}),
            "bound_records": len(self.bounds),
            "bound_violations": self.bound_violations,
            "lemma_violations": self.lemma_violations,
            "invariance_violations": self.invariance_violations,
            "learned_checks": len(learned),
            "min_agreement": float(min(learned)) if learned else float("nan"),
            "learned_failures": sum(a < AGREEMENT_THRESHOLD for a in learned),
        }


def least_squares_preferences(features: np.ndarray, reward: np.ndarray) -> np.ndarray:
    """w minimizing ‖Φw - r‖₂."""
    w, *_ = np.linalg.lstsq(features, reward, rcond=None)
    return w


def reward_residual(features: np.ndarray, reward: np.ndarray) -> float:
    """‖Φw - r‖∞ at the least-squares w."""
    return float(np.max(np.abs(features @ least_squares_preferences(features, reward) - reward)))


def bound_check(
    model: TabularModel,
    source_rewards: Sequence[np.ndarray],
    target_reward: np.ndarray,
    psi_noise: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    mdp_id: int = 0
) -> List[BoundRecord]:
    """Generalisation bound of GPI over approximate successor features.

    Each source reward r_i gets its optimal policy π_i, exact SFs Ψ^{π_i} and
    a perturbed copy Ψ̃^i (uniform noise of half-width psi_noise). The GPI
    policy over Ψ̃^i w' is evaluated exactly on the target reward and compared
    with the target optimum.

    Args:
        model: Tabular CMP whose features play the role of Φ
        source_rewards: Per-(s, a) rewards r_i of the source tasks
        target_reward: Per-(s, a) reward r' of the new task
        psi_noise: Half-width of the uniform SF perturbation
        rng: Noise generator (required when psi_noise > 0)
        mdp_id: Label copied into every record

    Returns:
        One BoundRecord per (s, a)
    """
    if not source_rewards:
        raise InvalidArgument("at least one source task is required")
    if psi_noise > 0 and rng is None:
        raise InvalidArgument("psi_noise needs a generator")
    features = model.features
    A, gamma = model.n_actions, model.gamma

    source_w = [least_squares_preferences(features, r) for r in source_rewards]
    target_w = least_squares_preferences(features, target_reward)
    delta_r = max(reward_residual(features, r) for r in [*source_rewards, target_reward])

    approx_psis = []
    delta_psi = 0.0
    for r in source_rewards:
        _, greedy = value_iteration(model, r)
        psi = exact_successor_features(model, greedy).psi
        noisy = psi + rng.uniform(-psi_noise, psi_noise, size=psi.shape) if psi_noise > 0 else psi
        delta_psi = max(delta_psi, float(np.max(np.linalg.norm(noisy - psi, axis=1))))
        approx_psis.append(noisy)

    pi = gpi_policy(approx_psis, target_w, A)
    q_star, _ = value_iteration(model, target_reward)
    q_pi = policy_evaluation(model, target_reward, pi)
    gap = q_star - q_pi

    phi_max = float(np.max(np.linalg.norm(features, axis=1)))
    w_distance = float(min(np.linalg.norm(target_w - w) for w in source_w))
    rhs = 2.0 / (1.0 - gamma) * (
        phi_max * w_distance
        + 2.0 * delta_r
        + float(np.linalg.norm(target_w)) * delta_psi
        + delta_r / (1.0 - gamma)
    )
    return [
        BoundRecord(mdp_id, s, a, float(gap[s, a]), rhs, delta_r, delta_psi, phi_max, w_distance)
        for s in range(model.n_states)
        for a in range(A)
    ]


def lemma_check(model: TabularModel, reward: np.ndarray, policy: np.ndarray, mdp_id: int = 0) -> LemmaRecord:
    """‖Q^π - Ψ^π w‖∞ against δ_max / (1 - γ) for the least-squares w of reward."""
    w = least_squares_preferences(model.features, reward)
    q_pi = policy_evaluation(model, reward, policy)
    q_sf = exact_successor_features(model, policy).q(w, model.n_actions)
    lhs = float(np.max(np.abs(q_pi - q_sf)))
    rhs = reward_residual(model.features, reward) / (1.0 - model.gamma)
    return LemmaRecord(mdp_id, model.gamma, lhs, rhs)


def optimal_action_mask(q: np.ndarray, tol: float = OPTIMAL_TOLERANCE) -> np.ndarray:
    """Boolean S × A mask of actions within tol of the state's best value."""
    return q >= q.max(axis=1, keepdims=True) - tol


def shaping_invariant(model: TabularModel, reward: np.ndarray, potential: np.ndarray, scale: float = 1.0) -> bool:
    """Whether the greedy policy of scale·r + shaping is optimal for r.

    Optimal values of the transformed reward are scale·Q*(s, a) - F(s), so
    greedy actions are compared on that scale.
    """
    q, _ = value_iteration(model, reward)
    _, shaped_greedy = value_iteration(model, potential_shaping(model, scale * reward, potential))
    tol = max(OPTIMAL_TOLERANCE, 1e-7 * float(np.max(np.abs(q), initial=1.0)))
    optimal = optimal_action_mask(q, tol)
    return bool(optimal[np.arange(model.n_states), shaped_greedy].all())


def shaping_basis(model: TabularModel) -> np.ndarray:
    """(S·A) × S matrix M with M F = γ E[F(s')] - F(s) for any potential F."""
    S, A = model.n_states, model.n_actions
    basis = model.gamma * model.transition.toarray()
    basis[np.arange(S * A), np.repeat(np.arange(S), A)] -= 1.0
    return basis


def potential_corrected_correlation(model: TabularModel, recovered: np.ndarray, reward: np.ndarray) -> float:
    """Pearson r between the true reward and the recovered one with its best-fit shaping term removed.

    The recovered reward is regressed on [r, shaping basis]; the fitted
    shaping part is subtracted before correlating with r.
    """
    basis = shaping_basis(model)
    design = np.column_stack([reward, basis])
    coef, *_ = np.linalg.lstsq(design, recovered, rcond=None)
    corrected = recovered - basis @ coef[1:]
    if np.ptp(corrected) == 0 or np.ptp(reward) == 0:
        return float("nan")
    return float(stats.pearsonr(corrected, reward)[0])


def learned_invariance(
    model: TabularModel,
    reward_weights: np.ndarray,
    itd_config: ItdConfig,
    seed: int = 0,
    episodes: int = 50,
    temperature: float = DEMONSTRATOR_TEMPERATURE
) -> Dict[str, float]:
    """ITD on a single Boltzmann demonstrator, then planning on the recovered reward.

    Returns:
        Dict with agreement (optimal-action match rate of the recovered
        reward's greedy policy on demo-visited states), pearson and n_visited
    """
    task = TaskVector(np.asarray(reward_weights, dtype=np.float64))
    demos: DemoSet = generate_demonstrations(model, [task], temperature, episodes, seed)
    params, _ = run_itd(demos, itd_config, seed=seed)

    reward = model.reward(task)
    recovered = recovered_rewards(params, 1, model.observation_matrix()).ravel()
    q_true, _ = value_iteration(model, reward)
    _, recovered_greedy = value_iteration(model, recovered)

    visited = sorted({model.index_of(obs) for obs in demos.arrays().obs})
    optimal = optimal_action_mask(q_true)
    agreement = float(np.mean([optimal[s, recovered_greedy[s]] for s in visited]))
    return {
        "agreement": agreement,
        "pearson": potential_corrected_correlation(model, recovered, reward),
        "n_visited": len(visited),
    }


def tabular_itd_config(feature_dim: int, gamma: float, steps: int = 3000) -> ItdConfig:
    """Tabular-head ITD settings used by the learned invariance check."""
    return ItdConfig(
        batch=64,
        lr=1e-2,
        max_steps=steps,
        gamma=gamma,
        target_period=100,
        network=NetworkConfig(hidden_sizes=(), cumulant_dim=feature_dim, ensemble_size=1),
    )


def check_theorems(
    n_mdps: int,
    seed: int = 0,
    itd_mdps: int = 0,
    gamma: float = 0.9,
    reward_noise: float = 0.05,
    psi_noise: float = 0.05,
    itd_steps: int = 3000,
    strict: bool = False
) -> TheoremReport:
    """Run every property suite on n_mdps random tabular MDPs.

    MDP i draws |S| ≤ 50, d ≤ 4 and two or three source tasks from its own
    child seed stream. Rewards are linear in the features plus uniform noise,
    so δ_r > 0 in general. The learned invariance check runs on the first
    itd_mdps MDPs only.

    Args:
        n_mdps: Number of random MDPs
        seed: Root seed
        itd_mdps: How many MDPs also get the learned ITD check
        gamma: Discount of every MDP
        reward_noise: Half-width of the reward perturbation
        psi_noise: Half-width of the SF perturbation
        itd_steps: ITD iterations per learned check
        strict: Raise on any exact-check failure

    Raises:
        InvalidArgument: If n_mdps < 1
        InvariantViolation: In strict mode, if any exact check fails
    """
    if n_mdps < 1:
        raise InvalidArgument("n_mdps must be at least 1")
    root = SeedStream(seed)
    report = TheoremReport()
    for mdp_id in range(n_mdps):
        rng = root.spawn(mdp_id).next()
        n_states = int(rng.integers(5, MAX_STATES + 1))
        d = int(rng.integers(1, MAX_FEATURES + 1))
        n_tasks = int(rng.integers(2, 4))
        model = random_tabular_model(rng, n_states, 3, d, gamma, deterministic=bool(rng.random() < 0.5))

        def noisy_reward() -> np.ndarray:
            w = rng.uniform(-1.0, 1.0, size=d)
            return model.features @ w + rng.uniform(-reward_noise, reward_noise, size=model.features.shape[0])

        sources = [noisy_reward() for _ in range(n_tasks)]
        report.bounds.extend(bound_check(model, sources, noisy_reward(), psi_noise, rng, mdp_id))

        probs = rng.dirichlet(np.ones(model.n_actions), size=model.n_states)
        report.lemma.append(lemma_check(model, noisy_reward(), probs, mdp_id))

        exact = shaping_invariant(
            model, noisy_reward(), rng.uniform(-1.0, 1.0, size=n_states), scale=float(rng.uniform(0.5, 20.0))
        )
        record = InvarianceRecord(mdp_id, exact)
        if mdp_id < itd_mdps:
            learned = learned_invariance(
                model,
                rng.uniform(-1.0, 1.0, size=d),
                tabular_itd_config(d, gamma, itd_steps),
                seed=int(rng.integers(2**31)),
            )
            record.agreement = learned["agreement"]
            record.pearson = learned["pearson"]
            record.n_visited = learned["n_visited"]
            logger.info(f"MDP {mdp_id}: learned agreement {record.agreement:.3f}, pearson {record.pearson:.3f}")
        report.invariance.append(record)
        logger.debug(f"MDP {mdp_id}: |S|={n_states} d={d} tasks={n_tasks}")

    summary = report.summary()
    logger.info(f"Property checks finished: {summary}")
    if strict and report.violations:
        logger.error(f"{report.violations} exact check(s) failed")
        raise InvariantViolation(f"{report.violations} exact check(s) failed")
    return report
