import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple, Type, TypeVar, get_type_hints

from .gridworld import TASK_PRESETS
from .interfaces import ConfigError

T = TypeVar("T")


def check_task_names(names: Iterable[str], what: str):
    unknown = [name for name in names if name not in TASK_PRESETS]
    if unknown:
        raise ConfigError(f"unknown {what}: {', '.join(unknown)}")


@dataclass
class NetworkConfig:
    """Shape of the shared-torso model.

    Attributes:
        hidden_sizes: Widths of the affine+ReLU torso layers. An empty tuple
            puts the heads directly on the input, which on one-hot inputs is
            a tabular model
        cumulant_dim: Number of cumulant dimensions d
        ensemble_size: SF-head members per head id (pessimism is over these)
        init: "fan_in" for scaled-uniform init, "zeros" for an all-zero store
    """
    hidden_sizes: Tuple[int, ...] = (64, 64)
    cumulant_dim: int = 4
    ensemble_size: int = 2
    init: str = "fan_in"

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        if any(h <= 0 for h in self.hidden_sizes):
            raise ConfigError("hidden sizes must be positive")
        if self.cumulant_dim < 1:
            raise ConfigError("cumulant_dim must be at least 1")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be at least 1")
        if self.init not in ("fan_in", "zeros"):
            raise ConfigError(f"unknown init scheme: {self.init}")


@dataclass
class OptimizerConfig:
    """Adaptive-moment optimizer constants.

    Attributes:
        lr: Step size
        beta1: First-moment decay
        beta2: Second-moment decay
        eps: Denominator guard
    """
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr cannot be negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")


@dataclass
class ItdConfig:
    """Settings for inverse temporal difference learning.

    Attributes:
        lambda_w: L1 coefficient on the preference vectors
        batch: Minibatch size for both BC-Q and ITD updates
        lr: Adam step size of standalone ITD (run_itd). Inside a ΨΦ agent the
            ITD updates share the agent's optimizer and PsiPhiConfig.lr
        max_steps: Outer iterations (one BC-Q phase + one ITD update each)
        gamma: Discount of the successor features
        alternate_ratio: BC-Q minibatches per ITD minibatch
        target_period: Learner steps between target-network refreshes
        next_action: "trajectory" takes a' from the demo (SARSA-style),
            "policy" samples a' from the head's current Boltzmann policy
        network: Model shape used when run_itd allocates a fresh store
    """
    lambda_w: float = 0.05
    batch: int = 64
    lr: float = 1e-4
    max_steps: int = 5000
    gamma: float = 0.9
    alternate_ratio: int = 1
    target_period: int = 1000
    next_action: str = "trajectory"
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.lambda_w < 0:
            raise ConfigError("lambda_w cannot be negative")
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.batch < 1:
            raise ConfigError("batch must be at least 1")
        if self.max_steps < 0:
            raise ConfigError("max_steps cannot be negative")
        if self.alternate_ratio < 1:
            raise ConfigError("alternate_ratio must be at least 1")
        if self.target_period < 1:
            raise ConfigError("target_period must be at least 1")
        if self.lr < 0:
            raise ConfigError("lr cannot be negative")
        if self.next_action not in ("trajectory", "policy"):
            raise ConfigError(f"unknown next_action mode: {self.next_action}")


@dataclass
class EpsilonSchedule:
    """Linear ε decay for exploration on top of GPI.

    Attributes:
        start: ε at env step 0
        end: ε after the decay window
        decay_fraction: Share of the env-step budget over which ε decays
    """
    start: float = 1.0
    end: float = 0.05
    decay_fraction: float = 0.2

    def __post_init__(self):
        if not (0 <= self.start <= 1 and 0 <= self.end <= 1):
            raise ConfigError("epsilon must lie in [0, 1]")
        if not 0 <= self.decay_fraction <= 1:
            raise ConfigError("decay_fraction must lie in [0, 1]")

    def value(self, env_step: int, total_steps: int) -> float:
        window = self.decay_fraction * total_steps
        if window <= 0:
            return self.end
        frac = min(1.0, env_step / window)
        return self.start + frac * (self.end - self.start)


@dataclass
class PsiPhiConfig:
    """Settings for the full ΨΦ learner.

    Attributes:
        itd: Inner ITD settings; itd.network also shapes the ego head
        epsilon: Exploration schedule
        target_period: Learner steps between target refreshes
        gamma: Ego discount
        gpi_enabled: Act by GPI over all heads; False uses the ego head only
        task_inference_enabled: Least-squares w^ego at each episode start
        psi_loss_scale: Weight of the ego SF-TD loss; None means 1/d
        lr: Adam step size of the agent's single optimizer, which also runs
            the inner ITD updates (itd.lr is not used there)
        batch: Ego minibatch size
        n_step: Bootstrap horizon of the ego Q-TD loss
        buffer_capacity: Replay ring size
        env_steps: Interaction budget
        learning_steps_per_episode: Learning phases run after each episode
        itd_steps_per_iteration: ITD outer steps inside each learning phase
        reward_loss_enabled: Train Φ and w^ego on the ego reward loss
        task_inference_window: Most recent transitions used by task inference
        plain_q: Plain Q head (d=1, w^ego fixed at 1, no reward/SF losses)
        eval_every: Env steps between greedy evaluations (0 disables)
        eval_episodes: Episodes per evaluation point
    """
    itd: ItdConfig = field(default_factory=ItdConfig)
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    target_period: int = 1000
    gamma: float = 0.9
    gpi_enabled: bool = True
    task_inference_enabled: bool = True
    psi_loss_scale: Optional[float] = None
    lr: float = 1e-4
    batch: int = 64
    n_step: int = 1
    buffer_capacity: int = 100_000
    env_steps: int = 20_000
    learning_steps_per_episode: int = 16
    itd_steps_per_iteration: int = 1
    reward_loss_enabled: bool = True
    task_inference_window: int = 5000
    plain_q: bool = False
    eval_every: int = 2000
    eval_episodes: int = 10

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ConfigError("gamma must lie in [0, 1)")
        if self.target_period < 1:
            raise ConfigError("target_period must be at least 1")
        if self.n_step < 1:
            raise ConfigError("n_step must be at least 1")
        if self.batch < 1 or self.buffer_capacity < 1:
            raise ConfigError("batch and buffer_capacity must be positive")
        if self.env_steps < 0 or self.eval_every < 0 or self.eval_episodes < 1:
            raise ConfigError("invalid interaction or evaluation budget")
        if self.lr < 0:
            raise ConfigError("lr cannot be negative")
        if self.psi_loss_scale is not None and self.psi_loss_scale < 0:
            raise ConfigError("psi_loss_scale cannot be negative")

    @property
    def sf_scale(self) -> float:
        if self.psi_loss_scale is not None:
            return self.psi_loss_scale
        return 1.0 / self.itd.network.cumulant_dim


@dataclass
class DemoConfig:
    """Demonstration generation settings.

    Attributes:
        tasks: Task preset names, one demonstrator per entry (ids 1..K)
        temperature: Boltzmann temperature ν of the demonstrators
        episodes_per_agent: Trajectories per demonstrator
    """
    tasks: Tuple[str, ...] = ("collect-red", "collect-green")
    temperature: float = 0.1
    episodes_per_agent: int = 200

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        check_task_names(self.tasks, "demo task")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.episodes_per_agent < 1:
            raise ConfigError("episodes_per_agent must be at least 1")


@dataclass
class EvalConfig:
    """Evaluation settings shared by the harness experiments.

    Attributes:
        episodes: Episodes per normalized-return estimate
        learner: "q_baseline" trains a Q agent on recovered rewards,
            "planner" solves the recovered-reward MDP exactly
        shots: Shot counts for few-shot transfer
        transfer_tasks: Transfer task names
        imitation_phases: Ego task names for the imitation schedule
        cumulant_dims: Dimensions for the sweep
        n_mdps: Random MDPs for the theorem suites
        itd_mdps: How many of those also get the learned policy-invariance check
        workers: Parallel processes for sweeps (1 = in-process)
    """
    episodes: int = 100
    learner: str = "q_baseline"
    shots: Tuple[int, ...] = (0, 1, 25)
    transfer_tasks: Tuple[str, ...] = ("R+G", "R-G", "-R+G", "-R-G")
    imitation_phases: Tuple[str, ...] = ("collect-red", "collect-green", "R+G")
    cumulant_dims: Tuple[int, ...] = (1, 2, 4, 8, 16)
    n_mdps: int = 100
    itd_mdps: int = 20
    workers: int = 1

    def __post_init__(self):
        self.shots = tuple(int(s) for s in self.shots)
        self.transfer_tasks = tuple(self.transfer_tasks)
        self.imitation_phases = tuple(self.imitation_phases)
        check_task_names(self.transfer_tasks, "transfer task")
        check_task_names(self.imitation_phases, "imitation phase")
        self.cumulant_dims = tuple(int(d) for d in self.cumulant_dims)
        if self.episodes < 1:
            raise ConfigError("episodes must be at least 1")
        if self.learner not in ("q_baseline", "planner"):
            raise ConfigError(f"unknown learner: {self.learner}")
        if any(s < 0 for s in self.shots):
            raise ConfigError("shots cannot be negative")
        if self.n_mdps < 1 or self.itd_mdps < 0 or self.workers < 1:
            raise ConfigError("invalid suite sizes")


@dataclass
class ExperimentConfig:
    """Top-level configuration consumed by the CLI.

    Attributes:
        map_path: CoinGrid map file; None selects the canonical grid
        ego_task: Task preset the ego-agent is rewarded for
        demo: Demonstration settings
        itd: ITD settings
        psiphi: ΨΦ settings
        eval: Evaluation settings
    """
    map_path: Optional[str] = None
    ego_task: str = "collect-red"
    demo: DemoConfig = field(default_factory=DemoConfig)
    itd: ItdConfig = field(default_factory=ItdConfig)
    psiphi: PsiPhiConfig = field(default_factory=PsiPhiConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        check_task_names([self.ego_task], "ego task")
        if self.map_path is not None and not Path(self.map_path).is_file():
            raise ConfigError(f"map file not found: {self.map_path}")


def config_from_dict(cls: Type[T], data: Dict[str, Any], path: str = "") -> T:
    """Build a (nested) config dataclass from a plain mapping.

    Args:
        cls: Target dataclass type
        data: Mapping loaded from a config file
        path: Dotted key prefix used in error messages

    Returns:
        Instance of cls with defaults for missing keys

    Raises:
        ConfigError: On unknown keys, wrong nesting or failed validation
    """
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {path or 'config'}: {', '.join(unknown)}")

    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = config_from_dict(hint, value, f"{path}{key}.")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {path or 'config'}: {str(e)}")
