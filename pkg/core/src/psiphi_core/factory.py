from typing import Optional

from .gridworld import (
    CoinGridEnv,
    GridSpec,
    N_ACTIONS,
    TaskVector,
    canonical_coingrid,
    load_map,
)
from .network import ParamStore, agent_heads, init_params
from .oracle import TabularModel, build_tabular_model
from .parameters import ExperimentConfig, NetworkConfig


class ComponentFactory:
    """Builds the environment, its exact model and learner parameters from config.

    Keeps every entry point (CLI subcommands, tests, sweep workers) on the
    same map, gamma and head layout.
    """

    @staticmethod
    def create_spec(config: ExperimentConfig) -> GridSpec:
        """Grid from config.map_path, or the canonical grid when unset.

        Raises:
            MalformedRecord: If the map file cannot be parsed
        """
        return load_map(config.map_path) if config.map_path else canonical_coingrid()

    @staticmethod
    def create_env(config: ExperimentConfig, task: Optional[str] = None) -> CoinGridEnv:
        """Environment rewarding `task` (default: the ego task)."""
        spec = ComponentFactory.create_spec(config)
        return CoinGridEnv(spec, TaskVector.named(task or config.ego_task))

    @staticmethod
    def create_model(config: ExperimentConfig) -> TabularModel:
        """Exact tabular model of the configured grid (cached per grid and gamma)."""
        return build_tabular_model(ComponentFactory.create_spec(config), config.itd.gamma)

    @staticmethod
    def create_params(
        observation_size: int,
        n_agents: int,
        network: Optional[NetworkConfig] = None,
        seed: int = 0,
        ego: bool = True,
        n_actions: int = N_ACTIONS
    ) -> ParamStore:
        """ParamStore with heads "1".."K" and optionally "ego".

        Args:
            observation_size: Input width
            n_agents: Number of demonstrator heads K
            network: Network shape
            seed: Initialization seed
            ego: Whether to add the ego head
            n_actions: |A|
        """
        return init_params(observation_size, n_actions, agent_heads(n_agents, ego), network, seed)
