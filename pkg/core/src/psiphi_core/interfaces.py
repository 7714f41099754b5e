from abc import ABC, abstractmethod
from typing import Any, Dict, Optional, Tuple

import numpy as np


class PsiPhiError(Exception):
    """Base exception for psiphi errors."""
    pass


class ConfigError(PsiPhiError, ValueError):
    """Configuration file or dataclass failed validation."""
    pass


class InvalidArgument(PsiPhiError, ValueError):
    """Argument is vacuous or out of range (empty task list, empty seeds...)."""
    pass


class StateSpaceTooLarge(PsiPhiError):
    """Enumerating a grid would exceed the configured state cap."""
    pass


class NonConvergence(PsiPhiError):
    """An iterative solver hit its sweep limit before reaching tolerance."""
    pass


class SingularSystem(PsiPhiError):
    """A linear solve failed; signals malformed inputs since γ < 1."""
    pass


class EmptyDataset(PsiPhiError):
    """No usable demonstration pairs to sample from."""
    pass


class EmptyBuffer(PsiPhiError):
    """Sampling was requested from an empty replay buffer."""
    pass


class MalformedRecord(PsiPhiError):
    """A persisted record could not be parsed.

    Attributes:
        line: 1-based line number of the offending record, if known
    """

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownAgentId(PsiPhiError, KeyError):
    """A loss or query named a head that the parameter store does not hold."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown agent id"


class ShapeMismatch(PsiPhiError, ValueError):
    """Input or parameter shapes disagree with the model construction."""
    pass


class NonFiniteLoss(PsiPhiError, FloatingPointError):
    """A loss value or its gradient contains NaN or inf."""
    pass


class InvariantViolation(PsiPhiError):
    """A property check failed in strict mode."""
    pass


class EnvironmentInterface(ABC):
    """Interface for episodic environments driven by an ego-agent.

    An environment owns the current episode state and a task that defines
    the reward. Observations are returned as flat float vectors so that
    learners do not need to know the encoding.

    Typical usage:
        obs = env.reset()
        done = False
        while not done:
            obs, reward, done, info = env.step(action)
    """

    @property
    @abstractmethod
    def n_actions(self) -> int:
        """Number of discrete actions, identical in every state."""
        pass

    @property
    @abstractmethod
    def observation_size(self) -> int:
        """Length of the vectors returned by reset() and step()."""
        pass

    @abstractmethod
    def reset(self) -> np.ndarray:
        """Start a new episode.

        Returns:
            Observation vector of the start state
        """
        pass

    @abstractmethod
    def step(self, action: int) -> Tuple[np.ndarray, float, bool, Dict[str, Any]]:
        """Advance the episode by one action.

        Args:
            action: Action index in [0, n_actions)

        Returns:
            Tuple of (observation, reward, done, info). info carries at least
            the ground-truth feature vector under key "features".

        Raises:
            InvalidArgument: If action is out of range
            RuntimeError: If called after the episode ended without reset()
        """
        pass


class PolicyInterface(ABC):
    """Interface for anything that maps observations to actions.

    Used by evaluation code so that learned agents, baselines and planners
    are rolled out the same way.
    """

    @abstractmethod
    def act(self, obs: np.ndarray, rng: np.random.Generator) -> int:
        """Choose an action for a single observation vector.

        Args:
            obs: Observation vector
            rng: Generator for any stochastic choice

        Returns:
            Action index
        """
        pass
