"""Adam on ParamStore blocks."""
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from .network import ParamStore
from .parameters import OptimizerConfig


@dataclass
class AdamState:
    """First and second moments plus the step count of every block seen so far."""
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: Dict[str, int] = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            t=dict(self.t),
        )


def sgd_step(
    params: ParamStore,
    grads: Dict[str, np.ndarray],
    state: Optional[AdamState] = None,
    lr: float = 1e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8
) -> Tuple[ParamStore, AdamState]:
    """One bias-corrected Adam update of the blocks present in grads.

    Blocks absent from grads keep their values and their moments; each block
    counts its own steps. Neither input is modified.
    """
    state = AdamState() if state is None else state.copy()
    updates = {}
    for key, g in grads.items():
        p = params[key]
        t = state.t.get(key, 0) + 1
        m = beta1 * state.m.get(key, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(key, np.zeros_like(p)) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        updates[key] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        state.m[key], state.v[key], state.t[key] = m, v, t
    return params.with_arrays(updates), state


class Adam:
    """Stateful wrapper around sgd_step for training loops."""

    def __init__(self, config: Optional[OptimizerConfig] = None, lr: Optional[float] = None):
        self.config = config or OptimizerConfig()
        self.lr = self.config.lr if lr is None else lr
        self.state = AdamState()

    def step(self, params: ParamStore, grads: Dict[str, np.ndarray]) -> ParamStore:
        params, self.state = sgd_step(
            params, grads, self.state, self.lr,
            self.config.beta1, self.config.beta2, self.config.eps,
        )
        return params
