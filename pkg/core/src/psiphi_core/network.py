"""Shared-torso model with a cumulant head, ensembled SF heads and preferences.

Parameters live in a flat dict of arrays keyed by block name:

    torso.{i}.W, torso.{i}.b      affine+ReLU layers
    phi.W, phi.b                  cumulant head Φ(s, ·)
    psi.{head}.{m}.W / .b         SF head of `head`, ensemble member m
    w.{head}                      preference vector of `head`

Heads output |A|·d values reshaped to (|A|, d). Arrays are never modified
in place, so a ParamStore can be copied cheaply and shared read-only.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .gridworld import Observation
from .interfaces import ShapeMismatch, UnknownAgentId
from .parameters import NetworkConfig
from .seeding import SeedStream

logger = logging.getLogger(__name__)

EGO = "ego"


def head_id(agent: Union[int, str]) -> str:
    return agent if isinstance(agent, str) else str(int(agent))


def agent_heads(n_agents: int, ego: bool = True) -> Tuple[str, ...]:
    heads = tuple(str(k) for k in range(1, n_agents + 1))
    return heads + (EGO,) if ego else heads


@dataclass
class ParamStore:
    """All learnable parameters plus the shape they were built for.

    Attributes:
        arrays: Parameter blocks keyed as described in the module docstring
        input_size: Length of observation vectors
        n_actions: |A|
        head_ids: SF head ids ("1".."K" and optionally "ego")
        config: Network shape
    """
    arrays: Dict[str, np.ndarray]
    input_size: int
    n_actions: int
    head_ids: Tuple[str, ...]
    config: NetworkConfig

    @property
    def d(self) -> int:
        return self.config.cumulant_dim

    @property
    def ensemble_size(self) -> int:
        return self.config.ensemble_size

    @property
    def n_layers(self) -> int:
        return len(self.config.hidden_sizes)

    @property
    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def check_head(self, head: Union[int, str]) -> str:
        head = head_id(head)
        if head not in self.head_ids:
            raise UnknownAgentId(f"no head {head!r}; heads are {list(self.head_ids)}")
        return head

    def w(self, head: Union[int, str]) -> np.ndarray:
        return self.arrays[f"w.{self.check_head(head)}"]

    def copy(self) -> "ParamStore":
        return ParamStore(
            arrays={k: v.copy() for k, v in self.arrays.items()},
            input_size=self.input_size,
            n_actions=self.n_actions,
            head_ids=self.head_ids,
            config=self.config,
        )

    def with_arrays(self, updates: Dict[str, np.ndarray]) -> "ParamStore":
        """New store with some blocks replaced; other blocks are shared."""
        arrays = dict(self.arrays)
        for key, value in updates.items():
            if key not in arrays:
                raise ShapeMismatch(f"unknown parameter block {key!r}")
            value = np.asarray(value, dtype=np.float64)
            if value.shape != arrays[key].shape:
                raise ShapeMismatch(f"{key}: shape {value.shape} != {arrays[key].shape}")
            arrays[key] = value
        return ParamStore(arrays, self.input_size, self.n_actions, self.head_ids, self.config)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    def equals(self, other: "ParamStore") -> bool:
        """Bitwise equality of every block."""
        return (self.arrays.keys() == other.arrays.keys()
                and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays))


def init_params(
    input_size: int,
    n_actions: int,
    head_ids: Sequence[str],
    config: Optional[NetworkConfig] = None,
    seed: int = 0
) -> ParamStore:
    """Allocate a ParamStore.

    Affine blocks use U(-1/√fan_in, 1/√fan_in) (or zeros with
    config.init == "zeros"); preference vectors always start at zero.
    """
    config = config or NetworkConfig()
    rng = SeedStream(seed).next()
    zeros = config.init == "zeros"
    out = n_actions * config.cumulant_dim
    arrays: Dict[str, np.ndarray] = {}

    def affine(prefix: str, fan_in: int, fan_out: int) -> None:
        if zeros:
            arrays[f"{prefix}.W"] = np.zeros((fan_in, fan_out))
            arrays[f"{prefix}.b"] = np.zeros(fan_out)
            return
        bound = 1.0 / np.sqrt(fan_in)
        arrays[f"{prefix}.W"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        arrays[f"{prefix}.b"] = rng.uniform(-bound, bound, size=fan_out)

    width = input_size
    for i, hidden in enumerate(config.hidden_sizes):
        affine(f"torso.{i}", width, hidden)
        width = hidden
    affine("phi", width, out)
    for head in head_ids:
        for m in range(config.ensemble_size):
            affine(f"psi.{head}.{m}", width, out)
    for head in head_ids:
        arrays[f"w.{head}"] = np.zeros(config.cumulant_dim)

    params = ParamStore(arrays, input_size, n_actions, tuple(head_ids), config)
    logger.debug(f"Initialized {params.n_parameters} parameters for heads {list(head_ids)}")
    return params


@dataclass
class Forward:
    """Outputs of a forward pass plus what backward() needs.

    Attributes:
        phi: (B, |A|, d) cumulants, or None if not requested
        psi: head → (M, B, |A|, d) successor features
        inputs: Input to each torso layer, then the torso output last
        pre: Pre-activation of each torso layer
    """
    phi: Optional[np.ndarray]
    psi: Dict[str, np.ndarray]
    inputs: List[np.ndarray] = field(repr=False)
    pre: List[np.ndarray] = field(repr=False)

    @property
    def features(self) -> np.ndarray:
        return self.inputs[-1]


def as_batch(params: ParamStore, obs: Union[np.ndarray, Observation, Sequence[Observation]]) -> np.ndarray:
    """Observation(s) as a float (B, input_size) array."""
    if isinstance(obs, Observation):
        x = obs.vector()[None, :]
    elif isinstance(obs, (list, tuple)) and obs and isinstance(obs[0], Observation):
        x = np.stack([o.vector() for o in obs])
    else:
        x = np.asarray(obs, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.input_size:
        raise ShapeMismatch(f"observation width {x.shape[-1]} != {params.input_size}")
    return x


def forward(
    params: ParamStore,
    obs: Union[np.ndarray, Observation, Sequence[Observation]],
    heads: Optional[Iterable[Union[int, str]]] = None,
    with_phi: bool = True
) -> Forward:
    """Evaluate the torso and the requested heads.

    Args:
        params: Parameters
        obs: One observation or a batch
        heads: SF heads to evaluate; None means all
        with_phi: Whether to evaluate the cumulant head

    Raises:
        ShapeMismatch: If the observation width is wrong
        UnknownAgentId: If a requested head does not exist
    """
    x = as_batch(params, obs)
    heads = params.head_ids if heads is None else [params.check_head(h) for h in heads]
    B, A, d = x.shape[0], params.n_actions, params.d

    inputs, pre = [x], []
    h = x
    for i in range(params.n_layers):
        z = h @ params[f"torso.{i}.W"] + params[f"torso.{i}.b"]
        pre.append(z)
        h = np.maximum(z, 0.0)
        inputs.append(h)
    if params.n_layers == 0:
        inputs.append(h)

    phi = (h @ params["phi.W"] + params["phi.b"]).reshape(B, A, d) if with_phi else None
    psi = {}
    for head in heads:
        psi[head] = np.stack([
            (h @ params[f"psi.{head}.{m}.W"] + params[f"psi.{head}.{m}.b"]).reshape(B, A, d)
            for m in range(params.ensemble_size)
        ])
    return Forward(phi=phi, psi=psi, inputs=inputs, pre=pre)


def backward(
    params: ParamStore,
    fwd: Forward,
    dphi: Optional[np.ndarray] = None,
    dpsi: Optional[Dict[str, np.ndarray]] = None
) -> Dict[str, np.ndarray]:
    """Reverse pass from output gradients to parameter gradients.

    Only blocks that receive gradient appear in the result: phi.* when dphi
    is given, psi.{head}.* for heads in dpsi, and the torso whenever any
    head does.
    """
    h = fwd.features
    B = h.shape[0]
    grads: Dict[str, np.ndarray] = {}
    dh = np.zeros_like(h)
    touched = False

    if dphi is not None:
        g = dphi.reshape(B, -1)
        grads["phi.W"] = h.T @ g
        grads["phi.b"] = g.sum(axis=0)
        dh += g @ params["phi.W"].T
        touched = True
    for head, d_out in (dpsi or {}).items():
        for m in range(params.ensemble_size):
            g = d_out[m].reshape(B, -1)
            grads[f"psi.{head}.{m}.W"] = h.T @ g
            grads[f"psi.{head}.{m}.b"] = g.sum(axis=0)
            dh += g @ params[f"psi.{head}.{m}.W"].T
        touched = True

    if touched:
        for i in reversed(range(params.n_layers)):
            dz = dh * (fwd.pre[i] > 0)
            grads[f"torso.{i}.W"] = fwd.inputs[i].T @ dz
            grads[f"torso.{i}.b"] = dz.sum(axis=0)
            dh = dz @ params[f"torso.{i}.W"].T
    return grads


def q_values(psi: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-member Q = Ψᵀw, shape (M, B, |A|)."""
    return np.einsum("mbad,d->mba", psi, w)


def pessimistic_q(psi: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Minimum over ensemble members, shape (B, |A|)."""
    return q_values(psi, w).min(axis=0)


def greedy_actions(params: ParamStore, obs: np.ndarray, head: Union[int, str], w: Optional[np.ndarray] = None) -> np.ndarray:
    """argmax_a of the pessimistic Q of one head under w (default: the head's own w)."""
    head = params.check_head(head)
    fwd = forward(params, obs, heads=[head], with_phi=False)
    w = params.w(head) if w is None else w
    return pessimistic_q(fwd.psi[head], w).argmax(axis=1)


@dataclass
class TargetStore:
    """Frozen parameter copy used for bootstrap targets.

    Attributes:
        params: The frozen copy
        update_period: Learner steps between refreshes
        last_refresh: Learner step of the most recent refresh
    """
    params: ParamStore
    update_period: int
    last_refresh: int = 0

    @classmethod
    def of(cls, params: ParamStore, update_period: int) -> "TargetStore":
        return cls(params.copy(), update_period, 0)

    def maybe_refresh(self, online: ParamStore, step: int) -> bool:
        if step - self.last_refresh < self.update_period:
            return False
        self.params = online.copy()
        self.last_refresh = step
        logger.debug(f"Target network refreshed at learner step {step}")
        return True
