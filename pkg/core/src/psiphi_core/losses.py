"""Losses with analytic gradients.

Every loss returns a LossResult whose grads hold exactly the parameter
blocks the loss trains; blocks it must not touch are absent rather than
zero. Target stores are read-only inputs and never receive gradient.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Optional, Union

import numpy as np
from scipy.special import logsumexp

from .demos import DemoBatch, EgoBatch
from .interfaces import InvalidArgument, NonFiniteLoss
from .network import EGO, ParamStore, backward, forward, pessimistic_q, q_values

logger = logging.getLogger(__name__)

L1_DEAD_ZONE = 1e-8


class LossSpec(str, Enum):
    """Available losses.

    BCQ: behavior cloning through Q = Ψᵀw (plus the L1 prior on w)
    ITD: inverse TD consistency of Φ with the agents' Ψ
    R: ego reward regression Φᵀw^ego ≈ r
    TDQ: ego Bellman error on Ψᵀw^ego
    TDPSI: ego SF consistency with the frozen cumulants
    L1: sparsity prior on preference vectors
    """
    BCQ = "bcq"
    ITD = "itd"
    R = "reward"
    TDQ = "td_q"
    TDPSI = "td_psi"
    L1 = "l1"


@dataclass
class LossResult:
    value: float
    grads: Dict[str, np.ndarray]
    metrics: Dict[str, float] = field(default_factory=dict)


def _finish(name: str, value: float, grads: Dict[str, np.ndarray], metrics: Dict[str, float]) -> LossResult:
    if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        logger.error(f"{name} loss is not finite: {value}")
        raise NonFiniteLoss(f"{name} loss or gradient is not finite")
    return LossResult(float(value), grads, metrics)


def add_grads(*parts: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    total: Dict[str, np.ndarray] = {}
    for part in parts:
        for key, g in part.items():
            total[key] = total[key] + g if key in total else g
    return total


def l1_subgradient(w: np.ndarray, coef: float) -> np.ndarray:
    """coef·sign(w) outside |w| ≤ 1e-8, zero inside."""
    return coef * np.where(np.abs(w) > L1_DEAD_ZONE, np.sign(w), 0.0)


def l1_loss(params: ParamStore, heads: Iterable[Union[int, str]], coef: float) -> LossResult:
    value, grads = 0.0, {}
    for head in heads:
        w = params.w(head)
        value += coef * np.abs(w).sum()
        grads[f"w.{params.check_head(head)}"] = l1_subgradient(w, coef)
    return _finish("L1", value, grads, {"l1_w": value})


def bc_nll(logits: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """-log softmax(logits)[action] along the last axis."""
    log_probs = logits - logsumexp(logits, axis=-1, keepdims=True)
    return -np.take_along_axis(log_probs, actions[..., None], axis=-1)[..., 0]


def _heads_in(params: ParamStore, agent_ids: np.ndarray):
    return [(params.check_head(int(k)), agent_ids == k) for k in np.unique(agent_ids)]


def bcq_loss(params: ParamStore, batch: DemoBatch, lambda_w: float = 0.0) -> LossResult:
    """Mean -log softmax_a(Ψᵏ(s, ·)ᵀwᵏ)[a] over batch and ensemble members.

    Trains torso, psi.k and w.k; the L1 prior λ_w‖wᵏ‖₁ is included for
    every head present in the batch. Φ receives no gradient.

    Raises:
        UnknownAgentId: If a batch agent id has no head
    """
    if len(batch) == 0:
        raise InvalidArgument("batch must be non-empty")
    heads = _heads_in(params, batch.agent_ids)
    fwd = forward(params, batch.obs, heads=[h for h, _ in heads], with_phi=False)
    M, B = params.ensemble_size, len(batch)
    rows = np.arange(B)
    nll_total, l1_total = 0.0, 0.0
    dpsi, dw, metrics = {}, {}, {}
    correct = np.zeros(B, dtype=bool)

    for head, mask in heads:
        psi = fwd.psi[head]
        w = params.w(head)
        logits = q_values(psi, w)
        nll = bc_nll(logits, np.broadcast_to(batch.actions, (M, B)))
        nll_total += float((nll * mask).sum()) / (M * B)
        probs = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        probs[:, rows, batch.actions] -= 1.0
        dlogits = probs * mask[None, :, None] / (M * B)
        dpsi[head] = dlogits[..., None] * w
        dw[head] = np.einsum("mba,mbad->d", dlogits, psi) + l1_subgradient(w, lambda_w)
        l1_total += lambda_w * float(np.abs(w).sum())
        hits = logits.min(axis=0).argmax(axis=1) == batch.actions
        correct |= hits & mask
        metrics[f"accuracy_{head}"] = float(hits[mask].mean())

    grads = backward(params, fwd, dphi=None, dpsi=dpsi)
    for head, g in dw.items():
        grads[f"w.{head}"] = g
    metrics.update({"loss_bcq": nll_total, "l1_w": l1_total, "accuracy": float(correct.mean())})
    return _finish("BC-Q", nll_total + l1_total, grads, metrics)


def itd_loss(params: ParamStore, targets: ParamStore, batch: DemoBatch, gamma: float) -> LossResult:
    """Mean over batch and members of ‖Ψᵏ(s,a) − Φ(s,a) − γ·Ψ̃ᵏ(s',a')‖².

    Ψ̃ comes from targets; pairs with has_next = 0 drop the bootstrap.
    Trains torso, phi and psi.k; preference vectors receive no gradient.

    Raises:
        UnknownAgentId: If a batch agent id has no head
    """
    if len(batch) == 0:
        raise InvalidArgument("batch must be non-empty")
    heads = _heads_in(params, batch.agent_ids)
    names = [h for h, _ in heads]
    fwd = forward(params, batch.obs, heads=names, with_phi=True)
    tgt = forward(targets, batch.next_obs, heads=names, with_phi=False)
    M, B = params.ensemble_size, len(batch)
    rows = np.arange(B)
    phi_sa = fwd.phi[rows, batch.actions]
    dphi = np.zeros_like(fwd.phi)
    dpsi = {}
    value = 0.0
    bootstrap = (gamma * batch.has_next)[None, :, None]

    for head, mask in heads:
        psi_sa = fwd.psi[head][:, rows, batch.actions]
        psi_next = tgt.psi[head][:, rows, batch.next_actions]
        td = (psi_sa - phi_sa[None] - bootstrap * psi_next) * mask[None, :, None]
        value += float((td ** 2).sum()) / (M * B)
        g = 2.0 * td / (M * B)
        d_head = np.zeros_like(fwd.psi[head])
        d_head[:, rows, batch.actions] = g
        dpsi[head] = d_head
        dphi[rows, batch.actions] -= g.sum(axis=0)

    grads = backward(params, fwd, dphi=dphi, dpsi=dpsi)
    return _finish("ITD", value, grads, {"loss_itd": value})


def reward_loss(params: ParamStore, batch: EgoBatch) -> LossResult:
    """Mean of (Φ(s,a)ᵀw^ego − r)² over one-step rewards; trains torso, phi and w.ego."""
    if len(batch) == 0:
        raise InvalidArgument("batch must be non-empty")
    fwd = forward(params, batch.obs, heads=[], with_phi=True)
    B = len(batch)
    rows = np.arange(B)
    w = params.w(EGO)
    phi_sa = fwd.phi[rows, batch.actions]
    err = phi_sa @ w - batch.rewards_1
    value = float(np.mean(err ** 2))
    dphi = np.zeros_like(fwd.phi)
    dphi[rows, batch.actions] = (2.0 / B) * err[:, None] * w
    grads = backward(params, fwd, dphi=dphi)
    grads[f"w.{EGO}"] = (2.0 / B) * phi_sa.T @ err
    return _finish("reward", value, grads, {"loss_r": value})


def q_td_loss(params: ParamStore, targets: ParamStore, batch: EgoBatch) -> LossResult:
    """Ego Bellman error with a pessimistic max target from the frozen store.

    (Ψ(s,a)ᵀw − r − disc · max_a' min_m Ψ̃_m(s',a')ᵀw)², averaged over batch
    and members, using the batch's n-step rewards and discounts. w^ego is a
    constant here; only torso and psi.ego are trained.
    """
    if len(batch) == 0:
        raise InvalidArgument("batch must be non-empty")
    fwd = forward(params, batch.obs, heads=[EGO], with_phi=False)
    tgt = forward(targets, batch.next_obs, heads=[EGO], with_phi=False)
    M, B = params.ensemble_size, len(batch)
    rows = np.arange(B)
    w = params.w(EGO)
    q_sa = q_values(fwd.psi[EGO], w)[:, rows, batch.actions]
    target = batch.rewards + batch.discounts * pessimistic_q(tgt.psi[EGO], w).max(axis=1)
    err = q_sa - target[None, :]
    value = float(np.mean(err ** 2))
    d_head = np.zeros_like(fwd.psi[EGO])
    d_head[:, rows, batch.actions] = (2.0 * err / (M * B))[..., None] * w
    grads = backward(params, fwd, dpsi={EGO: d_head})
    return _finish("TD-Q", value, grads, {"loss_q": value})


def sf_td_loss(params: ParamStore, targets: ParamStore, batch: EgoBatch, scale: float = 1.0) -> LossResult:
    """scale · mean ‖Ψ^ego(s,a) − Φ̃(s,a) − disc · Ψ̃^ego(s',a')‖² on one-step transitions.

    Φ̃ and Ψ̃ come from the frozen store; a' is the greedy action of the
    frozen pessimistic Q under w^ego. Trains torso and psi.ego only.
    """
    if len(batch) == 0:
        raise InvalidArgument("batch must be non-empty")
    fwd = forward(params, batch.obs, heads=[EGO], with_phi=False)
    tgt_now = forward(targets, batch.obs, heads=[], with_phi=True)
    tgt_next = forward(targets, batch.next_obs_1, heads=[EGO], with_phi=False)
    M, B = params.ensemble_size, len(batch)
    rows = np.arange(B)
    w = params.w(EGO)
    next_actions = pessimistic_q(tgt_next.psi[EGO], w).argmax(axis=1)
    psi_sa = fwd.psi[EGO][:, rows, batch.actions]
    phi_sa = tgt_now.phi[rows, batch.actions]
    psi_next = tgt_next.psi[EGO][:, rows, next_actions]
    td = psi_sa - phi_sa[None] - batch.discounts_1[None, :, None] * psi_next
    value = scale * float((td ** 2).sum()) / (M * B)
    d_head = np.zeros_like(fwd.psi[EGO])
    d_head[:, rows, batch.actions] = scale * 2.0 * td / (M * B)
    grads = backward(params, fwd, dpsi={EGO: d_head})
    return _finish("TD-Psi", value, grads, {"loss_psi": value})


def compute_loss(
    spec: Union[LossSpec, str],
    params: ParamStore,
    batch: Union[DemoBatch, EgoBatch, None] = None,
    targets: Optional[ParamStore] = None,
    **options
) -> LossResult:
    """Dispatch on a LossSpec.

    Options: lambda_w (BCQ, L1), gamma (ITD), scale (TDPSI), heads (L1).
    """
    spec = LossSpec(spec)
    if spec is LossSpec.BCQ:
        return bcq_loss(params, batch, options.get("lambda_w", 0.0))
    if spec is LossSpec.ITD:
        return itd_loss(params, targets, batch, options["gamma"])
    if spec is LossSpec.R:
        return reward_loss(params, batch)
    if spec is LossSpec.TDQ:
        return q_td_loss(params, targets, batch)
    if spec is LossSpec.TDPSI:
        return sf_td_loss(params, targets, batch, options.get("scale", 1.0))
    return l1_loss(params, options.get("heads", params.head_ids), options.get("lambda_w", 0.0))


def grad(
    params: ParamStore,
    spec: Union[LossSpec, str],
    batch: Union[DemoBatch, EgoBatch, None] = None,
    targets: Optional[ParamStore] = None,
    **options
) -> Dict[str, np.ndarray]:
    """Gradient blocks of one loss; see compute_loss."""
    return compute_loss(spec, params, batch, targets, **options).grads
