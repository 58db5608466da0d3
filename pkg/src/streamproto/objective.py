"""Episode loss: self-distillation, entropy and new-cluster terms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import numerics as nx
from .encoder import ParameterSet, bind, encode
from .memory import PrototypeMemory, create_prototype, e_step, m_step

__all__ = [
    "LossBreakdown",
    "LossConfig",
    "entropy_loss_term",
    "episode_loss",
    "new_cluster_loss",
    "pseudo_label",
    "self_loss_term",
]


@dataclass(frozen=True)
class LossConfig:
    lambda_ent: float = 0.0
    lambda_new: float = 0.5
    beta_mean: float = 0.5
    clamp_eps: float = 1e-4
    stop_prototype_gradient: bool = False

    def __post_init__(self):
        if self.lambda_ent < 0 or self.lambda_new < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 < self.beta_mean < 1.0:
            raise ValueError("beta_mean must lie in (0, 1)")
        if not 0.0 < self.clamp_eps <= 0.01:
            raise ValueError("clamp_eps must lie in (0, 0.01]")


@dataclass
class LossBreakdown:
    l_self: Any
    l_ent: Any
    l_new: Any
    total: Any
    p_new: Any
    # per-frame discrete decisions; equal signatures mean the loss is smooth
    # between the two parameter settings
    branches: tuple = ()
    memory: PrototypeMemory | None = None
    trace: list = field(default_factory=list)
    targets: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def floats(self) -> dict[str, float]:
        return {k: float(nx.value(getattr(self, k))) for k in ("l_self", "l_ent", "l_new", "total", "p_new")}


def pseudo_label(z, mem: PrototypeMemory, params, tau=None) -> np.ndarray:
    """Sharpened assignment target at temperature ``tau_ratio * tau``.

    Always returned as a constant array.  A ratio of zero means a one-hot
    argmax with ties broken toward the lowest index.
    """
    if not mem.ids:
        raise ValueError("pseudo labels need a nonempty memory")
    tau = float(nx.value(params.tau if tau is None else tau))
    cos = nx.row_cosine(nx.value(mem.means), nx.value(z))
    if params.tau_ratio == 0.0:
        out = np.zeros_like(cos)
        out[int(np.argmax(cos))] = 1.0
        return out
    return nx.softmax(cos / (params.tau_ratio * tau))


def self_loss_term(ytilde, yhat_aug):
    """Cross-entropy of the augmented-view assignment against the target."""
    yt, ya = nx.value(ytilde), nx.value(yhat_aug)
    if yt.shape != ya.shape:
        raise ValueError(f"length mismatch: {yt.shape} vs {ya.shape}")
    # zero-target entries contribute nothing, even where yhat_aug is 0
    idle = yt == 0
    safe = nx.add(yhat_aug, np.where(idle, 1.0, 0.0)) if idle.any() else yhat_aug
    return nx.neg(nx.sum_(nx.mul(ytilde, nx.log(safe))))


def entropy_loss_term(yhat):
    """Shannon entropy in nats, 0 log 0 := 0."""
    yv = nx.value(yhat)
    mask = yv > 0
    safe = nx.add(yhat, np.where(mask, 0.0, 1.0))
    return nx.neg(nx.sum_(nx.mul(np.where(mask, 1.0, 0.0), nx.mul(yhat, nx.log(safe)))))


def _beta_params(mu: float) -> tuple[float, float]:
    if not 0.0 < mu < 1.0:
        raise ValueError("Beta mean must lie in (0, 1)")
    a = 4.0 * mu
    return a, 4.0 - a


def new_cluster_loss(p_new, mu: float, eps: float = 1e-4):
    """Negative log Beta density of the episode-average new-cluster rate."""
    a, b = _beta_params(mu)
    pv = float(nx.value(p_new))
    if pv < eps or pv > 1.0 - eps:
        p_new = min(max(pv, eps), 1.0 - eps)
    log_norm = math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)
    log_pdf = nx.add(nx.mul(a - 1.0, nx.log(p_new)), nx.mul(b - 1.0, nx.log(nx.sub(1.0, p_new))))
    return nx.sub(log_norm, log_pdf)


def episode_loss(
    frames: Sequence,
    mem: PrototypeMemory,
    params,
    config: LossConfig,
    *,
    alpha: float = 0.5,
    replay: LossBreakdown | None = None,
) -> LossBreakdown:
    """Run one episode in the online order and accumulate the three losses.

    ``params`` is either a :class:`ParameterSet` (values only) or the node
    namespace from :func:`~streamproto.encoder.bind`.  Per frame: encode,
    E-step, M-step or creation, pseudo label on the updated memory, E-step of
    the second view, loss accumulation.

    With ``config.stop_prototype_gradient`` the memory is detached after every
    update.  ``replay`` takes a previous result and reuses its pseudo labels
    (and, in stop mode, its memory values), i.e. exactly the quantities that
    are constants for differentiation; finite differences need this.
    """
    if not frames:
        raise ValueError("episode must contain at least one frame")
    T = len(frames)
    l_self = 0.0
    l_ent = 0.0
    p_new = 0.0
    branches = []
    trace = []
    targets = []
    history = []
    for t, frame in enumerate(frames):
        z = encode(frame.features, params)
        out = e_step(z, mem, params.beta, params.gamma, params.tau)
        had_protos = bool(mem.ids)
        umax = int(np.argmax(nx.value(out.logits))) if had_protos else -1
        if had_protos and float(nx.value(out.uhat)) < alpha:
            mem = m_step(z, mem, out.yhat, out.uhat)
        else:
            mem = create_prototype(z, mem)
        history.append((mem.means, mem.counts))
        if config.stop_prototype_gradient:
            mem = mem.detached()
            if replay is not None:
                mem = mem.with_values(*replay.trace[t])
        ytilde = pseudo_label(z, mem, params) if replay is None else replay.targets[t]
        targets.append(ytilde)
        z_aug = encode(frame.view2, params)
        out_aug = e_step(z_aug, mem, params.beta, params.gamma, params.tau)
        ce = nx.neg(nx.sum_(nx.mul(ytilde, nx.log_softmax(out_aug.logits))))
        l_self = nx.add(l_self, nx.div(ce, T))
        if had_protos:
            l_ent = nx.add(l_ent, nx.div(nx.entropy_from_logits(out.logits), T))
        p_new = nx.add(p_new, nx.div(out.uhat, T))
        pl_arg = int(np.argmax(ytilde)) if params.tau_ratio == 0.0 else -1
        branches.append((mem.last_event, umax, pl_arg))
        if config.stop_prototype_gradient:
            trace.append((nx.detach(mem.means), nx.detach(mem.counts)))
    l_new = new_cluster_loss(p_new, config.beta_mean, config.clamp_eps)
    pv = float(nx.value(p_new))
    branches.append(("clamped", pv < config.clamp_eps or pv > 1.0 - config.clamp_eps))
    total = nx.add(l_self, nx.add(nx.mul(config.lambda_ent, l_ent), nx.mul(config.lambda_new, l_new)))
    return LossBreakdown(
        l_self=l_self, l_ent=l_ent, l_new=l_new, total=total, p_new=p_new,
        branches=tuple(branches), memory=mem, trace=trace, targets=targets, history=history,
    )


def loss_and_grad(frames, mem, params: ParameterSet, config: LossConfig, *, alpha: float = 0.5):
    """Evaluate the episode loss on a fresh tape and differentiate it."""
    tape = nx.Tape()
    bound = bind(params, tape)
    breakdown = episode_loss(frames, mem, bound, config, alpha=alpha)
    total = breakdown.total
    if not isinstance(total, nx.Node):
        return breakdown, {k: np.zeros_like(v) for k, v in params.arrays().items()}
    grads = nx.grad(tape, total)
    return breakdown, grads
