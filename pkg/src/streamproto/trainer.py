"""Outer training loop, gradient checking and evaluation."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import metrics
from .encoder import EncoderConfig, ParameterSet, encode_batch, init_params
from .memory import MemoryConfig
from .objective import LossConfig, episode_loss, loss_and_grad
from .streams import StreamConfig, generate_episode, make_rng

__all__ = [
    "Adam",
    "GradCheckConfig",
    "GradCheckReport",
    "NumericalError",
    "TrainConfig",
    "TrainState",
    "evaluate",
    "grad_check",
    "learning_rate",
    "train",
]

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """A loss or parameter became NaN/Inf."""


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float | None = None) -> dict[str, np.ndarray]:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        out = {}
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            out[k] = p - lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
        return out

    def state(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_steps: tuple = ()
    decay_factor: float = 0.1
    total_steps: int = 1000
    alpha: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 < self.decay_factor <= 1.0:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.total_steps < 0:
            raise ValueError("total_steps must be non-negative")
        object.__setattr__(self, "decay_steps", tuple(int(s) for s in self.decay_steps))


def learning_rate(config: TrainConfig, step: int) -> float:
    """Staircase schedule: base * factor ** (number of boundaries <= step)."""
    passed = sum(1 for s in config.decay_steps if s <= step)
    return config.lr * config.decay_factor ** passed


@dataclass
class TrainState:
    step: int
    params: ParameterSet
    adam: Adam
    loss_ema: float | None = None
    last: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, params: ParameterSet, config: TrainConfig) -> "TrainState":
        return cls(0, params, Adam(config.lr, config.beta1, config.beta2, config.eps))


def _param_norms(params: ParameterSet) -> dict[str, float]:
    return {k: float(np.linalg.norm(v)) for k, v in params.arrays().items()}


def train(
    source: Callable[[int], list],
    config: TrainConfig,
    params: ParameterSet,
    loss_config: LossConfig,
    memory_config: MemoryConfig,
    *,
    state: TrainState | None = None,
    on_step: Callable[[TrainState, dict], None] | None = None,
    on_checkpoint: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """One parameter update per episode, with a fresh memory every episode.

    ``source(i)`` must return the episode for step ``i``; passing a saved
    ``state`` resumes at ``state.step``.
    """
    state = state or TrainState.initial(params, config)
    while state.step < config.total_steps:
        i = state.step
        frames = source(i)
        mem = memory_config.new_memory()
        breakdown, grads = loss_and_grad(frames, mem, state.params, loss_config, alpha=memory_config.alpha)
        row = breakdown.floats()
        if not all(math.isfinite(v) for v in row.values()) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise NumericalError(
                f"non-finite loss at episode {i}: {row}; parameter norms {_param_norms(state.params)}"
            )
        lr = learning_rate(config, i)
        new_arrays = state.adam.step(state.params.arrays(), grads, lr=lr)
        if not all(np.all(np.isfinite(v)) for v in new_arrays.values()):
            raise NumericalError(f"non-finite parameters after episode {i}; norms {_param_norms(state.params)}")
        state.params = state.params.with_arrays(new_arrays)
        state.step = i + 1
        state.loss_ema = row["total"] if state.loss_ema is None else 0.98 * state.loss_ema + 0.02 * row["total"]
        row.update(step=i, lr=lr)
        state.last = row
        if on_step is not None:
            on_step(state, row)
        if config.log_every and i % config.log_every == 0:
            log.debug("step %d total %.4f p_new %.3f", i, row["total"], row["p_new"])
        if on_checkpoint is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            on_checkpoint(state)
    return state


# -- gradient checking -------------------------------------------------------


@dataclass(frozen=True)
class GradCheckConfig:
    kind: str = "mlp"
    input_dim: int = 6
    output_dim: int = 4
    hidden_dim: int = 5
    episode_length: int = 5
    capacity: int = 3
    tau_ratio: float = 0.1
    lambda_ent: float = 1.0
    lambda_new: float = 1.0
    stop_prototype_gradient: bool = False
    h: float = 1e-5
    seed: int = 0
    max_attempts: int = 200
    # only accept episodes that exercise both the M-step and creation
    require_mixed: bool = True

    def __post_init__(self):
        if max(self.input_dim, self.output_dim, self.hidden_dim) > 8:
            raise ValueError("gradient checking is limited to dims <= 8")
        if self.episode_length > 5:
            raise ValueError("gradient checking is limited to episodes of length <= 5")


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_group: dict[str, float]
    attempts: int
    branches: tuple
    analytic: dict[str, np.ndarray] = field(repr=False, default_factory=dict)
    numeric: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(config: GradCheckConfig, *, grad_fn: Callable | None = None) -> GradCheckReport:
    """Compare analytic gradients to central differences on random episodes.

    Episodes whose discrete decisions change under any perturbation are
    discarded and re-sampled.  ``grad_fn`` replaces the analytic gradient
    (used to confirm the harness catches a wrong derivative).
    """
    latent = min(config.input_dim, 3)
    loss_cfg = LossConfig(
        lambda_ent=config.lambda_ent, lambda_new=config.lambda_new,
        stop_prototype_gradient=config.stop_prototype_gradient,
    )
    mem_cfg = MemoryConfig(capacity=config.capacity, decay=0.9, alpha=0.5)
    out_dim = config.input_dim if config.kind == "identity" else config.output_dim
    for attempt in range(config.max_attempts):
        rng = make_rng(config.seed, attempt)
        stream = StreamConfig(
            episode_length=config.episode_length, num_contexts=1, crp_concentration=1.0,
            latent_dim=latent, observation_dim=config.input_dim, class_noise=0.3, view_noise=0.2,
            nuisance_std=0.3, world_seed=config.seed + attempt,
        )
        frames = generate_episode(stream, attempt)
        enc = EncoderConfig(config.kind, config.input_dim, out_dim, config.hidden_dim, "tanh", config.seed + attempt)
        tau = float(rng.uniform(0.15, 0.4))
        params = init_params(
            enc, beta=-float(rng.uniform(0.6, 0.97)) / tau, gamma=float(rng.uniform(0.7, 1.5)),
            tau=tau, tau_ratio=config.tau_ratio,
        )
        base, analytic = loss_and_grad(frames, mem_cfg.new_memory(), params, loss_cfg, alpha=mem_cfg.alpha)
        actions = {b[0][0] for b in base.branches[:-1]}
        if config.require_mixed and config.episode_length > 1 and actions != {"create", "assign"}:
            continue
        if grad_fn is not None:
            analytic = grad_fn(frames, params, analytic)
        arrays = params.arrays()
        numeric = {}
        stable = True
        for name, arr in arrays.items():
            g = np.zeros_like(arr)
            flat = g.reshape(-1)
            for idx in range(arr.size):
                vals = []
                for sign in (1.0, -1.0):
                    pert = {k: v.copy() for k, v in arrays.items()}
                    pert[name].reshape(-1)[idx] += sign * config.h
                    res = episode_loss(frames, mem_cfg.new_memory(), params.with_arrays(pert), loss_cfg,
                                       alpha=mem_cfg.alpha, replay=base)
                    if res.branches != base.branches:
                        stable = False
                        break
                    vals.append(float(res.total))
                if not stable:
                    break
                flat[idx] = (vals[0] - vals[1]) / (2.0 * config.h)
            if not stable:
                break
            numeric[name] = g
        if not stable:
            continue
        per_group = {k: float(relative_error(analytic[k], numeric[k]).max(initial=0.0)) for k in arrays}
        return GradCheckReport(
            max_rel_error=max(per_group.values()), per_group=per_group, attempts=attempt + 1,
            branches=base.branches, analytic=analytic, numeric=numeric,
        )
    raise RuntimeError("could not find a perturbation-stable episode")


# -- evaluation --------------------------------------------------------------


def evaluate(
    params: ParameterSet,
    episodes: Sequence[list],
    protocol: str = "unsupervised",
    memory_config: MemoryConfig | None = None,
    *,
    alpha: float | None = None,
    alpha_grid: Sequence[float] | None = None,
    workers: int = 1,
) -> dict:
    """Inference-only episodes with a fresh memory each; mean metrics.

    ``protocol`` is ``"unsupervised"`` (AMI, AMI_max, ARI, homogeneity,
    completeness) or ``"supervised"`` (AP).  Per-episode values are returned
    under ``"episodes"`` ordered by episode index.
    """
    memory_config = memory_config or MemoryConfig()
    alpha = memory_config.alpha if alpha is None else alpha
    if not episodes:
        return {}
    if protocol not in ("unsupervised", "supervised"):
        raise ValueError(f"unknown protocol {protocol!r}")
    for ep in episodes:
        if any(f.label is None for f in ep):
            raise ValueError(f"protocol {protocol!r} needs labeled frames")

    def one(ep):
        Z = encode_batch(np.stack([f.features for f in ep]), params)
        y = [f.label for f in ep]
        if protocol == "supervised":
            preds = metrics.supervised_readout(ep, encode_batch, params, memory_config, embeddings=Z)
            return {"ap": metrics.average_precision(preds)}
        pred = metrics.unsupervised_readout(ep, encode_batch, params, alpha, memory_config, embeddings=Z)
        hom, com = metrics.homogeneity_completeness(y, pred)
        return {"ami": metrics.ami(y, pred), "ari": metrics.ari(y, pred), "homogeneity": hom, "completeness": com}

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(one, episodes))
    else:
        rows = [one(ep) for ep in episodes]
    report = {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}
    if protocol == "unsupervised":
        best, best_alpha = metrics.ami_max(episodes, encode_batch, params, alpha_grid, memory_config)
        report["ami_max"] = best
        report["ami_max_alpha"] = best_alpha
    report["episodes"] = rows
    return report
