"""Embedding functions z = h(x; theta) with unit-norm output."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from . import numerics as nx

__all__ = [
    "BETA_INIT",
    "CollapsedEmbeddingError",
    "EncoderConfig",
    "GAMMA_INIT",
    "ParameterSet",
    "TAU_INIT",
    "TAU_RATIO_DEFAULT",
    "bind",
    "encode",
    "encode_batch",
    "init_params",
]

TAU_INIT = 0.1
BETA_INIT = -12.0
GAMMA_INIT = 1.0
TAU_RATIO_DEFAULT = 0.1

KINDS = ("identity", "linear", "mlp")
ACTIVATIONS = ("tanh", "relu")


class CollapsedEmbeddingError(nx.DegenerateVectorError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    kind: str = "linear"
    input_dim: int = 16
    output_dim: int = 4
    hidden_dim: int = 32
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"encoder kind must be one of {KINDS}, got {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        for name in ("input_dim", "output_dim", "hidden_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.kind == "identity" and self.input_dim != self.output_dim:
            raise ValueError("identity encoder requires input_dim == output_dim")


@dataclass
class ParameterSet:
    """Encoder weights plus the clustering scalars.

    ``gamma`` and ``tau`` are stored as raw values and exposed through
    softplus so optimizer steps can never make them non-positive.
    """

    config: EncoderConfig
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    beta: float = BETA_INIT
    gamma_raw: float = nx.softplus_inverse(GAMMA_INIT)
    tau_raw: float = nx.softplus_inverse(TAU_INIT)
    tau_ratio: float = TAU_RATIO_DEFAULT

    @property
    def gamma(self) -> float:
        return float(np.logaddexp(0.0, self.gamma_raw))

    @property
    def tau(self) -> float:
        return float(np.logaddexp(0.0, self.tau_raw))

    def arrays(self) -> dict[str, np.ndarray]:
        """Every learnable quantity as a float64 array, in a stable order."""
        out = {k: self.weights[k] for k in sorted(self.weights)}
        out["beta"] = np.asarray(self.beta, dtype=np.float64)
        out["gamma_raw"] = np.asarray(self.gamma_raw, dtype=np.float64)
        out["tau_raw"] = np.asarray(self.tau_raw, dtype=np.float64)
        return out

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "ParameterSet":
        weights = {k: np.array(arrays[k], dtype=np.float64) for k in self.weights}
        return ParameterSet(
            config=self.config,
            weights=weights,
            beta=float(arrays["beta"]),
            gamma_raw=float(arrays["gamma_raw"]),
            tau_raw=float(arrays["tau_raw"]),
            tau_ratio=self.tau_ratio,
        )

    def copy(self) -> "ParameterSet":
        return self.with_arrays(self.arrays())


def init_params(
    config: EncoderConfig,
    *,
    beta: float = BETA_INIT,
    gamma: float = GAMMA_INIT,
    tau: float = TAU_INIT,
    tau_ratio: float = TAU_RATIO_DEFAULT,
) -> ParameterSet:
    rng = np.random.Generator(np.random.Philox(config.seed))

    def layer(fan_in, fan_out):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_out, fan_in)), rng.uniform(-bound, bound, size=fan_out)

    weights = {}
    if config.kind == "linear":
        weights["W"], weights["b"] = layer(config.input_dim, config.output_dim)
    elif config.kind == "mlp":
        weights["W1"], weights["b1"] = layer(config.input_dim, config.hidden_dim)
        weights["W2"], weights["b2"] = layer(config.hidden_dim, config.output_dim)
    return ParameterSet(
        config=config,
        weights=weights,
        beta=float(beta),
        gamma_raw=nx.softplus_inverse(gamma),
        tau_raw=nx.softplus_inverse(tau),
        tau_ratio=float(tau_ratio),
    )


def bind(params: ParameterSet, tape: nx.Tape, prefix: str = "") -> SimpleNamespace:
    """Register every learnable array on ``tape``; returns node handles."""
    weights = {k: tape.param(prefix + k, v) for k, v in sorted(params.weights.items())}
    beta = tape.param(prefix + "beta", params.beta)
    gamma_raw = tape.param(prefix + "gamma_raw", params.gamma_raw)
    tau_raw = tape.param(prefix + "tau_raw", params.tau_raw)
    return SimpleNamespace(
        config=params.config,
        weights=weights,
        beta=beta,
        gamma=nx.softplus(gamma_raw),
        tau=nx.softplus(tau_raw),
        tau_ratio=params.tau_ratio,
    )


def _activation(name):
    return nx.tanh if name == "tanh" else nx.relu


def encode(x, params):
    """Unit-norm embedding of one input vector.

    ``params`` is a :class:`ParameterSet` (plain arrays) or the namespace
    returned by :func:`bind` (tape nodes).
    """
    cfg = params.config
    xv = nx.value(x)
    if xv.shape != (cfg.input_dim,):
        raise ValueError(f"input has shape {xv.shape}, encoder expects ({cfg.input_dim},)")
    w = params.weights
    if cfg.kind == "identity":
        h = x
    elif cfg.kind == "linear":
        h = nx.add(nx.matmul(w["W"], x), w["b"])
    else:
        hidden = _activation(cfg.activation)(nx.add(nx.matmul(w["W1"], x), w["b1"]))
        h = nx.add(nx.matmul(w["W2"], hidden), w["b2"])
    try:
        return nx.normalize(h)
    except nx.DegenerateVectorError:
        raise CollapsedEmbeddingError("collapsed embedding") from None


def encode_batch(X: np.ndarray, params: ParameterSet) -> np.ndarray:
    """Row-wise :func:`encode` for inference (no tape)."""
    X = np.asarray(X, dtype=np.float64)
    cfg = params.config
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ValueError(f"inputs have shape {X.shape}, encoder expects (N, {cfg.input_dim})")
    w = params.weights
    if cfg.kind == "identity":
        H = X
    elif cfg.kind == "linear":
        H = X @ w["W"].T + w["b"]
    else:
        pre = X @ w["W1"].T + w["b1"]
        hidden = np.tanh(pre) if cfg.activation == "tanh" else np.maximum(pre, 0.0)
        H = hidden @ w["W2"].T + w["b2"]
    norms = np.sqrt(np.einsum("ij,ij->i", H, H))
    if np.any(norms == 0.0):
        raise CollapsedEmbeddingError("collapsed embedding")
    return H / norms[:, None]
