"""Run configuration: named hyperparameter profiles plus JSON overrides."""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

from .encoder import EncoderConfig
from .memory import MemoryConfig
from .objective import LossConfig
from .streams import StreamConfig
from .trainer import TrainConfig

__all__ = ["ConfigError", "EvalConfig", "ModelConfig", "PROFILES", "RunConfig", "load_config", "resolve"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    tau_init: float = 0.1
    beta_init: float = -12.0
    gamma_init: float = 1.0
    tau_ratio: float = 0.1

    def __post_init__(self):
        if self.tau_init <= 0 or self.gamma_init <= 0:
            raise ValueError("tau_init and gamma_init must be positive")
        if self.tau_ratio < 0:
            raise ValueError("tau_ratio must be non-negative")


@dataclass(frozen=True)
class EvalConfig:
    protocol: str = "unsupervised"
    episodes: int = 20
    seed_offset: int = 100_000
    alpha_grid_size: int = 21
    knn_k: int = 5
    linear_epochs: int = 20
    linear_lr: float = 1e-3
    workers: int = 1

    def __post_init__(self):
        if self.protocol not in ("unsupervised", "supervised", "offline"):
            raise ValueError("protocol must be unsupervised, supervised or offline")
        if self.episodes < 0 or self.alpha_grid_size < 1:
            raise ValueError("episodes must be >= 0 and alpha_grid_size >= 1")


_SECTIONS = {
    "encoder": EncoderConfig,
    "model": ModelConfig,
    "memory": MemoryConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "stream": StreamConfig,
    "eval": EvalConfig,
}
_TOP_LEVEL = {"profile", "seed", "out_dir", *_SECTIONS}
# filled from the top-level seed
_SEEDED = {("encoder", "seed"), ("train", "seed"), ("stream", "world_seed")}


@dataclass(frozen=True)
class RunConfig:
    profile: str
    seed: int
    out_dir: str
    encoder: EncoderConfig
    model: ModelConfig
    memory: MemoryConfig
    loss: LossConfig
    train: TrainConfig
    stream: StreamConfig
    eval: EvalConfig

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"profile": self.profile, "seed": self.seed, "out_dir": self.out_dir}
        for name in _SECTIONS:
            sec = asdict(getattr(self, name))
            for s, key in _SEEDED:
                if s == name:
                    sec.pop(key, None)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out


def _table(K, rho, mu, lam_ent, lam_new, ratio, steps, decay_steps):
    return {
        "model": {"tau_init": 0.1, "beta_init": -12.0, "gamma_init": 1.0, "tau_ratio": ratio},
        "memory": {"capacity": K, "decay": rho, "alpha": 0.5},
        "loss": {"beta_mean": mu, "lambda_ent": lam_ent, "lambda_new": lam_new},
        "train": {"lr": 1e-3, "total_steps": steps, "decay_steps": decay_steps, "decay_factor": 0.1},
    }


_VECTOR_ENCODER = {"kind": "mlp", "input_dim": 32, "hidden_dim": 64, "output_dim": 16}
_VECTOR_STREAM = {"observation_dim": 32, "latent_dim": 8, "nuisance_std": 0.5}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


PROFILES: dict[str, dict] = {
    "roamingrooms-like": _merge(
        _table(150, 0.995, 0.5, 0.0, 0.5, 0.1, 80_000, [40_000, 60_000]),
        {"encoder": _VECTOR_ENCODER, "stream": {**_VECTOR_STREAM, "episode_length": 50, "num_contexts": 1}},
    ),
    "saycam-like": _merge(
        _table(75, 0.99, 0.6, 0.0, 0.3, 0.0, 30_000, [20_000]),
        {"encoder": _VECTOR_ENCODER, "stream": {**_VECTOR_STREAM, "episode_length": 75, "num_contexts": 1}},
    ),
    "omniglot-like": _merge(
        _table(150, 0.995, 0.5, 1.0, 1.0, 0.2, 80_000, [40_000, 60_000]),
        {"encoder": _VECTOR_ENCODER, "stream": {**_VECTOR_STREAM, "episode_length": 150, "num_contexts": 5}},
    ),
    "imagenet-like": _merge(
        _table(600, 0.99, 0.5, 0.5, 0.5, 0.0, 80_000, [40_000, 60_000]),
        {"encoder": _VECTOR_ENCODER, "stream": {**_VECTOR_STREAM, "episode_length": 48, "num_contexts": 3}},
    ),
}

# Desk-scale profiles layered on the roamingrooms-like table.
PROFILES["desk-linear"] = _merge(
    PROFILES["roamingrooms-like"],
    {
        "encoder": {"kind": "linear", "input_dim": 16, "output_dim": 4},
        "stream": {
            "episode_length": 50, "num_contexts": 1, "max_classes_per_context": 6, "crp_concentration": 10.0,
            "observation_dim": 16, "latent_dim": 4, "nuisance_std": 1.0, "class_noise": 0.1, "view_noise": 0.1,
        },
        "train": {"total_steps": 1500, "decay_steps": []},
    },
)
PROFILES["separable"] = _merge(
    PROFILES["roamingrooms-like"],
    {
        "encoder": {"kind": "identity", "input_dim": 32, "output_dim": 32},
        "stream": {
            "episode_length": 50, "num_contexts": 2, "max_classes_per_context": 8, "crp_concentration": 1.0,
            "observation_dim": 32, "latent_dim": 32, "nuisance_std": 0.0, "class_noise": 0.05, "view_noise": 0.0,
            "mean_mode": "orthogonal",
        },
        "train": {"total_steps": 0, "decay_steps": []},
    },
)

DEFAULT_PROFILE = "omniglot-like"


def _check_keys(doc: dict):
    unknown = set(doc) - _TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for name, cls in _SECTIONS.items():
        sec = doc.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"section {name!r} must be an object")
        allowed = {f.name for f in dataclasses.fields(cls)}
        bad = set(sec) - allowed
        if bad:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(bad)}")


def parse_override(item: str) -> tuple[list[str], Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip().split("."), val


def resolve(doc: dict | None = None, *, profile: str | None = None, seed: int | None = None,
            overrides: list[str] = (), out_dir: str | None = None) -> RunConfig:
    """Profile defaults, then the document, then ``key=value`` overrides."""
    doc = copy.deepcopy(doc or {})
    _check_keys(doc)
    name = profile or doc.get("profile") or DEFAULT_PROFILE
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    merged = _merge(PROFILES[name], {k: v for k, v in doc.items() if k != "profile"})
    for item in overrides:
        path, val = parse_override(item)
        node = merged
        for key in path[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} does not name a config field")
        node[path[-1]] = val
    _check_keys(merged)
    run_seed = int(seed if seed is not None else merged.get("seed", 0))
    sections = {}
    try:
        for sec_name, cls in _SECTIONS.items():
            kw = dict(merged.get(sec_name, {}))
            for s, key in _SEEDED:
                if s == sec_name:
                    kw[key] = run_seed
            if sec_name == "train" and "decay_steps" in kw:
                kw["decay_steps"] = tuple(kw["decay_steps"])
            sections[sec_name] = cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    enc, stream = sections["encoder"], sections["stream"]
    if enc.input_dim != stream.observation_dim:
        raise ConfigError(f"encoder input_dim {enc.input_dim} != stream observation_dim {stream.observation_dim}")
    return RunConfig(
        profile=name, seed=run_seed, out_dir=out_dir or merged.get("out_dir", "runs/latest"), **sections
    )


def load_config(path: str | Path | None, **kwargs) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return resolve(doc, **kwargs)
