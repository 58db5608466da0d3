"""Checkpoint persistence.

A checkpoint is one JSON document.  Arrays are stored as base64 of their
little-endian float64 bytes so a save/load cycle is bit-exact, and a sha256
over the canonical body guards against corruption.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, ParameterSet
from .memory import PrototypeMemory
from .trainer import Adam, TrainState

FORMAT = "streamproto-checkpoint"
VERSION = 1

__all__ = ["CheckpointError", "FORMAT", "VERSION", "decode_array", "encode_array", "load", "save"]


class CheckpointError(ValueError):
    pass


def encode_array(a) -> dict:
    a = np.asarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["data"].encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return arr.reshape(doc["shape"])


def _digest(body: dict) -> str:
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _encode_memory(mem: PrototypeMemory | None):
    if mem is None:
        return None
    snap = mem.snapshot()
    for k in ("means", "counts"):
        if snap[k] is not None:
            snap[k] = encode_array(snap[k])
    return snap


def _decode_memory(doc) -> PrototypeMemory | None:
    if doc is None:
        return None
    snap = dict(doc)
    for k in ("means", "counts"):
        if snap[k] is not None:
            snap[k] = decode_array(snap[k])
    return PrototypeMemory.from_snapshot(snap)


def to_document(state: TrainState, *, config: dict | None = None, memory: PrototypeMemory | None = None) -> dict:
    adam = state.adam.state()
    body = {
        "format": FORMAT,
        "version": VERSION,
        "step": int(state.step),
        "encoder": asdict(state.params.config),
        "tau_ratio": state.params.tau_ratio,
        "params": {k: encode_array(v) for k, v in state.params.arrays().items()},
        "adam": {
            "lr": state.adam.lr, "beta1": state.adam.beta1, "beta2": state.adam.beta2, "eps": state.adam.eps,
            "t": adam["t"],
            "m": {k: encode_array(v) for k, v in adam["m"].items()},
            "v": {k: encode_array(v) for k, v in adam["v"].items()},
        },
        "loss_ema": state.loss_ema,
        "memory": _encode_memory(memory),
        "config": config,
    }
    return {**body, "checksum": _digest(body)}


def from_document(doc: dict) -> tuple[TrainState, dict | None, PrototypeMemory | None]:
    if doc.get("format") != FORMAT:
        raise CheckpointError("not a checkpoint file")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    body = {k: v for k, v in doc.items() if k != "checksum"}
    if _digest(body) != doc.get("checksum"):
        raise CheckpointError("checksum mismatch: checkpoint is corrupted")
    enc = EncoderConfig(**doc["encoder"])
    arrays = {k: decode_array(v) for k, v in doc["params"].items()}
    weights = {k: v for k, v in arrays.items() if k not in ("beta", "gamma_raw", "tau_raw")}
    template = ParameterSet(config=enc, weights=weights, tau_ratio=float(doc["tau_ratio"]))
    params = template.with_arrays(arrays)
    a = doc["adam"]
    adam = Adam(a["lr"], a["beta1"], a["beta2"], a["eps"])
    adam.load_state({
        "t": a["t"],
        "m": {k: decode_array(v) for k, v in a["m"].items()},
        "v": {k: decode_array(v) for k, v in a["v"].items()},
    })
    state = TrainState(step=int(doc["step"]), params=params, adam=adam, loss_ema=doc["loss_ema"])
    return state, doc["config"], _decode_memory(doc["memory"])


def save(path, state: TrainState, *, config: dict | None = None, memory: PrototypeMemory | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(to_document(state, config=config, memory=memory), indent=1))
    tmp.replace(path)
    return path


def load(path) -> tuple[TrainState, dict | None, PrototypeMemory | None]:
    """Returns ``(state, config_echo, memory)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: not valid JSON ({exc})") from None
    return from_document(doc)
