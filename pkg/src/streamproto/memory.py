"""Prototype memory: an online mixture with decayed soft counts.

Means are stored as one ``(n, D)`` matrix and counts as an ``(n,)`` vector.
Either may be a :class:`~streamproto.numerics.Node` when the memory is being
differentiated through, or a plain ndarray during inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Any, NamedTuple

import numpy as np

from . import numerics as nx

__all__ = [
    "EStepOutput",
    "MemoryConfig",
    "Prototype",
    "PrototypeMemory",
    "create_prototype",
    "e_step",
    "m_step",
    "step",
    "uhat_bound_check",
    "uhat_exact",
    "uhat_max_approx",
]


@dataclass(frozen=True)
class MemoryConfig:
    capacity: int = 150
    decay: float = 0.995
    alpha: float = 0.5
    decay_on_create: bool = False

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be a positive integer")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    def new_memory(self) -> "PrototypeMemory":
        return PrototypeMemory.empty(self.capacity, self.decay, self.decay_on_create)


@dataclass(frozen=True)
class Prototype:
    mean: np.ndarray
    count: float
    birth_step: int
    ident: int
    label: int | None = None


@dataclass(frozen=True)
class PrototypeMemory:
    capacity: int
    decay: float
    decay_on_create: bool = False
    means: Any = None
    counts: Any = None
    ids: tuple = ()
    births: tuple = ()
    labels: tuple = ()
    next_id: int = 0
    clock: int = 0
    # (action, evicted index or -1) of the most recent update
    last_event: tuple = field(default=("none", -1), compare=False)

    @classmethod
    def empty(cls, capacity: int = 150, decay: float = 0.995, decay_on_create: bool = False) -> "PrototypeMemory":
        if capacity < 1:
            raise ValueError("capacity must be a positive integer")
        if not 0.0 < decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        return cls(capacity=capacity, decay=decay, decay_on_create=decay_on_create)

    def reset(self) -> "PrototypeMemory":
        return PrototypeMemory.empty(self.capacity, self.decay, self.decay_on_create)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def is_full(self) -> bool:
        return len(self) >= self.capacity

    @property
    def prototypes(self) -> list[Prototype]:
        if not self.ids:
            return []
        means, counts = nx.value(self.means), nx.value(self.counts)
        return [
            Prototype(means[i].copy(), float(counts[i]), self.births[i], self.ids[i], self.labels[i])
            for i in range(len(self))
        ]

    @property
    def weights(self) -> np.ndarray:
        """Normalized counts; used for reporting and eviction only."""
        if not self.ids:
            return np.zeros(0)
        c = nx.value(self.counts)
        total = c.sum()
        return c / total if total > 0 else np.full(len(c), 1.0 / len(c))

    def detached(self) -> "PrototypeMemory":
        if not self.ids:
            return self
        return replace(self, means=nx.detach(self.means), counts=nx.detach(self.counts))

    def with_values(self, means, counts) -> "PrototypeMemory":
        return replace(self, means=means, counts=counts)

    def snapshot(self) -> dict:
        return {
            "capacity": self.capacity,
            "decay": self.decay,
            "decay_on_create": self.decay_on_create,
            "means": nx.detach(self.means) if self.ids else None,
            "counts": nx.detach(self.counts) if self.ids else None,
            "ids": list(self.ids),
            "births": list(self.births),
            "labels": list(self.labels),
            "next_id": self.next_id,
            "clock": self.clock,
        }

    @classmethod
    def from_snapshot(cls, snap: dict) -> "PrototypeMemory":
        return cls(
            capacity=int(snap["capacity"]),
            decay=float(snap["decay"]),
            decay_on_create=bool(snap["decay_on_create"]),
            means=None if snap["means"] is None else np.asarray(snap["means"], dtype=np.float64),
            counts=None if snap["counts"] is None else np.asarray(snap["counts"], dtype=np.float64),
            ids=tuple(snap["ids"]),
            births=tuple(snap["births"]),
            labels=tuple(snap["labels"]),
            next_id=int(snap["next_id"]),
            clock=int(snap["clock"]),
        )


class EStepOutput(NamedTuple):
    yhat: Any
    uhat: Any
    logits: Any
    cos: Any = None


def e_step(z, mem: PrototypeMemory, beta, gamma, tau) -> EStepOutput:
    """Assignment distribution over prototypes and new-cluster probability.

    Distances are negative cosine similarities and the mixing weights are
    uniform, so ``logits = cos / tau`` and
    ``uhat = sigmoid((-max(cos) / tau - beta) / gamma)``.
    An empty memory gives ``uhat = 1`` exactly.
    """
    if not float(nx.value(tau)) > 0.0:
        raise ValueError("tau must be positive")
    if not float(nx.value(gamma)) > 0.0:
        raise ValueError("gamma must be positive")
    if not mem.ids:
        empty = np.zeros(0)
        return EStepOutput(empty, np.asarray(1.0), empty, empty)
    cos = nx.row_cosine(mem.means, z)
    logits = nx.div(cos, tau)
    yhat = nx.softmax(logits)
    min_dist = nx.neg(nx.max_(logits))
    uhat = nx.sigmoid(nx.div(nx.sub(min_dist, beta), gamma))
    return EStepOutput(yhat, uhat, logits, cos)


def m_step(z, mem: PrototypeMemory, yhat, uhat) -> PrototypeMemory:
    """Expected recursive update of every prototype's mean and count.

    ``c <- rho c + y (1 - u)`` and ``p <- z lam + p (1 - lam)`` with
    ``lam = y (1 - u) / (rho c + 1)``.
    """
    n = len(mem)
    yv = nx.value(yhat)
    if yv.shape != (n,):
        raise ValueError(f"yhat has length {yv.shape[0] if yv.ndim else 0}, memory holds {n} prototypes")
    mass = nx.mul(yhat, nx.sub(1.0, uhat))
    decayed = nx.mul(mem.decay, mem.counts)
    lam = nx.div(mass, nx.add(decayed, 1.0))
    new_counts = nx.add(decayed, mass)
    dim = nx.value(mem.means).shape[1]
    lam_col = nx.reshape(lam, (n, 1))
    new_means = nx.add(
        nx.mul(mem.means, nx.sub(1.0, lam_col)),
        nx.mul(lam_col, nx.reshape(z, (1, dim))),
    )
    return replace(mem, means=new_means, counts=new_counts, clock=mem.clock + 1, last_event=("assign", -1))


def create_prototype(z, mem: PrototypeMemory, label: int | None = None) -> PrototypeMemory:
    """Append ``(z, 1)``, evicting the lowest-count prototype when full."""
    dim = nx.value(z).shape[0]
    row = nx.reshape(z, (1, dim))
    one = np.ones(1)
    if not mem.ids:
        return replace(
            mem, means=row, counts=one, ids=(mem.next_id,), births=(mem.clock,), labels=(label,),
            next_id=mem.next_id + 1, clock=mem.clock + 1, last_event=("create", -1),
        )
    means, counts = mem.means, mem.counts
    if mem.decay_on_create:
        counts = nx.mul(mem.decay, counts)
    ids, births, labels = mem.ids, mem.births, mem.labels
    evicted = -1
    if len(ids) >= mem.capacity:
        evicted = int(np.argmin(nx.value(counts)))
        keep = np.array([i for i in range(len(ids)) if i != evicted], dtype=np.intp)
        if keep.size:
            means, counts = nx.take(means, keep), nx.take(counts, keep)
        ids = tuple(ids[i] for i in keep)
        births = tuple(births[i] for i in keep)
        labels = tuple(labels[i] for i in keep)
    if ids:
        means = nx.concat([means, row])
        counts = nx.concat([counts, one])
    else:
        means, counts = row, one
    return replace(
        mem, means=means, counts=counts, ids=ids + (mem.next_id,), births=births + (mem.clock,),
        labels=labels + (label,), next_id=mem.next_id + 1, clock=mem.clock + 1,
        last_event=("create", evicted),
    )


def step(z, mem: PrototypeMemory, params, alpha: float = 0.5) -> tuple[EStepOutput, PrototypeMemory]:
    """E-step followed by either an M-step (``uhat < alpha``) or a creation.

    ``params`` needs ``beta``, ``gamma`` and ``tau`` attributes (floats or
    tape nodes).  An empty memory always takes the creation branch.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    out = e_step(z, mem, params.beta, params.gamma, params.tau)
    if mem.ids and float(nx.value(out.uhat)) < alpha:
        return out, m_step(z, mem, out.yhat, out.uhat)
    return out, create_prototype(z, mem)


def uhat_max_approx(v, s: float) -> float:
    """New-cluster probability using the max over component logits."""
    v = np.asarray(v, dtype=np.float64)
    return float(nx.sigmoid(s - v.max()))


def uhat_exact(v, s: float) -> float:
    """New-cluster probability with uniform mixing weights folded into ``v``.

    Equals ``sigmoid(s - logsumexp(v - log K))``; written so that the
    ``log mean exp`` correction is non-positive in floating point too.
    """
    v = np.asarray(v, dtype=np.float64)
    m = v.max()
    correction = math.log(np.exp(v - m).sum() / v.size)
    return float(nx.sigmoid(s - (m + correction)))


def uhat_bound_check(v, s: float) -> bool:
    """True iff the max approximation lower-bounds the exact value."""
    return uhat_max_approx(v, s) <= uhat_exact(v, s)
