"""Clustering metrics, online readouts and offline probes."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .memory import MemoryConfig, PrototypeMemory, create_prototype, e_step, m_step

__all__ = [
    "ContingencyTable",
    "RankedPrediction",
    "ami",
    "ami_max",
    "ari",
    "average_precision",
    "contingency",
    "default_alpha_grid",
    "homogeneity_completeness",
    "knn_readout",
    "linear_readout",
    "supervised_readout",
    "unsupervised_readout",
]


@dataclass(frozen=True)
class ContingencyTable:
    n: np.ndarray  # R x C counts
    a: np.ndarray  # row sums
    b: np.ndarray  # column sums
    N: int


def contingency(u_labels, v_labels) -> ContingencyTable:
    u, v = list(u_labels), list(v_labels)
    if len(u) != len(v):
        raise ValueError(f"label sequences differ in length: {len(u)} vs {len(v)}")
    if not u:
        raise ValueError("label sequences must be nonempty")
    _, ui = np.unique(np.asarray(u), return_inverse=True)
    _, vi = np.unique(np.asarray(v), return_inverse=True)
    table = np.zeros((ui.max() + 1, vi.max() + 1), dtype=np.int64)
    np.add.at(table, (ui, vi), 1)
    return ContingencyTable(table, table.sum(axis=1), table.sum(axis=0), len(u))


def _entropy(counts: np.ndarray, N: int) -> float:
    p = counts[counts > 0] / N
    return float(-(p * np.log(p)).sum())


def _mutual_info(ct: ContingencyTable) -> float:
    N = ct.N
    mi = 0.0
    rows, cols = np.nonzero(ct.n)
    for i, j in zip(rows, cols):
        nij = ct.n[i, j]
        mi += nij / N * math.log(N * nij / (ct.a[i] * ct.b[j]))
    return max(mi, 0.0)


def _expected_mutual_info(ct: ContingencyTable) -> float:
    """Exact E[MI] under the hypergeometric model of fixed marginals."""
    N = ct.N
    lf = [math.lgamma(k + 1) for k in range(N + 1)]
    emi = 0.0
    for ai in ct.a:
        for bj in ct.b:
            lo = max(1, ai + bj - N)
            hi = min(ai, bj)
            common = lf[ai] + lf[bj] + lf[N - ai] + lf[N - bj] - lf[N]
            for nij in range(lo, hi + 1):
                log_p = common - lf[nij] - lf[ai - nij] - lf[bj - nij] - lf[N - ai - bj + nij]
                emi += nij / N * math.log(N * nij / (ai * bj)) * math.exp(log_p)
    return emi


def ami(u_labels, v_labels) -> float:
    """Adjusted mutual information with the arithmetic-mean normalizer."""
    ct = contingency(u_labels, v_labels)
    R, C = ct.n.shape
    if (R == C == 1) or (R == C == ct.N and np.count_nonzero(ct.n) == ct.N):
        return 1.0
    mi = _mutual_info(ct)
    emi = _expected_mutual_info(ct)
    h_u, h_v = _entropy(ct.a, ct.N), _entropy(ct.b, ct.N)
    denom = 0.5 * (h_u + h_v) - emi
    eps = np.finfo(np.float64).eps
    denom = min(denom, -eps) if denom < 0 else max(denom, eps)
    return float((mi - emi) / denom)


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1.0) / 2.0


def ari(u_labels, v_labels) -> float:
    """Adjusted Rand index (pair counting)."""
    ct = contingency(u_labels, v_labels)
    sum_nij = _comb2(ct.n).sum()
    sum_a = _comb2(ct.a).sum()
    sum_b = _comb2(ct.b).sum()
    total = ct.N * (ct.N - 1) / 2.0
    if total == 0:
        return 1.0
    expected = sum_a * sum_b / total
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        # both partitions trivial (all one cluster or all singletons)
        return 1.0
    return float((sum_nij - expected) / (max_index - expected))


def homogeneity_completeness(u_labels, v_labels) -> tuple[float, float]:
    """``u_labels`` are classes, ``v_labels`` clusters; zero denominators give 1."""
    ct = contingency(u_labels, v_labels)
    N = ct.N
    h_c, h_k = _entropy(ct.a, N), _entropy(ct.b, N)
    h_joint = _entropy(ct.n.ravel(), N)
    h_c_given_k = h_joint - h_k
    h_k_given_c = h_joint - h_c
    hom = 1.0 if h_c == 0 else 1.0 - h_c_given_k / h_c
    com = 1.0 if h_k == 0 else 1.0 - h_k_given_c / h_k
    return float(hom), float(com)


# -- average precision -------------------------------------------------------


class RankedPrediction(NamedTuple):
    uhat: float
    label: int
    y_true: int
    is_known: bool

    @property
    def correct(self) -> bool:
        return self.is_known and self.label == self.y_true


def known_flags(labels: Sequence) -> list[bool]:
    """A frame is known iff its class appeared earlier in the sequence."""
    seen = set()
    out = []
    for y in labels:
        out.append(y in seen)
        seen.add(y)
    return out


def average_precision(preds: Sequence[RankedPrediction], *, strict_recall: bool = False) -> float:
    """Area under precision/recall of predictions ranked by ascending ``uhat``.

    Default recall uses the number of known instances in the whole sequence,
    and the area is the sum of precision at each correct rank divided by that
    number.  ``strict_recall`` instead divides by the known count among the
    top N and integrates precision over recall increments.
    Zero known instances returns 1.0 and emits a warning.
    """
    if not preds:
        raise ValueError("average_precision needs at least one prediction")
    order = sorted(range(len(preds)), key=lambda i: preds[i].uhat)
    ranked = [preds[i] for i in order]
    n_known = sum(p.is_known for p in ranked)
    if n_known == 0:
        warnings.warn("no known instances; average precision defaults to 1.0", stacklevel=2)
        return 1.0
    hits = 0
    if not strict_recall:
        total = 0.0
        for n, p in enumerate(ranked, start=1):
            if p.correct:
                hits += 1
                total += hits / n
        return total / n_known
    area, prev_recall, known_so_far = 0.0, 0.0, 0
    for n, p in enumerate(ranked, start=1):
        known_so_far += p.is_known
        hits += p.correct
        if known_so_far == 0:
            continue
        recall = hits / known_so_far
        area += (recall - prev_recall) * (hits / n)
        prev_recall = recall
    return area


# -- online readouts ---------------------------------------------------------


def _embed(episode, embed_fn, params) -> np.ndarray:
    X = np.stack([f.features for f in episode])
    return embed_fn(X, params)


def unsupervised_readout(
    episode,
    embed_fn: Callable,
    params,
    alpha: float,
    memory: MemoryConfig | None = None,
    *,
    embeddings: np.ndarray | None = None,
) -> list[int]:
    """Greedy online clustering; returns the prototype identity per frame.

    A creation step predicts the new prototype's identity.  Identities are
    never reused, so an evicted cluster cannot alias a later one.
    """
    memory = memory or MemoryConfig()
    Z = _embed(episode, embed_fn, params) if embeddings is None else embeddings
    mem = PrototypeMemory.empty(memory.capacity, memory.decay, memory.decay_on_create)
    beta, gamma, tau = params.beta, params.gamma, params.tau
    out = []
    for z in Z:
        est = e_step(z, mem, beta, gamma, tau)
        if mem.ids and float(est.uhat) < alpha:
            out.append(mem.ids[int(np.argmax(est.yhat))])
            mem = m_step(z, mem, est.yhat, est.uhat)
        else:
            mem = create_prototype(z, mem)
            out.append(mem.ids[-1])
    return out


def supervised_readout(
    episode,
    embed_fn: Callable,
    params,
    memory: MemoryConfig | None = None,
    *,
    embeddings: np.ndarray | None = None,
) -> list[RankedPrediction]:
    """Predict from labels up to t-1, then update memory with the true label."""
    memory = memory or MemoryConfig()
    if any(f.label is None for f in episode):
        raise ValueError("supervised readout needs a label on every frame")
    Z = _embed(episode, embed_fn, params) if embeddings is None else embeddings
    labels = [f.label for f in episode]
    known = known_flags(labels)
    mem = PrototypeMemory.empty(memory.capacity, memory.decay, memory.decay_on_create)
    beta, gamma, tau = params.beta, params.gamma, params.tau
    preds = []
    for z, y, k in zip(Z, labels, known):
        est = e_step(z, mem, beta, gamma, tau)
        guess = mem.labels[int(np.argmax(est.yhat))] if mem.ids else -1
        preds.append(RankedPrediction(float(est.uhat), guess, y, k))
        if y in mem.labels:
            onehot = np.zeros(len(mem))
            onehot[mem.labels.index(y)] = 1.0
            mem = m_step(z, mem, onehot, 0.0)
        else:
            mem = create_prototype(z, mem, label=y)
    return preds


def default_alpha_grid(n: int = 21) -> np.ndarray:
    return np.linspace(0.025, 0.975, n)


def ami_max(
    episodes,
    embed_fn: Callable,
    params,
    alpha_grid: Sequence[float] | None = None,
    memory: MemoryConfig | None = None,
) -> tuple[float, float]:
    """Best mean AMI over the threshold grid, and the threshold attaining it."""
    grid = default_alpha_grid() if alpha_grid is None else list(alpha_grid)
    if len(grid) == 0:
        raise ValueError("alpha grid must be nonempty")
    embedded = [_embed(ep, embed_fn, params) for ep in episodes]
    best, best_alpha = -math.inf, float(grid[0])
    for alpha in grid:
        scores = [
            ami([f.label for f in ep], unsupervised_readout(ep, embed_fn, params, alpha, memory, embeddings=Z))
            for ep, Z in zip(episodes, embedded)
        ]
        mean = float(np.mean(scores)) if scores else float("nan")
        if mean > best:
            best, best_alpha = mean, float(alpha)
    return best, best_alpha


# -- offline probes ------------------------------------------------------------


def knn_readout(train_x, train_y, test_x, test_y, k: int) -> float:
    """Cosine k-NN majority vote; ties go to the smallest label."""
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y)
    if len(train_x) == 0:
        raise ValueError("empty training set")
    if not 1 <= k <= len(train_x):
        raise ValueError(f"k must lie in [1, {len(train_x)}]")
    a = train_x / np.linalg.norm(train_x, axis=1, keepdims=True)
    b = test_x / np.linalg.norm(test_x, axis=1, keepdims=True)
    sims = b @ a.T
    correct = 0
    for row, y in zip(sims, test_y):
        nbrs = np.argsort(-row, kind="stable")[:k]
        labels, votes = np.unique(train_y[nbrs], return_counts=True)
        pred = labels[np.flatnonzero(votes == votes.max())[0]]
        correct += pred == y
    return correct / len(test_x)


def linear_readout(
    train_x, train_y, test_x, test_y, epochs: int = 20, lr: float = 1e-3, *, batch_size: int = 32, seed: int = 0,
    return_train_accuracy: bool = False,
):
    """Multinomial logistic regression trained with Adam on frozen features."""
    from .trainer import Adam

    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    classes = np.unique(np.asarray(train_y))
    if len(classes) < 2:
        raise ValueError("linear readout needs at least two classes")
    index = {c: i for i, c in enumerate(classes)}
    yi = np.array([index[c] for c in train_y])
    d, m = train_x.shape[1], len(classes)
    params = {"W": np.zeros((d, m)), "b": np.zeros(m)}
    opt = Adam(lr=lr)
    rng = np.random.Generator(np.random.Philox(seed))
    for _ in range(epochs):
        order = rng.permutation(len(train_x))
        for start in range(0, len(order), batch_size):
            idx = order[start: start + batch_size]
            logits = train_x[idx] @ params["W"] + params["b"]
            logits -= logits.max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(len(idx)), yi[idx]] -= 1.0
            p /= len(idx)
            grads = {"W": train_x[idx].T @ p, "b": p.sum(axis=0)}
            params = opt.step(params, grads)

    def accuracy(x, y):
        pred = classes[np.argmax(x @ params["W"] + params["b"], axis=1)]
        return float(np.mean(pred == np.asarray(y)))

    test_acc = accuracy(test_x, test_y)
    if return_train_accuracy:
        return test_acc, accuracy(train_x, train_y)
    return test_acc
