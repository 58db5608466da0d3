"""Synthetic non-iid episodes and the JSONL episode format.

Every frame is produced from a class latent mean living in the first
``latent_dim`` coordinates of observation space, plus noise, and is then
rotated by a fixed orthogonal world transform.  Random numbers come from
numpy's Philox counter-based generator keyed on ``(seed, ...)`` tuples, so a
given key always yields the same stream on every platform.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

__all__ = [
    "DISTRACTOR_LABEL_BASE",
    "EpisodeFormatError",
    "EpisodeFrame",
    "EpisodeSource",
    "StreamConfig",
    "World",
    "crp_class_sequence",
    "generate_episode",
    "inject_distractors",
    "iid_shuffle",
    "lag1_same_class_rate",
    "load_episodes",
    "make_rng",
    "write_episodes",
]

# Distractor classes use labels DISTRACTOR_LABEL_BASE + d, far above any
# regular class id in a desk-scale episode.
DISTRACTOR_LABEL_BASE = 1_000_000

# Stream-role tags mixed into Philox keys.
_WORLD, _DISTRACTOR_MEANS, _EPISODE, _INJECT, _SHUFFLE, _AUGMENT = 1, 2, 3, 4, 5, 6


def make_rng(*keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in keys])))


@dataclass(frozen=True)
class StreamConfig:
    episode_length: int = 150
    num_contexts: int = 5
    max_classes_per_context: int | None = None
    crp_concentration: float = 1.0
    latent_dim: int = 16
    observation_dim: int = 16
    separation: float = 1.0
    class_noise: float = 0.1
    view_noise: float = 0.1
    nuisance_std: float = 0.0
    mean_mode: str = "sphere"
    world_seed: int = 0
    distractor_rate: float = 0.0
    distractor_pool: int = 10
    iid_shuffle: bool = False
    queue_size: int = 1000

    def __post_init__(self):
        if self.episode_length < 1:
            raise ValueError("episode_length must be >= 1")
        if self.num_contexts < 1:
            raise ValueError("num_contexts must be >= 1")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ValueError("distractor_rate must lie in [0, 1]")
        if self.latent_dim < 1 or self.observation_dim < self.latent_dim:
            raise ValueError("need 1 <= latent_dim <= observation_dim")
        if self.crp_concentration < 0:
            raise ValueError("crp_concentration must be non-negative")
        if self.mean_mode not in ("sphere", "orthogonal"):
            raise ValueError("mean_mode must be 'sphere' or 'orthogonal'")
        if self.distractor_pool < 1:
            raise ValueError("distractor_pool must be >= 1")
        if self.queue_size < 1:
            raise ValueError("queue_size must be >= 1")


@dataclass
class EpisodeFrame:
    t: int
    features: np.ndarray
    view2: np.ndarray
    label: int | None = None
    context: int = 0

    def __eq__(self, other):
        if not isinstance(other, EpisodeFrame):
            return NotImplemented
        return (
            self.t == other.t and self.label == other.label and self.context == other.context
            and np.array_equal(self.features, other.features) and np.array_equal(self.view2, other.view2)
        )


def _random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _sphere(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    v = rng.standard_normal(n)
    return radius * v / np.linalg.norm(v)


class World:
    """Fixed observation model shared by all episodes of one config."""

    def __init__(self, config: StreamConfig):
        self.config = config
        self.transform = _random_orthogonal(make_rng(config.world_seed, _WORLD), config.observation_dim)
        drng = make_rng(config.world_seed, _DISTRACTOR_MEANS)
        self.distractor_means = np.stack(
            [_sphere(drng, config.latent_dim, config.separation) for _ in range(config.distractor_pool)]
        )

    def observe(self, latent: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One augmented view of a latent sample (``latent_dim`` coordinates)."""
        cfg = self.config
        x = np.zeros(cfg.observation_dim)
        x[: cfg.latent_dim] = latent + cfg.view_noise * rng.standard_normal(cfg.latent_dim)
        extra = cfg.observation_dim - cfg.latent_dim
        if extra:
            x[cfg.latent_dim:] = cfg.nuisance_std * rng.standard_normal(extra)
        return self.transform @ x

    def frame(self, t: int, mean: np.ndarray, label, context: int, rng: np.random.Generator) -> EpisodeFrame:
        latent = mean + self.config.class_noise * rng.standard_normal(self.config.latent_dim)
        return EpisodeFrame(t, self.observe(latent, rng), self.observe(latent, rng), label, context)


def crp_class_sequence(length: int, concentration: float, rng: np.random.Generator, max_classes: int | None = None) -> list[int]:
    """Sequential Chinese-restaurant draws; labels in order of first appearance."""
    counts: list[int] = []
    out = []
    for t in range(length):
        can_open = max_classes is None or len(counts) < max_classes
        new_mass = concentration if can_open else 0.0
        total = t + new_mass
        if total <= 0.0:
            # concentration 0 on the first draw: the only option is a new table
            k = len(counts)
        else:
            u = rng.random() * total
            k = len(counts)
            acc = 0.0
            for j, c in enumerate(counts):
                acc += c
                if u < acc:
                    k = j
                    break
            if k == len(counts) and not can_open:
                k = len(counts) - 1
        if k == len(counts):
            counts.append(0)
        counts[k] += 1
        out.append(k)
    return out


def _context_lengths(T: int, E: int) -> list[int]:
    base, rem = divmod(T, E)
    return [base + (1 if i < rem else 0) for i in range(E)]


def generate_episode(config: StreamConfig, seed: int, world: World | None = None) -> list[EpisodeFrame]:
    """Contexts as contiguous blocks, each with its own CRP over fresh classes."""
    world = world or World(config)
    rng = make_rng(config.world_seed, _EPISODE, seed)
    frames: list[EpisodeFrame] = []
    means: list[np.ndarray] = []
    basis = None
    if config.mean_mode == "orthogonal":
        basis = _random_orthogonal(rng, config.latent_dim) * config.separation
    t = 0
    for ctx, length in enumerate(_context_lengths(config.episode_length, config.num_contexts)):
        local = crp_class_sequence(length, config.crp_concentration, rng, config.max_classes_per_context)
        offset = len(means)
        for k in range(max(local, default=-1) + 1):
            if basis is not None:
                if offset + k >= config.latent_dim:
                    raise ValueError("orthogonal class means need more latent dimensions than classes")
                means.append(basis[:, offset + k])
            else:
                means.append(_sphere(rng, config.latent_dim, config.separation))
        for k in local:
            label = offset + k
            frames.append(world.frame(t, means[label], label, ctx, rng))
            t += 1
    return frames


def inject_distractors(episode: list[EpisodeFrame], config: StreamConfig, seed: int, world: World | None = None) -> list[EpisodeFrame]:
    """Replace each frame by a distractor-pool sample with probability ``distractor_rate``."""
    if config.distractor_rate == 0.0:
        return list(episode)
    world = world or World(config)
    rng = make_rng(config.world_seed, _INJECT, seed)
    out = []
    for f in episode:
        if rng.random() < config.distractor_rate:
            d = int(rng.integers(config.distractor_pool))
            g = world.frame(f.t, world.distractor_means[d], DISTRACTOR_LABEL_BASE + d, f.context, rng)
            out.append(g)
        else:
            out.append(f)
    return out


def iid_shuffle(episodes: list[list[EpisodeFrame]], queue_size: int, seed: int) -> list[list[EpisodeFrame]]:
    """Streaming shuffle through a fixed-size random queue, then re-chunk.

    The queue spans episode boundaries.  Output episodes keep the input
    episode lengths.
    """
    if queue_size < 1:
        raise ValueError("queue_size must be >= 1")
    rng = make_rng(_SHUFFLE, seed)
    lengths = [len(e) for e in episodes]
    source = (f for e in episodes for f in e)
    buf: list[EpisodeFrame] = []
    emitted: list[EpisodeFrame] = []
    for f in source:
        if len(buf) < queue_size:
            buf.append(f)
            continue
        j = int(rng.integers(len(buf)))
        emitted.append(buf[j])
        buf[j] = f
    while buf:
        j = int(rng.integers(len(buf)))
        emitted.append(buf.pop(j))
    out, pos = [], 0
    for n in lengths:
        chunk = [replace(f, t=i) for i, f in enumerate(emitted[pos: pos + n])]
        out.append(chunk)
        pos += n
    return out


def lag1_same_class_rate(episode: list[EpisodeFrame]) -> float:
    pairs = [(a.label, b.label) for a, b in zip(episode, episode[1:]) if a.context == b.context]
    if not pairs:
        return float("nan")
    return sum(a == b for a, b in pairs) / len(pairs)


class EpisodeSource:
    """Deterministic episode for every training step index.

    ``source(i)`` depends only on ``(config, seed, i)``, which is what makes
    resumed training reproduce an uninterrupted run.
    """

    def __init__(self, config: StreamConfig, seed: int, shuffle_block: int = 16):
        self.config = config
        self.seed = seed
        self.world = World(config)
        self.shuffle_block = shuffle_block
        self._block: tuple[int, list] | None = None

    def _raw(self, i: int) -> list[EpisodeFrame]:
        ep = generate_episode(self.config, (self.seed * 1_000_003 + i) % 2**63, self.world)
        return inject_distractors(ep, self.config, (self.seed * 1_000_003 + i) % 2**63, self.world)

    def __call__(self, i: int) -> list[EpisodeFrame]:
        if not self.config.iid_shuffle:
            return self._raw(i)
        b = i // self.shuffle_block
        if self._block is None or self._block[0] != b:
            raw = [self._raw(b * self.shuffle_block + j) for j in range(self.shuffle_block)]
            self._block = (b, iid_shuffle(raw, self.config.queue_size, self.seed * 7919 + b))
        return self._block[1][i % self.shuffle_block]

    def episodes(self, n: int, start: int = 0) -> list[list[EpisodeFrame]]:
        return [self(start + i) for i in range(n)]


# -- JSONL episode files -----------------------------------------------------


class EpisodeFormatError(ValueError):
    pass


def _frame_to_json(f: EpisodeFrame) -> str:
    rec = {
        "t": int(f.t),
        "context": int(f.context),
        "label": None if f.label is None else int(f.label),
        "features": [float(v) for v in f.features],
    }
    if f.view2 is not None:
        rec["view2"] = [float(v) for v in f.view2]
    return json.dumps(rec)


def write_episodes(episodes: Iterable[list[EpisodeFrame]], path) -> int:
    """Write episodes separated by blank lines; returns the frame count."""
    n = 0
    with open(path, "w") as fh:
        for i, ep in enumerate(episodes):
            if i:
                fh.write("\n")
            for f in ep:
                fh.write(_frame_to_json(f) + "\n")
                n += 1
    return n


def load_episodes(path, *, view_noise: float = 0.1, seed: int = 0) -> Iterator[list[EpisodeFrame]]:
    """Stream episodes from a JSONL file.

    Frames missing ``view2`` get one synthesized by additive isotropic
    Gaussian noise of standard deviation ``view_noise``.
    """
    dim = None
    episode: list[EpisodeFrame] = []
    n_ep = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                if episode:
                    yield episode
                    n_ep += 1
                    episode = []
                continue
            try:
                rec = json.loads(line)
                feats = np.asarray(rec["features"], dtype=np.float64)
                t = int(rec["t"])
                ctx = int(rec.get("context", 0))
                label = rec.get("label")
                label = None if label is None else int(label)
            except (ValueError, KeyError, TypeError) as exc:
                raise EpisodeFormatError(f"line {lineno}: malformed frame ({exc})") from None
            if feats.ndim != 1 or not np.all(np.isfinite(feats)):
                raise EpisodeFormatError(f"line {lineno}: features must be a flat list of finite numbers")
            if dim is None:
                dim = feats.shape[0]
            elif feats.shape[0] != dim:
                raise EpisodeFormatError(f"line {lineno}: feature length {feats.shape[0]} differs from {dim}")
            if rec.get("view2") is not None:
                view2 = np.asarray(rec["view2"], dtype=np.float64)
                if view2.shape != feats.shape:
                    raise EpisodeFormatError(f"line {lineno}: view2 length {view2.shape[0]} differs from {dim}")
            else:
                rng = make_rng(_AUGMENT, seed, n_ep, t)
                view2 = feats + view_noise * rng.standard_normal(dim)
            episode.append(EpisodeFrame(t, feats, view2, label, ctx))
    if episode:
        yield episode
