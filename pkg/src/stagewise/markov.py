"""Order-w Markov process whose lags are grouped by importance.

The next token is drawn from softmax(sum_k A_k sum_{i in I(k)} alpha_i x_{t-i})
where ``x_{t-i}`` is the one-hot encoding of the token ``i`` steps back
(lag 0 is the most recent token).  Feature matrices are scaled random
orthogonal matrices, A_k = m_k Q_k with m_k = m^(h-k) b0.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, DomainError
from .numerics import sample_orthogonal, softmax

DATASET_MAGIC = b"MKTK1"
_DATASET_HEADER = struct.Struct("<5sIIIII")


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a seed and stream labels.

    String labels are hashed with CRC-32 so streams are stable across runs.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in keys:
        words.append(zlib.crc32(key.encode()) if isinstance(key, str) else int(key))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def geometric_scales(h: int, m: float, b0: float) -> np.ndarray:
    """m_k = m^(h-k) b0 for k = 1..h (largest first)."""
    return np.array([m ** (h - k) * b0 for k in range(1, h + 1)])


def equal_intervals(w: int, h: int) -> tuple[tuple[int, ...], ...]:
    """Split lags 0..w-1 into h contiguous blocks of equal width."""
    if h < 1 or w % h:
        raise ConfigError(f"equal layout needs h to divide w (w={w}, h={h})")
    width = w // h
    return tuple(tuple(range(k * width, (k + 1) * width)) for k in range(h))


def _check_partition(intervals, w: int):
    seen = sorted(i for group in intervals for i in group)
    if seen != list(range(w)) or any(len(g) == 0 for g in intervals):
        raise ConfigError(f"intervals {intervals} do not partition lags 0..{w - 1}")


@dataclass(frozen=True)
class TaskSpec:
    """A fully specified Markov task.

    ``directions`` holds the orthogonal factors Q_k (unit operator norm) and
    ``scales`` the m_k, so the feature matrices are ``scales[k] * directions[k]``.
    """

    d: int
    w: int
    T: int
    intervals: tuple
    alphas: np.ndarray
    scales: np.ndarray
    directions: np.ndarray
    m: float = 1.0
    b0: float = 1.0
    seed: int = 0
    _lag_group: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        _check_partition(self.intervals, self.w)
        alphas = np.asarray(self.alphas, dtype=float)
        if alphas.shape != (self.w,):
            raise ConfigError("one alpha weight per lag is required")
        for group in self.intervals:
            if abs(alphas[list(group)].sum() - 1.0) > 1e-12:
                raise ConfigError(f"alpha weights on {group} do not sum to one")
        h = len(self.intervals)
        if np.shape(self.directions) != (h, self.d, self.d) or np.shape(self.scales) != (h,):
            raise DimensionError("feature arrays do not match (h, d, d)")
        lag_group = np.empty(self.w, dtype=int)
        for k, group in enumerate(self.intervals):
            lag_group[list(group)] = k
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "_lag_group", lag_group)

    @property
    def h(self) -> int:
        return len(self.intervals)

    @property
    def features(self) -> np.ndarray:
        return self.scales[:, None, None] * self.directions

    @property
    def length(self) -> int:
        """Sequence length including the w seed tokens."""
        return self.T + self.w

    def with_features(self, features) -> "TaskSpec":
        """Copy of the task with the feature matrices replaced (scales set to one)."""
        features = np.asarray(features, dtype=float)
        return TaskSpec(self.d, self.w, self.T, self.intervals, self.alphas,
                        np.ones(self.h), features, self.m, self.b0, self.seed)

    def to_config(self) -> dict:
        return {"d": self.d, "w": self.w, "T": self.T, "h": self.h,
                "intervals": [list(g) for g in self.intervals],
                "alphas": [float(a) for a in self.alphas],
                "m": float(self.m), "b0": float(self.b0), "seed": int(self.seed)}


def build_task(d: int, w: int, T: int, h: int, m: float, b0: float, seed: int = 0,
               intervals=None, alphas=None) -> TaskSpec:
    """Build a task with Haar-orthogonal features scaled geometrically.

    ``intervals`` defaults to h contiguous equal blocks of lags; ``alphas``
    defaults to 1/|I(k)| on every lag of group k.
    """
    if m <= 0 or b0 <= 0:
        raise ConfigError("m and b0 must be positive")
    if min(d, w, T, h) < 1:
        raise ConfigError("d, w, T and h must be positive")
    if intervals is None:
        intervals = equal_intervals(w, h)
    intervals = tuple(tuple(int(i) for i in g) for g in intervals)
    if len(intervals) != h:
        raise ConfigError(f"{len(intervals)} intervals given for h={h}")
    _check_partition(intervals, w)
    if alphas is None:
        alphas = np.empty(w)
        for group in intervals:
            alphas[list(group)] = 1.0 / len(group)
    rng = make_rng(seed, "features")
    directions = np.stack([sample_orthogonal(d, rng) for _ in range(h)])
    return TaskSpec(d, w, T, intervals, np.asarray(alphas, dtype=float),
                    geometric_scales(h, m, b0), directions, m, b0, seed)


def minimal_task(d: int = 20, T: int = 20, m: float = 1.7, b0: float = 10.0, seed: int = 0) -> TaskSpec:
    """Three groups of two adjacent lags each (w = 6)."""
    return build_task(d, 6, T, 3, m, b0, seed, intervals=((0, 1), (2, 3), (4, 5)))


def _check_contexts(spec: TaskSpec, contexts) -> np.ndarray:
    contexts = np.asarray(contexts)
    if contexts.shape[-1] != spec.w:
        raise DimensionError(f"context of length {spec.w} expected, got {contexts.shape[-1]}")
    if not np.issubdtype(contexts.dtype, np.integer):
        raise DomainError("token ids must be integers")
    if contexts.size and (contexts.min() < 0 or contexts.max() >= spec.d):
        raise DomainError(f"token ids must lie in [0, {spec.d})")
    return contexts


def conditional_logits(spec: TaskSpec, contexts, groups: int | None = None) -> np.ndarray:
    """Logits of the next token for contexts of shape (..., w), oldest token first.

    Only the first ``groups`` groups contribute when given.
    """
    contexts = _check_contexts(spec, contexts)
    groups = spec.h if groups is None else groups
    features = spec.features
    logits = np.zeros(contexts.shape[:-1] + (spec.d,))
    for lag in range(spec.w):
        k = spec._lag_group[lag]
        if k >= groups:
            continue
        tokens = contexts[..., spec.w - 1 - lag]
        logits += spec.alphas[lag] * features[k].T[tokens]
    return logits


def next_token_distribution(spec: TaskSpec, context) -> np.ndarray:
    """Exact conditional law of the next token given the last w tokens."""
    return softmax(conditional_logits(spec, context))


def restricted_predictor(spec: TaskSpec, i: int, context) -> np.ndarray:
    """Conditional law using only the first ``i`` (most important) groups."""
    if not 1 <= i <= spec.h:
        raise DomainError(f"group count must lie in [1, {spec.h}], got {i}")
    return softmax(conditional_logits(spec, context, groups=i))


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row of ``probs`` by inverse-CDF sampling."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cdf[..., -1]
    draws = (cdf < u[..., None]).sum(axis=-1)
    return np.minimum(draws, probs.shape[-1] - 1)


def sample_batch(spec: TaskSpec, count: int, rng: np.random.Generator) -> np.ndarray:
    """Sequences of shape (count, w + T): w uniform seed tokens then T generated ones."""
    if count < 1:
        raise DomainError("count must be at least 1")
    seqs = np.empty((count, spec.length), dtype=np.int64)
    seqs[:, :spec.w] = rng.integers(0, spec.d, size=(count, spec.w))
    for n in range(spec.w, spec.length):
        probs = next_token_distribution(spec, seqs[:, n - spec.w:n])
        seqs[:, n] = sample_categorical(probs, rng)
    return seqs


def windows(spec: TaskSpec, seqs) -> np.ndarray:
    """Contexts for every generated position: shape (count, T, w)."""
    seqs = np.asarray(seqs)
    idx = np.arange(spec.T)[:, None] + np.arange(spec.w)[None, :]
    return seqs[:, idx]


def write_dataset(path, spec: TaskSpec, seqs) -> None:
    seqs = np.asarray(seqs)
    if seqs.ndim != 2 or seqs.shape[1] != spec.length:
        raise DimensionError("sequences must have shape (count, w + T)")
    if spec.d > 0xFFFF:
        raise DomainError("alphabet too large for 16-bit token storage")
    header = _DATASET_HEADER.pack(DATASET_MAGIC, spec.d, spec.w, spec.T, spec.h, seqs.shape[0])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(seqs.astype("<u2").tobytes())


def read_dataset(path) -> tuple[dict, np.ndarray]:
    """Return (header fields, sequences) from a dataset file."""
    raw = Path(path).read_bytes()
    if len(raw) < _DATASET_HEADER.size:
        raise DomainError("dataset file is truncated")
    magic, d, w, T, h, count = _DATASET_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise DomainError(f"bad dataset magic {magic!r}")
    body = np.frombuffer(raw, dtype="<u2", offset=_DATASET_HEADER.size)
    if body.size != count * (w + T):
        raise DomainError("dataset body size does not match its header")
    header = {"d": d, "w": w, "T": T, "h": h, "count": count}
    return header, body.reshape(count, w + T).astype(np.int64)
