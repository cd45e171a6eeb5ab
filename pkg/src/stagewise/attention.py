"""Single-layer multi-head attention with merged key-query matrices.

Each sequence of length L = w + T is encoded as a (D, L) matrix whose
columns stack a one-hot token (d rows) on a one-hot position (L rows),
D = d + L.  Head k scores key column j against the query column q with
x_j^T A_k x_q, attends causally, and maps the attended input to token
logits through its value matrix.  The prediction for the token at
position n uses the query column q = n - 1 and keys j <= q.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, DomainError, NumericError
from .markov import TaskSpec, windows, next_token_distribution

CHECKPOINT_MAGIC = b"MODL1"
_CHECKPOINT_HEADER = struct.Struct("<5sIIIIII")
LOG_FLOOR = np.log(1e-300)


@dataclass
class ModelParams:
    """Merged attention matrices ``attn`` (h, D, D) and values ``value`` (h, d, D).

    ``T`` is the number of predicted positions; ``context_limit`` restricts
    every query to its ``context_limit`` most recent keys (itself included).
    """

    attn: np.ndarray
    value: np.ndarray
    T: int
    context_limit: int | None = None

    def __post_init__(self):
        self.attn = np.asarray(self.attn, dtype=float)
        self.value = np.asarray(self.value, dtype=float)
        h, D, D2 = self.attn.shape
        if D != D2 or self.value.shape != (h, self.value.shape[1], D):
            raise DimensionError(f"attention {self.attn.shape} and value {self.value.shape} disagree")
        if self.w < 1:
            raise DimensionError("dimensions leave no room for seed tokens")
        if self.context_limit is not None and not 1 <= self.context_limit <= self.length:
            raise DomainError(f"context limit must lie in [1, {self.length}]")

    @property
    def h(self) -> int:
        return self.attn.shape[0]

    @property
    def d(self) -> int:
        return self.value.shape[1]

    @property
    def D(self) -> int:
        return self.attn.shape[1]

    @property
    def length(self) -> int:
        return self.D - self.d

    @property
    def w(self) -> int:
        return self.length - self.T

    def copy(self) -> "ModelParams":
        return ModelParams(self.attn.copy(), self.value.copy(), self.T, self.context_limit)

    def permuted(self, order) -> "ModelParams":
        return ModelParams(self.attn[order], self.value[order], self.T, self.context_limit)


@dataclass
class Grads:
    attn: np.ndarray
    value: np.ndarray

    def global_norm(self) -> float:
        return float(np.sqrt(np.sum(self.attn ** 2) + np.sum(self.value ** 2)))


def zero_params(spec: TaskSpec, h: int | None = None, context_limit: int | None = None) -> ModelParams:
    h = spec.h if h is None else h
    D = spec.d + spec.length
    return ModelParams(np.zeros((h, D, D)), np.zeros((h, spec.d, D)), spec.T, context_limit)


def init_params(spec: TaskSpec, scale: float, rng: np.random.Generator, h: int | None = None,
                context_limit: int | None = None) -> ModelParams:
    """Attention entries uniform on [-scale, scale]; values zero."""
    params = zero_params(spec, h, context_limit)
    params.attn = rng.uniform(-scale, scale, size=params.attn.shape) if scale > 0 else params.attn
    return params


def augment_input(tokens, d: int) -> np.ndarray:
    """One-hot tokens stacked on one-hot positions.

    ``tokens`` of shape (L,) gives a (d + L, L) matrix; a batch (B, L) gives (B, d + L, L).
    """
    tokens = np.asarray(tokens)
    if not np.issubdtype(tokens.dtype, np.integer):
        raise DomainError("token ids must be integers")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= d):
        raise DomainError(f"token ids must lie in [0, {d})")
    single = tokens.ndim == 1
    tokens = np.atleast_2d(tokens)
    B, L = tokens.shape
    x = np.zeros((B, d + L, L))
    cols = np.arange(L)
    x[np.arange(B)[:, None], tokens, cols[None, :]] = 1.0
    x[:, d + cols, cols] = 1.0
    return x[0] if single else x


def attention_mask(T: int, w: int, context_limit: int | None = None) -> np.ndarray:
    """Boolean (T, L) array: query t may look at key j."""
    q = np.arange(T)[:, None] + w - 1
    j = np.arange(T + w)[None, :]
    allowed = j <= q
    if context_limit is not None:
        allowed &= j > q - context_limit
    return allowed


@dataclass
class ForwardCache:
    """Intermediate values of a forward pass, kept for the backward pass.

    ``attention`` has shape (B, h, T, L); ``logits`` and ``predictions``
    have shape (B, T, d).  ``head_values`` holds, for every head and key
    position, the value matrix applied to that key's input column.
    """

    tokens: np.ndarray
    attention: np.ndarray
    head_values: np.ndarray
    logits: np.ndarray
    log_predictions: np.ndarray
    predictions: np.ndarray = field(repr=False)
    score_index: tuple = field(repr=False, default=())


def _score_indices(tokens: np.ndarray, d: int, T: int, w: int):
    """Flat indices into a D x D matrix for the four blocks of x_j^T A x_q.

    Every column of the augmented input is e_token + e_(d + position), so the
    score splits into token/token, token/position, position/token and
    position/position lookups.
    """
    L = T + w
    D = d + L
    key_tok = tokens[:, None, :]
    query_tok = tokens[:, w - 1:w - 1 + T][:, :, None]
    key_pos = d + np.arange(L)[None, None, :]
    query_pos = d + w - 1 + np.arange(T)[None, :, None]
    batch_blocks = np.stack([key_tok * D + query_tok,
                             np.broadcast_to(key_tok * D + query_pos, (tokens.shape[0], T, L)),
                             np.broadcast_to(key_pos * D + query_tok, (tokens.shape[0], T, L))])
    shared_block = (key_pos * D + query_pos)[0]
    return batch_blocks, shared_block


def forward(params: ModelParams, x: np.ndarray) -> ForwardCache:
    """Forward pass on augmented inputs of shape (D, L) or (B, D, L)."""
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != (params.D, params.length):
        raise DimensionError(f"input of shape (*, {params.D}, {params.length}) expected, got {x.shape}")
    return forward_tokens(params, x[:, :params.d, :].argmax(axis=1))


def forward_tokens(params: ModelParams, tokens) -> ForwardCache:
    """Forward pass on token sequences of shape (B, L) (the one-hot input is implicit)."""
    tokens = np.atleast_2d(np.asarray(tokens))
    B, L = tokens.shape
    if L != params.length:
        raise DimensionError(f"sequences of length {params.length} expected, got {L}")
    T, w, d, h = params.T, params.w, params.d, params.h
    batch_blocks, shared_block = _score_indices(tokens, d, T, w)
    mask = attention_mask(T, w, params.context_limit)
    flat_attn = params.attn.reshape(h, -1)
    value_rows = params.value.transpose(0, 2, 1)
    attention = np.empty((B, h, T, L))
    head_values = np.empty((B, h, L, d))
    for k in range(h):
        scores = np.take(flat_attn[k], batch_blocks).sum(axis=0) + np.take(flat_attn[k], shared_block)
        scores = np.where(mask, scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        a = np.exp(scores)
        attention[:, k] = a / a.sum(axis=-1, keepdims=True)
        head_values[:, k] = value_rows[k][tokens] + value_rows[k][d:]
    logits = np.matmul(attention, head_values).sum(axis=1)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_pred = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return ForwardCache(tokens, attention, head_values, logits, log_pred, np.exp(log_pred),
                        (batch_blocks, shared_block))


def predict(params: ModelParams, seqs) -> np.ndarray:
    """Predicted next-token distributions (B, T, d) for token sequences (B, L)."""
    return forward_tokens(params, seqs).predictions


def targets_of(seqs, w: int) -> np.ndarray:
    return np.asarray(seqs)[:, w:]


def cross_entropy(cache: ForwardCache, targets) -> float:
    """Mean negative log-likelihood over the batch and the predicted positions."""
    targets = np.asarray(targets)
    if targets.shape != cache.log_predictions.shape[:2]:
        raise DimensionError(f"targets of shape {cache.log_predictions.shape[:2]} expected")
    picked = np.take_along_axis(cache.log_predictions, targets[..., None], axis=-1)
    if not np.all(np.isfinite(picked)):
        raise NumericError("non-finite log-likelihood")
    if picked.min() < LOG_FLOOR:
        raise NumericError("a target probability underflowed below 1e-300")
    return float(-picked.mean())


def conditional_entropy(spec: TaskSpec, seqs) -> float:
    """Mean entropy of the true next-token law over the predicted positions."""
    p = next_token_distribution(spec, windows(spec, seqs))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return float(-terms.sum(axis=-1).mean())


def excess_loss(spec: TaskSpec, cache: ForwardCache, seqs) -> float:
    """Cross-entropy minus the entropy of the true conditional."""
    return cross_entropy(cache, targets_of(seqs, spec.w)) - conditional_entropy(spec, seqs)


def backward(params: ModelParams, cache: ForwardCache, targets) -> Grads:
    """Exact gradient of the mean cross-entropy."""
    targets = np.asarray(targets)
    B, T, d = cache.predictions.shape
    if targets.shape != (B, T):
        raise DimensionError(f"targets of shape {(B, T)} expected, got {targets.shape}")
    h, D, w, L = params.h, params.D, params.w, params.length
    dlogits = cache.predictions.copy()
    rows = np.arange(B)[:, None]
    dlogits[rows, np.arange(T)[None, :], targets] -= 1.0
    dlogits /= B * T
    tokens = cache.tokens
    batch_blocks, shared_block = cache.score_index or _score_indices(tokens, d, T, w)
    token_onehot = np.zeros((B * L, d))
    token_onehot[np.arange(B * L), tokens.ravel()] = 1.0
    dattn = np.empty((h, D * D))
    dvalue_rows = np.zeros((h, D, d))
    for k in range(h):
        a = cache.attention[:, k]
        dhead = np.matmul(a.transpose(0, 2, 1), dlogits)
        dvalue_rows[k, :d] = token_onehot.T @ dhead.reshape(B * L, d)
        dvalue_rows[k, d:] = dhead.sum(axis=0)
        da = np.matmul(dlogits, cache.head_values[:, k].transpose(0, 2, 1))
        dscores = a * (da - np.sum(a * da, axis=-1, keepdims=True))
        dattn[k] = np.bincount(batch_blocks.ravel(), np.broadcast_to(dscores, batch_blocks.shape).ravel(),
                               minlength=D * D)
        dattn[k] += np.bincount(shared_block.ravel(), dscores.sum(axis=0).ravel(), minlength=D * D)
    return Grads(dattn.reshape(h, D, D), dvalue_rows.transpose(0, 2, 1))


def loss_and_grads(params: ModelParams, seqs) -> tuple[float, Grads]:
    cache = forward_tokens(params, seqs)
    targets = targets_of(seqs, params.w)
    return cross_entropy(cache, targets), backward(params, cache, targets)


def build_ideal_params(spec: TaskSpec, scale: float) -> ModelParams:
    """Positional attention on the lags of each group, values equal to the features.

    Head k puts score ``scale`` (shifted by log(alpha_i |I(k)|)) on key
    position q - i for every lag i of group k, so that as ``scale`` grows its
    attention converges to the alpha weights on those lags.
    """
    if scale < 0:
        raise DomainError("scale must be nonnegative")
    params = zero_params(spec)
    d, L = spec.d, spec.length
    for k, group in enumerate(spec.intervals):
        for lag in group:
            bonus = scale + np.log(spec.alphas[lag] * len(group)) if scale > 0 else 0.0
            for q in range(lag, L):
                params.attn[k, d + q - lag, d + q] = bonus
        params.value[k, :, :d] = spec.features[k]
    return params


def attention_summary(params: ModelParams, seqs) -> np.ndarray:
    """Mean attention mass per head and lag, shape (h, w).

    Averages over sequences and query positions; each row sums to at most
    one, the remainder sitting on keys older than w.
    """
    seqs = np.asarray(seqs)
    if seqs.size == 0:
        raise DimensionError("probe batch is empty")
    a = forward_tokens(params, seqs).attention
    T, w = params.T, params.w
    q = np.arange(T) + w - 1
    out = np.empty((params.h, w))
    for lag in range(w):
        out[:, lag] = a[:, :, np.arange(T), q - lag].mean(axis=(0, 2))
    return out


def save_checkpoint(path, params: ModelParams, step: int = 0) -> None:
    header = _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, params.d, params.T, params.w, params.h,
                                     params.context_limit or 0, step)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.attn.astype("<f8").tobytes())
        fh.write(params.value.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, int]:
    raw = Path(path).read_bytes()
    if len(raw) < _CHECKPOINT_HEADER.size:
        raise DomainError("checkpoint file is truncated")
    magic, d, T, w, h, limit, step = _CHECKPOINT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise DomainError(f"bad checkpoint magic {magic!r}")
    D = d + T + w
    body = np.frombuffer(raw, dtype="<f8", offset=_CHECKPOINT_HEADER.size)
    if body.size != h * D * D + h * d * D:
        raise DomainError("checkpoint body size does not match its header")
    attn = body[:h * D * D].reshape(h, D, D).copy()
    value = body[h * D * D:].reshape(h, d, D).copy()
    return ModelParams(attn, value, T, limit or None), step
