"""Training loop: AdamW (or SGD), global-norm clipping, plateau scheduler."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .attention import ModelParams, Grads, forward_tokens, backward, cross_entropy, targets_of, init_params
from .errors import ConfigError, NumericError
from .markov import TaskSpec, sample_batch


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 3000
    lr: float = 0.003
    clip: float = 1.0
    weight_decay: float = 0.01
    patience: int = 10
    factor: float = 0.5
    init_scale: float = 1.0
    optimizer: str = "adamw"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    eval_every: int = 10
    online: bool = False

    def __post_init__(self):
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps, batch size and evaluation stride must be positive")
        if self.lr < 0 or self.clip <= 0 or not 0 < self.factor < 1:
            raise ConfigError("invalid learning rate, clip norm or scheduler factor")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored loss has
    failed to improve (relative threshold 1e-4) on more than ``patience``
    consecutive evaluations."""

    lr: float
    patience: int = 10
    factor: float = 0.5
    threshold: float = 1e-4
    best: float = np.inf
    bad_checks: int = 0

    def observe(self, loss: float) -> float:
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.bad_checks = 0
        else:
            self.bad_checks += 1
        if self.bad_checks > self.patience:
            self.lr *= self.factor
            self.bad_checks = 0
        return self.lr


@dataclass
class OptimizerState:
    """Adaptive-moment state with decoupled weight decay."""

    first: Grads
    second: Grads
    step: int = 0
    lr: float = 0.003
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, **kwargs) -> "OptimizerState":
        zeros = lambda: Grads(np.zeros_like(params.attn), np.zeros_like(params.value))
        return cls(zeros(), zeros(), **kwargs)


def clip_by_global_norm(grads: Grads, max_norm: float) -> tuple[Grads, float]:
    norm = grads.global_norm()
    if norm > max_norm:
        scale = max_norm / norm
        grads = Grads(grads.attn * scale, grads.value * scale)
    return grads, norm


def adamw_update(params: ModelParams, grads: Grads, state: OptimizerState) -> None:
    state.step += 1
    b1, b2 = state.betas
    for name in ("attn", "value"):
        p, g = getattr(params, name), getattr(grads, name)
        m, v = getattr(state.first, name), getattr(state.second, name)
        p *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** state.step)
        v_hat = v / (1 - b2 ** state.step)
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def sgd_update(params: ModelParams, grads: Grads, state: OptimizerState) -> None:
    state.step += 1
    for name in ("attn", "value"):
        p = getattr(params, name)
        p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * getattr(grads, name)


class TrainingAborted(NumericError):
    """Raised when the loss turns non-finite; carries the offending step."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass
class TrainResult:
    params: ModelParams
    rows: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)


def train(spec: TaskSpec, train_data, val_data, config: TrainConfig, rng: np.random.Generator,
          callback: Callable | None = None, params: ModelParams | None = None,
          context_limit: int | None = None, keep_snapshots: bool = False) -> TrainResult:
    """Train the attention model by minibatch cross-entropy minimization.

    ``train_data`` is an array of sequences; with ``config.online`` a fresh
    batch is sampled from ``spec`` every step instead.  Every
    ``config.eval_every`` steps (and at step 0) the validation loss drives
    the plateau scheduler, a row is appended to the result and
    ``callback(step, params, row)`` is invoked; its return value (a dict,
    or None) is merged into the row.
    """
    if params is None:
        params = init_params(spec, config.init_scale, rng, context_limit=context_limit)
    else:
        params = params.copy()
    state = OptimizerState.for_params(params, lr=config.lr, weight_decay=config.weight_decay,
                                      betas=config.betas, eps=config.eps)
    scheduler = PlateauScheduler(config.lr, config.patience, config.factor)
    update = adamw_update if config.optimizer == "adamw" else sgd_update
    train_data = None if config.online else np.asarray(train_data)
    val_targets = targets_of(val_data, spec.w)
    result = TrainResult(params)
    for step in range(config.steps + 1):
        if config.online:
            batch = sample_batch(spec, config.batch_size, rng)
        elif config.batch_size >= len(train_data):
            batch = train_data
        else:
            batch = train_data[np.sort(rng.choice(len(train_data), config.batch_size, replace=False))]
        cache = forward_tokens(params, batch)
        try:
            train_loss = cross_entropy(cache, targets_of(batch, spec.w))
        except NumericError as exc:
            raise TrainingAborted(f"non-finite loss at step {step}", {"step": step, "lr": state.lr}) from exc
        if step % config.eval_every == 0 or step == config.steps:
            val_loss = cross_entropy(forward_tokens(params, val_data), val_targets)
            row = {"step": step, "train_loss": train_loss, "val_loss": val_loss, "lr": state.lr}
            if callback is not None:
                row.update(callback(step, params, row) or {})
            result.rows.append(row)
            if keep_snapshots:
                result.snapshots.append((step, params.copy()))
            if step > 0:
                state.lr = scheduler.observe(val_loss)
        if step == config.steps:
            break
        with np.errstate(over="ignore"):
            grads, grad_norm = clip_by_global_norm(backward(params, cache, targets_of(batch, spec.w)), config.clip)
        if not np.isfinite(grad_norm):
            raise TrainingAborted(f"non-finite gradient norm at step {step}",
                                  {"step": step, "lr": state.lr, "train_loss": train_loss})
        update(params, grads, state)
        if not (np.all(np.isfinite(params.attn)) and np.all(np.isfinite(params.value))):
            raise TrainingAborted(f"non-finite parameters after step {step}",
                                  {"step": step, "lr": state.lr, "train_loss": train_loss})
    result.params = params
    return result
