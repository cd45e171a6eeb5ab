"""KL probes against restricted references and stage detection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..attention import ModelParams, predict
from ..errors import ConfigError, DomainError
from ..markov import TaskSpec, restricted_predictor, windows

log = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-300
LARGE_KL = 50.0


def kl_divergence(p, q, axis: int = -1) -> np.ndarray:
    """KL(p || q) = sum p log(p / q) along ``axis``; q is clamped at 1e-300.

    Values above 50 nats are logged as a warning (p has mass where q is
    essentially zero).
    """
    p = np.asarray(p, dtype=float)
    q = np.maximum(np.asarray(q, dtype=float), PROBABILITY_FLOOR)
    if p.shape != q.shape:
        raise DomainError(f"shapes {p.shape} and {q.shape} differ")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(q)), 0.0)
    out = np.maximum(terms.sum(axis=axis), 0.0)
    if np.any(out > LARGE_KL):
        log.warning("KL divergence above %g nats: reference mass where the model has none", LARGE_KL)
    return out


class ReferencePredictions:
    """Restricted ground-truth laws for a fixed probe batch, computed once."""

    def __init__(self, spec: TaskSpec, probe, indices):
        self.probe = np.asarray(probe)
        contexts = windows(spec, self.probe)
        self.tables = {int(i): restricted_predictor(spec, int(i), contexts) for i in indices}

    def kl(self, predictions: np.ndarray) -> dict:
        return {i: float(kl_divergence(table, predictions).mean()) for i, table in self.tables.items()}


def probe_restricted_gt(spec: TaskSpec, params: ModelParams, probe, i: int) -> float:
    """Mean KL(restricted ground truth with i groups || model) over the probe batch."""
    if not 1 <= i <= spec.h:
        raise DomainError(f"group count must lie in [1, {spec.h}]")
    reference = restricted_predictor(spec, i, windows(spec, probe))
    return float(kl_divergence(reference, predict(params, probe)).mean())


def probe_restricted_model(params: ModelParams, probe, references: dict) -> dict:
    """Mean KL(reference with context limit c || model) for every c in ``references``."""
    if not references:
        return {}
    model = predict(params, probe)
    return {c: float(kl_divergence(predict(ref, probe), model).mean()) for c, ref in references.items()}


def require_references(references: dict | None, limits) -> dict:
    """Reference models for every context limit, or a configuration error."""
    references = references or {}
    missing = [c for c in limits if c not in references]
    if missing:
        raise ConfigError(f"no reference model for context limits {missing} and training is disabled")
    return {c: references[c] for c in limits}


@dataclass
class StageReport:
    """Crossing step (first step below threshold x initial value) per series."""

    names: list
    threshold: float
    crossings: list = field(default_factory=list)

    @property
    def stage_count(self) -> int:
        return sum(c is not None for c in self.crossings)

    @property
    def ordered(self) -> bool:
        """Crossing steps strictly increase along the series order (all series crossing)."""
        if any(c is None for c in self.crossings):
            return False
        return all(a < b for a, b in zip(self.crossings, self.crossings[1:]))

    @property
    def nondecreasing(self) -> bool:
        """Crossed series keep their order (uncrossed series are ignored)."""
        seen = [c for c in self.crossings if c is not None]
        return all(a <= b for a, b in zip(seen, seen[1:]))

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "stage_count": self.stage_count,
                "series": {n: c for n, c in zip(self.names, self.crossings)}}


def detect_stages(steps, series: dict, threshold: float = 0.1) -> StageReport:
    """Detect the first crossing of ``threshold`` x (value at the first step) in each series."""
    if not 0 < threshold < 1:
        raise DomainError("threshold fraction must lie in (0, 1)")
    steps = np.asarray(steps)
    report = StageReport(list(series), threshold)
    for name, values in series.items():
        values = np.asarray(values, dtype=float)
        if values.size == 0 or values.size != steps.size:
            raise DomainError(f"series {name!r} must be nonempty and aligned with the steps")
        below = np.nonzero(values < threshold * values[0])[0]
        report.crossings.append(int(steps[below[0]]) if len(below) else None)
    return report
