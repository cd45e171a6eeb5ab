"""Gradient flow of the linear-attention regression model.

The target is the tensor G = sum_k m_k V_k* (x) s_k* with orthonormal
matrices V_k* and one-hot positions s_k*; the model is
P = sum_k V_k (x) s_k with every s_k on the simplex.  The loss is
L = 1/2 ||G - P||^2 and the flow reads

    dV_k/dt = (G - P) s_k,      ds_k/dt = Pi(s_k)^2 (V_k^T (G - P)).

Besides the full h-head flow this module provides the reduced systems
obtained when heads are tied together (``coupled``), when h - 1 heads sit on
the first feature while one head breaks away (``cooperative``), and the
slow-scale dynamics of the breakaway head with the already learned features
projected out (``two_scale``, ``higher_order``).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .errors import ConfigError, DimensionError, DomainError
from .markov import geometric_scales
from .numerics import SumTensor, apply_pi_squared, tensor_inner


@dataclass(frozen=True)
class GroundTruth:
    """Scales m_k (decreasing), orthonormal directions V_k* and one-hot positions."""

    scales: np.ndarray
    directions: np.ndarray
    positions: np.ndarray
    T: int

    @property
    def h(self) -> int:
        return len(self.scales)

    @property
    def d(self) -> int:
        return self.directions.shape[1]

    def position_vector(self, k: int) -> np.ndarray:
        e = np.zeros(self.T)
        e[self.positions[k]] = 1.0
        return e

    @property
    def position_vectors(self) -> np.ndarray:
        return np.stack([self.position_vector(k) for k in range(self.h)])

    def target(self, start: int = 0) -> SumTensor:
        """G with the first ``start`` features removed."""
        return SumTensor.from_terms(self.directions[start:], self.position_vectors[start:], self.scales[start:])

    def optimum(self) -> tuple[np.ndarray, np.ndarray]:
        """An exact factorization: V_k = m_k V_k*, s_k = s_k*."""
        return self.scales[:, None, None] * self.directions, self.position_vectors


def gram_schmidt(mats: np.ndarray) -> np.ndarray:
    """Orthonormalize matrices in the Frobenius inner product (two passes)."""
    out = []
    for m in mats:
        v = np.array(m, dtype=float)
        for _ in range(2):
            for q in out:
                v -= np.sum(q * v) * q
        out.append(v / np.linalg.norm(v))
    return np.stack(out)


def build_ground_truth(d: int, T: int, h: int, m: float, b0: float, rng: np.random.Generator) -> GroundTruth:
    """Gaussian directions orthonormalized by Gram-Schmidt; s_k* = e_k; m_k = m^(h-k) b0."""
    if h < 1 or h > min(d * d, T):
        raise ConfigError(f"h={h} must lie in [1, min(d^2, T)]")
    if m <= 1 and h > 1:
        raise ConfigError("the scale ratio m must exceed one")
    if b0 <= 0:
        raise ConfigError("b0 must be positive")
    directions = gram_schmidt(rng.standard_normal((h, d, d)))
    return GroundTruth(geometric_scales(h, m, b0), directions, np.arange(h), T)


@dataclass
class FlowState:
    """Per-head value matrices V (h, d, d) and attention vectors s (h, T) at time t."""

    V: np.ndarray
    s: np.ndarray
    t: float = 0.0


def model_tensor(V: np.ndarray, s: np.ndarray) -> SumTensor:
    return SumTensor(V, s)


def factorization_loss(state: FlowState, gt: GroundTruth) -> float:
    r = gt.target() - model_tensor(state.V, state.s)
    return 0.5 * max(tensor_inner(r, r), 0.0)


def residual_coefficients(V: np.ndarray, s: np.ndarray, gt: GroundTruth) -> np.ndarray:
    """Coefficients of G - P on the orthonormal pairs V_j* (x) e_p, shape (h, T)."""
    overlaps = np.einsum("kab,jab->kj", V, gt.directions)
    coef = -overlaps.T @ s
    coef[np.arange(gt.h), gt.positions] += gt.scales
    return coef


def feature_residuals(state: FlowState, gt: GroundTruth) -> np.ndarray:
    """Loss contribution 1/2 <G - P, V_j* (x) s_j*>^2 of every feature j."""
    coef = residual_coefficients(state.V, state.s, gt)
    return 0.5 * coef[np.arange(gt.h), gt.positions] ** 2


def loss_components(state: FlowState, gt: GroundTruth) -> tuple[np.ndarray, float]:
    """Split the loss into (feature, position) contributions plus the remainder.

    The (h, T) table holds 1/2 <G - P, V_j* (x) e_p>^2; the remainder is the
    part of the loss orthogonal to every V_j*.
    """
    table = 0.5 * residual_coefficients(state.V, state.s, gt) ** 2
    return table, factorization_loss(state, gt) - float(table.sum())


def full_rhs(state: FlowState, gt: GroundTruth) -> tuple[np.ndarray, np.ndarray]:
    r = gt.target() - model_tensor(state.V, state.s)
    dV = np.stack([r.apply_right(s_k) for s_k in state.s])
    ds = np.stack([apply_pi_squared(s_k, r.apply_left(V_k)) for V_k, s_k in zip(state.V, state.s)])
    return dV, ds


def coupled_rhs(V: np.ndarray, s: np.ndarray, gt: GroundTruth, h: int) -> tuple[np.ndarray, np.ndarray]:
    """All h heads equal: dV = G s - h|s|^2 V, ds = Pi(s)^2 (V^T G - h|V|^2 s)."""
    g = gt.target()
    dV = g.apply_right(s) - h * np.dot(s, s) * V
    ds = apply_pi_squared(s, g.apply_left(V) - h * np.sum(V * V) * s)
    return dV, ds


def cooperative_rhs(V: np.ndarray, V_off: np.ndarray, s_off: np.ndarray, gt: GroundTruth, h: int):
    """h - 1 heads at (V, s_1*) and one breakaway head at (V_off, s_off).

    Returns the derivatives of (V, V_off, s_off).
    """
    g = gt.target()
    s1 = gt.position_vector(0)
    overlap = np.dot(s1, s_off)
    ds_off = apply_pi_squared(s_off, g.apply_left(V_off) - (h - 1) * np.sum(V_off * V) * s1
                              - np.sum(V_off * V_off) * s_off)
    dV = gt.scales[0] * np.dot(s1, s1) * gt.directions[0] - (h - 1) * np.dot(s1, s1) * V - overlap * V_off
    dV_off = g.apply_right(s_off) - (h - 1) * overlap * V - np.dot(s_off, s_off) * V_off
    return dV, dV_off, ds_off


def ensemble_target(V_off: np.ndarray, s_off: np.ndarray, gt: GroundTruth, h: int) -> np.ndarray:
    """Value of V that zeroes the ensemble derivative for a frozen breakaway head."""
    s1 = gt.position_vector(0)
    return (gt.scales[0] * gt.directions[0] - np.dot(s1, s_off) * V_off) / (h - 1)


def project_matrix(V: np.ndarray, gt: GroundTruth, count: int) -> np.ndarray:
    """Remove the components of V along V_1*, ..., V_count*."""
    out = V.copy()
    for j in range(count):
        out -= np.sum(gt.directions[j] * V) * gt.directions[j]
    return out


def project_vector(s: np.ndarray, gt: GroundTruth, count: int) -> np.ndarray:
    """Remove the components of s along s_1*, ..., s_count*."""
    out = s.copy()
    out[gt.positions[:count]] = 0.0
    return out


def higher_order_rhs(n: int, V_off: np.ndarray, s_off: np.ndarray, gt: GroundTruth):
    """Slow dynamics of a head breaking away towards feature n.

    Features 1..n-1 are taken as learned and projected out of the target,
    of the breakaway value and of its attention vector.
    """
    if not 2 <= n <= gt.h:
        raise DomainError(f"breakaway index must lie in [2, {gt.h}], got {n}")
    g = gt.target(n - 1)
    s_proj = project_vector(s_off, gt, n - 1)
    V_proj = project_matrix(V_off, gt, n - 1)
    dV = g.apply_right(s_proj) - np.dot(s_proj, s_proj) * V_off
    ds = apply_pi_squared(s_off, g.apply_left(V_proj) - np.sum(V_off * V_off) * s_proj)
    return dV, ds


def two_scale_rhs(V_off: np.ndarray, s_off: np.ndarray, gt: GroundTruth):
    return higher_order_rhs(2, V_off, s_off, gt)


def lyapunov_phi(V: np.ndarray, s: np.ndarray, gt: GroundTruth, h: int) -> float:
    """<V, G s> - h/2 |V|^2 |s|^2, nondecreasing along the coupled flow."""
    return float(np.sum(V * gt.target().apply_right(s)) - 0.5 * h * np.sum(V * V) * np.dot(s, s))


def lyapunov_coop(V: np.ndarray, V_off: np.ndarray, s_off: np.ndarray, gt: GroundTruth, h: int) -> float:
    """Nondecreasing along the cooperative flow."""
    s1 = gt.position_vector(0)
    overlap = np.dot(s1, s_off)
    return float((h - 1) * gt.scales[0] * np.sum(V * gt.directions[0])
                 - 0.5 * (h - 1) ** 2 * np.sum(V * V)
                 - (h - 1) * overlap * np.sum(V * V_off)
                 + np.sum(V_off * gt.target().apply_right(s_off))
                 - 0.5 * np.dot(s_off, s_off) * np.sum(V_off * V_off))


def lyapunov_breakaway(n: int, V_off: np.ndarray, s_off: np.ndarray, gt: GroundTruth) -> float:
    """<V', G_(n-1) s'_(n-1)> - 1/2 |V'|^2 |s'_(n-1)|^2, nondecreasing along the slow flow."""
    s_proj = project_vector(s_off, gt, n - 1)
    return float(np.sum(V_off * gt.target(n - 1).apply_right(s_proj))
                 - 0.5 * np.sum(V_off * V_off) * np.dot(s_proj, s_proj))


KINDS = ("full", "coupled", "cooperative", "two_scale", "higher_order")


@dataclass(frozen=True)
class FlowSystem:
    """A flow variant in a uniform layout: stacks V (H, d, d) and S (H, T).

    Every variant is a weighted flow against a truncated target: with head
    multiplicities w_l and the first ``start`` features removed,
    P = sum_l w_l V_l (x) (mask * s_l) and

        dV_l = (G_start - P)(mask * s_l),  ds_l = Pi(s_l)^2 (V_l^T (G_start - P)),

    where ``mask`` zeroes the positions of the removed features.  The
    layouts are: full (H = h), coupled (H = 1, weight h), cooperative
    (H = 2, weights h - 1 and 1, the first attention vector pinned at s_1*),
    and two_scale/higher_order (H = 1, start = n - 1).
    """

    kind: str
    gt: GroundTruth
    h: int
    n: int = 2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown flow kind {self.kind!r}")
        if self.kind == "two_scale" and self.n != 2:
            raise ConfigError("the two-scale system breaks away towards feature 2")
        if self.kind == "higher_order" and not 2 <= self.n <= self.gt.h:
            raise DomainError(f"breakaway index must lie in [2, {self.gt.h}]")
        if self.kind in ("cooperative",) and self.h < 2:
            raise ConfigError("the cooperative system needs h >= 2")

    @property
    def heads(self) -> int:
        return {"full": self.h, "coupled": 1, "cooperative": 2}.get(self.kind, 1)

    @property
    def weights(self) -> np.ndarray:
        if self.kind == "coupled":
            return np.array([float(self.h)])
        if self.kind == "cooperative":
            return np.array([self.h - 1.0, 1.0])
        return np.ones(self.heads)

    @property
    def start(self) -> int:
        return self.n - 1 if self.kind in ("two_scale", "higher_order") else 0

    @property
    def mask(self) -> np.ndarray:
        out = np.ones(self.gt.T)
        out[self.gt.positions[:self.start]] = 0.0
        return out

    def check_state(self, V: np.ndarray, S: np.ndarray):
        H, d, T = self.heads, self.gt.d, self.gt.T
        if V.shape != (H, d, d) or S.shape != (H, T):
            raise DimensionError(f"{self.kind} state needs V {(H, d, d)} and S {(H, T)}")

    def derivative(self, V: np.ndarray, S: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Reference evaluation through the per-variant right-hand sides."""
        gt, h = self.gt, self.h
        if self.kind == "full":
            return full_rhs(FlowState(V, S), gt)
        if self.kind == "coupled":
            dV, ds = coupled_rhs(V[0], S[0], gt, h)
            return dV[None], ds[None]
        if self.kind == "cooperative":
            dV, dV_off, ds_off = cooperative_rhs(V[0], V[1], S[1], gt, h)
            return np.stack([dV, dV_off]), np.stack([np.zeros(gt.T), ds_off])
        dV, ds = higher_order_rhs(self.n, V[0], S[0], gt)
        return dV[None], ds[None]

    def embed(self, V: np.ndarray, S: np.ndarray) -> FlowState:
        """The h-head state represented by a reduced state (breakaway last)."""
        if self.kind == "full":
            return FlowState(V, S)
        if self.kind == "coupled":
            return FlowState(np.repeat(V, self.h, axis=0), np.repeat(S, self.h, axis=0))
        if self.kind == "cooperative":
            reps = [self.h - 1, 1]
            return FlowState(np.repeat(V, reps, axis=0), np.repeat(S, reps, axis=0))
        raise ConfigError("the slow breakaway systems have no h-head embedding")

    def loss(self, V: np.ndarray, S: np.ndarray) -> float:
        """Objective whose gradient flow this is (weighted, truncated target)."""
        masked = S * self.mask
        r = self.gt.target(self.start) - SumTensor.from_terms(V, masked, self.weights)
        return 0.5 * max(tensor_inner(r, r), 0.0)

    def lyapunov(self, V: np.ndarray, S: np.ndarray) -> float:
        """Nondecreasing along the flow; -loss for the full system."""
        if self.kind == "full":
            return -self.loss(V, S)
        if self.kind == "coupled":
            return lyapunov_phi(V[0], S[0], self.gt, self.h)
        if self.kind == "cooperative":
            return lyapunov_coop(V[0], V[1], S[1], self.gt, self.h)
        return lyapunov_breakaway(self.n, V[0], S[0], self.gt)

    def kernel_args(self):
        gt = self.gt
        return (np.ascontiguousarray(gt.directions[self.start:]), np.ascontiguousarray(gt.scales[self.start:]),
                np.ascontiguousarray(gt.positions[self.start:].astype(np.int64)), self.mask, self.weights)


def symmetric_init(gt: GroundTruth, h: int, value_scale: float = 0.01, tilt: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """V = value_scale * G 1/T and s uniform tilted towards s_1*.

    Satisfies the ordering conditions <V, V_1* - V_k*> >= 0 and
    <s, s_1* - s_k*> >= 0 strictly.
    """
    T = gt.T
    s = np.full(T, (1.0 - tilt) / T)
    s[gt.positions[0]] += tilt
    V = value_scale * gt.target().apply_right(np.full(T, 1.0 / T))
    return V, s


def noisy_uniform_init(gt: GroundTruth, h: int, noise: float, rng: np.random.Generator):
    """V_k = 0 and s_k = 1/T + Gaussian noise (std ``noise``) projected back to the simplex.

    Returns (V, S, S_raw) where S_raw is the pre-projection attention.
    """
    if noise < 0:
        raise DomainError("noise level must be nonnegative")
    raw = np.full((h, gt.T), 1.0 / gt.T) + noise * rng.standard_normal((h, gt.T))
    S = np.clip(raw, 0.0, None)
    S /= S.sum(axis=1, keepdims=True)
    return np.zeros((h, gt.d, gt.d)), S, raw


def ordering_margins(V: np.ndarray, s: np.ndarray, gt: GroundTruth) -> tuple[np.ndarray, np.ndarray]:
    """(<V, V_1* - V_k*>, <s, s_1* - s_k*>) for k = 2..h."""
    ov = np.einsum("ab,kab->k", V, gt.directions)
    os_ = s[gt.positions]
    return ov[0] - ov[1:], os_[0] - os_[1:]


def match_heads(V: np.ndarray, S: np.ndarray, targets_V: np.ndarray, targets_S: np.ndarray):
    """Best assignment of heads to targets (exhaustive over permutations).

    Returns (permutation, V residuals, s residuals) where head ``perm[k]`` is
    matched with target k.
    """
    h = len(V)
    best = None
    for perm in permutations(range(h)):
        rv = np.array([np.linalg.norm(V[p] - targets_V[k]) for k, p in enumerate(perm)])
        rs = np.array([np.linalg.norm(S[p] - targets_S[k]) for k, p in enumerate(perm)])
        cost = float(np.sum(rv ** 2 + rs ** 2))
        if best is None or cost < best[0]:
            best = (cost, perm, rv, rs)
    return best[1], best[2], best[3]
