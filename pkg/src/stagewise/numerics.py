"""Small dense linear-algebra helpers and the factored tensor algebra.

Tensors of shape d x d x T that appear in the flow are always sums of
outer products ``B (x) v`` with ``B`` a d x d matrix and ``v`` a vector of
length T.  :class:`SumTensor` keeps them in that factored form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, NumericError

SIMPLEX_TOL = 1e-9


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max-subtraction)."""
    z = np.asarray(logits, dtype=float)
    if z.size == 0 or z.shape[axis] == 0:
        raise DimensionError("softmax of an empty input")
    if not np.all(np.isfinite(z)):
        raise NumericError("softmax input contains non-finite values")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def check_simplex(s, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Return ``s`` renormalized to sum one, or raise if it is off the simplex."""
    s = np.asarray(s, dtype=float)
    if s.ndim != 1 or s.size == 0:
        raise DimensionError("simplex vector must be a nonempty 1-d array")
    if not np.all(np.isfinite(s)):
        raise NumericError("simplex vector contains non-finite values")
    if s.min() < -tol or abs(s.sum() - 1.0) > tol:
        raise DomainError(f"vector is off the simplex (min {s.min():.3g}, sum {s.sum():.12g})")
    s = np.clip(s, 0.0, None)
    return s / s.sum()


def pi_projector(s, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """The softmax Jacobian diag(s) - s s^T for a point of the simplex."""
    s = check_simplex(s, tol)
    return np.diag(s) - np.outer(s, s)


def apply_pi(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Compute (diag(s) - s s^T) g without forming the matrix.

    Works row-wise when ``s`` and ``g`` are 2-d.
    """
    return s * (g - np.sum(s * g, axis=-1, keepdims=True))


def apply_pi_squared(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    return apply_pi(s, apply_pi(s, g))


def renormalize_simplex(s: np.ndarray) -> tuple[np.ndarray, float]:
    """Clamp negatives to zero and rescale to unit sum.

    Returns the projected vector and the Euclidean size of the correction.
    """
    out = np.clip(s, 0.0, None)
    out = out / out.sum(axis=-1, keepdims=True)
    return out, float(np.linalg.norm(out - s))


def sample_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix (QR with sign-corrected R diagonal)."""
    if d < 1:
        raise DimensionError("orthogonal matrix needs d >= 1")
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


@dataclass(frozen=True)
class SumTensor:
    """The tensor sum_k B_k (x) v_k, kept as its factors.

    ``mats`` has shape (K, d, d) and ``vecs`` has shape (K, T).
    """

    mats: np.ndarray
    vecs: np.ndarray

    def __post_init__(self):
        mats = np.asarray(self.mats, dtype=float)
        vecs = np.asarray(self.vecs, dtype=float)
        if mats.ndim != 3 or vecs.ndim != 2 or mats.shape[0] != vecs.shape[0]:
            raise DimensionError(f"incompatible factor shapes {mats.shape} and {vecs.shape}")
        object.__setattr__(self, "mats", mats)
        object.__setattr__(self, "vecs", vecs)

    @classmethod
    def from_terms(cls, mats, vecs, weights=None) -> "SumTensor":
        mats = np.asarray(mats, dtype=float)
        if weights is not None:
            mats = np.asarray(weights, dtype=float)[:, None, None] * mats
        return cls(mats, np.asarray(vecs, dtype=float))

    @classmethod
    def zeros(cls, matrix_shape: tuple[int, int], length: int) -> "SumTensor":
        return cls(np.zeros((0,) + tuple(matrix_shape)), np.zeros((0, length)))

    @property
    def matrix_shape(self) -> tuple[int, int]:
        return self.mats.shape[1:]

    @property
    def length(self) -> int:
        return self.vecs.shape[1]

    def __len__(self) -> int:
        return self.mats.shape[0]

    def _check_compatible(self, other: "SumTensor"):
        if self.matrix_shape != other.matrix_shape or self.length != other.length:
            raise DimensionError("tensors have different dimensions")

    def __add__(self, other: "SumTensor") -> "SumTensor":
        self._check_compatible(other)
        return SumTensor(np.concatenate([self.mats, other.mats]), np.concatenate([self.vecs, other.vecs]))

    def __neg__(self) -> "SumTensor":
        return SumTensor(-self.mats, self.vecs)

    def __sub__(self, other: "SumTensor") -> "SumTensor":
        return self + (-other)

    def scaled(self, c: float) -> "SumTensor":
        return SumTensor(c * self.mats, self.vecs)

    def apply_right(self, v) -> np.ndarray:
        return tensor_apply_right(self, v)

    def apply_left(self, x) -> np.ndarray:
        return tensor_apply_left(x, self)


def tensor_apply_right(m: SumTensor, v) -> np.ndarray:
    """M v = sum_k B_k <v_k, v>."""
    v = np.asarray(v, dtype=float)
    if v.shape != (m.length,):
        raise DimensionError(f"vector of length {m.length} expected, got shape {v.shape}")
    return np.tensordot(m.vecs @ v, m.mats, axes=1) if len(m) else np.zeros(m.matrix_shape)


def tensor_apply_left(x, m: SumTensor) -> np.ndarray:
    """X^T M = sum_k <B_k, X> v_k."""
    x = np.asarray(x, dtype=float)
    if x.shape != m.matrix_shape:
        raise DimensionError(f"matrix of shape {m.matrix_shape} expected, got {x.shape}")
    return np.einsum("kab,ab->k", m.mats, x) @ m.vecs


def tensor_inner(m: SumTensor, n: SumTensor) -> float:
    """Frobenius inner product, bilinear over all pairs of terms."""
    m._check_compatible(n)
    mat_gram = np.einsum("kab,lab->kl", m.mats, n.mats)
    vec_gram = m.vecs @ n.vecs.T
    return float(np.sum(mat_gram * vec_gram))


def tensor_frob_norm(m: SumTensor) -> float:
    return float(np.sqrt(max(tensor_inner(m, m), 0.0)))
