import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from stagewise.errors import DimensionError, DomainError, NumericError
from stagewise.numerics import (SumTensor, apply_pi, apply_pi_squared, check_simplex, log_softmax, pi_projector,
                                renormalize_simplex, sample_orthogonal, softmax, tensor_apply_left,
                                tensor_apply_right, tensor_frob_norm, tensor_inner)

finite = st.floats(-50, 50, allow_nan=False)


def dense(t: SumTensor) -> np.ndarray:
    return np.einsum("kab,kt->abt", t.mats, t.vecs)


def random_tensor(rng, K, d=3, T=4):
    return SumTensor(rng.standard_normal((K, d, d)), rng.standard_normal((K, T)))


class TestSoftmax:
    def test_uniform_for_equal_logits(self):
        np.testing.assert_allclose(softmax(np.zeros(5)), np.full(5, 0.2))

    def test_large_logits_do_not_overflow(self):
        p = softmax(np.array([1000.0, 1000.0, -1000.0]))
        np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-300)

    @given(arrays(float, st.integers(1, 12), elements=finite))
    def test_simplex_and_shift_invariance(self, z):
        p = softmax(z)
        assert np.all(p >= 0)
        assert abs(p.sum() - 1) < 1e-12
        np.testing.assert_allclose(softmax(z + 3.7), p, atol=1e-12)

    def test_log_softmax_matches_log(self):
        z = np.array([0.3, -1.2, 2.0])
        np.testing.assert_allclose(log_softmax(z), np.log(softmax(z)), atol=1e-14)

    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(DimensionError):
            softmax(np.array([]))
        with pytest.raises(NumericError):
            softmax(np.array([0.0, np.nan]))


class TestProjector:
    def test_vertex_has_zero_projector(self):
        np.testing.assert_array_equal(pi_projector(np.array([0.0, 1.0, 0.0])), np.zeros((3, 3)))

    def test_uniform_projector(self):
        T = 4
        expected = np.eye(T) / T - np.ones((T, T)) / T ** 2
        np.testing.assert_allclose(pi_projector(np.full(T, 1 / T)), expected)

    @given(st.integers(2, 10), st.integers(0, 2 ** 31))
    def test_symmetric_psd_with_ones_in_kernel(self, T, seed):
        rng = np.random.default_rng(seed)
        s = rng.dirichlet(np.ones(T))
        P = pi_projector(s)
        np.testing.assert_allclose(P, P.T)
        np.testing.assert_allclose(P @ np.ones(T), 0, atol=1e-15)
        assert np.linalg.eigvalsh(P).min() > -1e-14

    @given(st.integers(2, 10), st.integers(0, 2 ** 31))
    def test_matrix_free_products(self, T, seed):
        rng = np.random.default_rng(seed)
        s = rng.dirichlet(np.ones(T))
        g = rng.standard_normal(T)
        P = pi_projector(s)
        np.testing.assert_allclose(apply_pi(s, g), P @ g, atol=1e-14)
        np.testing.assert_allclose(apply_pi_squared(s, g), P @ P @ g, atol=1e-14)

    @settings(max_examples=200)
    @given(st.integers(2, 10), st.integers(0, 2 ** 31))
    def test_projection_keeps_shared_argmax(self, T, seed):
        # s and v sharing their argmax index i: (Pi(s) v) peaks at i.
        rng = np.random.default_rng(seed)
        s = rng.dirichlet(np.ones(T))
        v = rng.standard_normal(T)
        i = int(np.argmax(s))
        j = int(np.argmax(v))
        v[[i, j]] = v[[j, i]]
        if np.sum(v == v.max()) > 1 or np.sum(s == s.max()) > 1:
            return
        out = apply_pi(s, v)
        assert np.argmax(out) == i or np.isclose(out.max(), out[i], rtol=0, atol=1e-15)

    def test_off_simplex_rejected(self):
        with pytest.raises(DomainError):
            pi_projector(np.array([0.5, 0.6]))
        with pytest.raises(DomainError):
            check_simplex(np.array([1.5, -0.5]))

    def test_renormalize_reports_correction(self):
        s, corr = renormalize_simplex(np.array([0.5, 0.5 + 1e-3, -1e-3]))
        assert abs(s.sum() - 1) < 1e-15 and s.min() >= 0
        assert 1e-3 < corr < 3e-3


class TestOrthogonal:
    @pytest.mark.parametrize("d", [1, 2, 5, 16])
    def test_orthogonality(self, d):
        Q = sample_orthogonal(d, np.random.default_rng(d))
        np.testing.assert_allclose(Q.T @ Q, np.eye(d), atol=1e-12)

    def test_seeded_reproducible(self):
        a = sample_orthogonal(6, np.random.default_rng(3))
        b = sample_orthogonal(6, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_haar_first_moment(self):
        # entries of a Haar matrix have mean zero and variance 1/d
        rng = np.random.default_rng(0)
        samples = np.stack([sample_orthogonal(4, rng) for _ in range(4000)])
        np.testing.assert_allclose(samples.mean(axis=0), 0, atol=0.03)
        np.testing.assert_allclose(samples.var(axis=0), 0.25, atol=0.03)


class TestSumTensor:
    def test_apply_right_against_dense(self):
        rng = np.random.default_rng(1)
        t = random_tensor(rng, 3)
        v = rng.standard_normal(4)
        np.testing.assert_allclose(tensor_apply_right(t, v), dense(t) @ v, atol=1e-12)
        np.testing.assert_allclose(t.apply_right(v), dense(t) @ v, atol=1e-12)

    def test_apply_left_against_dense(self):
        rng = np.random.default_rng(2)
        t = random_tensor(rng, 2)
        X = rng.standard_normal((3, 3))
        np.testing.assert_allclose(tensor_apply_left(X, t), np.einsum("ab,abt->t", X, dense(t)), atol=1e-12)

    @given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 2 ** 31))
    def test_inner_product_matches_dense(self, K, L, seed):
        rng = np.random.default_rng(seed)
        m, n = random_tensor(rng, K), random_tensor(rng, L)
        assert tensor_inner(m, n) == pytest.approx(float(np.sum(dense(m) * dense(n))), abs=1e-10)
        assert tensor_frob_norm(m) == pytest.approx(np.linalg.norm(dense(m)), abs=1e-10)

    def test_zero_tensor(self):
        z = SumTensor.zeros((3, 3), 4)
        assert tensor_frob_norm(z) == 0
        np.testing.assert_array_equal(z.apply_right(np.ones(4)), np.zeros((3, 3)))

    def test_difference_and_weights(self):
        rng = np.random.default_rng(5)
        m = random_tensor(rng, 2)
        w = np.array([2.0, -1.0])
        weighted = SumTensor.from_terms(m.mats, m.vecs, w)
        np.testing.assert_allclose(dense(weighted), np.einsum("k,kab,kt->abt", w, m.mats, m.vecs))
        assert tensor_frob_norm(m - m) == pytest.approx(0, abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            SumTensor(np.zeros((2, 3, 3)), np.zeros((3, 4)))
        with pytest.raises(DimensionError):
            tensor_apply_right(SumTensor.zeros((3, 3), 4), np.zeros(5))
