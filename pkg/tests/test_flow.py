import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import brute_tensor_loss, monte_carlo_regression_loss
from stagewise import _kernels
from stagewise.errors import ConfigError, DimensionError, DomainError
from stagewise.flow import (FlowState, FlowSystem, build_ground_truth, coupled_rhs, ensemble_target,
                            factorization_loss, feature_residuals, full_rhs, gram_schmidt, loss_components,
                            match_heads, noisy_uniform_init, ordering_margins, project_matrix, symmetric_init)
from stagewise.numerics import pi_projector


def random_instance(seed, d=None, T=None, h=None):
    rng = np.random.default_rng(seed)
    h = h or int(rng.integers(1, 4))
    d = d or int(rng.integers(2, 6))
    T = T or int(rng.integers(h, 7))
    gt = build_ground_truth(d, T, h, 1.3 + rng.random(), 0.5 + rng.random(), rng)
    V = rng.standard_normal((h, d, d))
    S = rng.dirichlet(np.ones(T), size=h)
    return gt, V, S


def numeric_gradient(fun, x, step=1e-6):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + step
        up = fun()
        x[idx] = old - step
        down = fun()
        x[idx] = old
        grad[idx] = (up - down) / (2 * step)
    return grad


class TestGroundTruth:
    def test_directions_orthonormal(self):
        gt = build_ground_truth(4, 5, 3, 1.7, 2.0, np.random.default_rng(0))
        gram = np.einsum("kab,jab->kj", gt.directions, gt.directions)
        np.testing.assert_allclose(gram, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(gt.scales, [1.7 ** 2 * 2, 1.7 * 2, 2])
        np.testing.assert_array_equal(gt.positions, [0, 1, 2])

    def test_gram_schmidt_spans(self):
        mats = np.random.default_rng(1).standard_normal((3, 2, 2))
        q = gram_schmidt(mats)
        coeff = np.einsum("kab,jab->kj", mats, q)
        assert np.allclose(np.triu(coeff, 1), 0, atol=1e-12)

    @pytest.mark.parametrize("args", [(2, 3, 4, 1.7, 1.0), (3, 2, 3, 1.7, 1.0), (3, 4, 2, 1.0, 1.0),
                                      (3, 4, 2, 1.7, 0.0)])
    def test_invalid(self, args):
        with pytest.raises(ConfigError):
            build_ground_truth(*args, np.random.default_rng(0))


class TestLoss:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_matches_dense_tensor(self, seed):
        gt, V, S = random_instance(seed)
        expected = brute_tensor_loss(V, S, gt.scales, gt.directions, gt.positions)
        assert factorization_loss(FlowState(V, S), gt) == pytest.approx(expected, rel=1e-10, abs=1e-12)

    def test_zero_at_optimum(self):
        gt, _, _ = random_instance(0)
        V, S = gt.optimum()
        assert factorization_loss(FlowState(V, S), gt) == pytest.approx(0, abs=1e-20)
        np.testing.assert_allclose(feature_residuals(FlowState(V, S), gt), 0, atol=1e-20)

    def test_components_add_up(self):
        gt, V, S = random_instance(3)
        table, remainder = loss_components(FlowState(V, S), gt)
        assert remainder >= -1e-10
        assert table.sum() + remainder == pytest.approx(factorization_loss(FlowState(V, S), gt))

    def test_monte_carlo_regression_form(self):
        gt, V, S = random_instance(4, d=3, T=4, h=2)
        V *= 0.3
        mean, se = monte_carlo_regression_loss(V, S, gt.scales, gt.directions, gt.positions, 20_000,
                                               np.random.default_rng(0))
        assert abs(factorization_loss(FlowState(V, S), gt) - mean) <= 3 * se


class TestRightHandSides:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_full_rhs_is_preconditioned_gradient(self, seed):
        gt, V, S = random_instance(seed)
        loss = lambda: factorization_loss(FlowState(V, S), gt)
        dV, dS = full_rhs(FlowState(V, S), gt)
        gV, gS = numeric_gradient(loss, V), numeric_gradient(loss, S)
        np.testing.assert_allclose(dV, -gV, rtol=1e-6, atol=1e-6)
        for k in range(len(S)):
            P = pi_projector(S[k])
            np.testing.assert_allclose(dS[k], -P @ P @ gS[k], rtol=1e-6, atol=1e-6)

    def test_loss_decreases_along_flow(self):
        gt, V, S = random_instance(5)
        dV, dS = full_rhs(FlowState(V, S), gt)
        step = 1e-6
        before = factorization_loss(FlowState(V, S), gt)
        after = factorization_loss(FlowState(V + step * dV, S + step * dS), gt)
        assert after < before

    def test_simplex_tangent(self):
        gt, V, S = random_instance(6)
        _, dS = full_rhs(FlowState(V, S), gt)
        np.testing.assert_allclose(dS.sum(axis=1), 0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_coupled_is_full_on_tied_heads(self, seed):
        gt, V, S = random_instance(seed, h=3)
        tied = FlowSystem("coupled", gt, 3)
        dV, dS = tied.derivative(V[:1], S[:1])
        state = tied.embed(V[:1], S[:1])
        fV, fS = full_rhs(state, gt)
        for k in range(3):
            np.testing.assert_allclose(fV[k], dV[0], atol=1e-12)
            np.testing.assert_allclose(fS[k], dS[0], atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_cooperative_is_full_on_pinned_heads(self, seed):
        gt, V, S = random_instance(seed, h=3)
        S[0] = gt.position_vector(0)
        coop = FlowSystem("cooperative", gt, 3)
        dV, dS = coop.derivative(V[:2], S[:2])
        fV, fS = full_rhs(coop.embed(V[:2], S[:2]), gt)
        np.testing.assert_allclose(fV[0], dV[0], atol=1e-12)
        np.testing.assert_allclose(fV[1], dV[0], atol=1e-12)
        np.testing.assert_allclose(fV[2], dV[1], atol=1e-12)
        np.testing.assert_allclose(fS[2], dS[1], atol=1e-12)
        np.testing.assert_allclose(fS[:2], 0, atol=1e-12)

    def test_ensemble_target_zeroes_value_derivative(self):
        gt, V, S = random_instance(7, h=3)
        s_off = S[1]
        coop = FlowSystem("cooperative", gt, 3)
        target = ensemble_target(V[1], s_off, gt, 3)
        dV, _ = coop.derivative(np.stack([target, V[1]]), np.stack([gt.position_vector(0), s_off]))
        np.testing.assert_allclose(dV[0], 0, atol=1e-12)

    @pytest.mark.parametrize("kind,n", [("full", 2), ("coupled", 2), ("cooperative", 2), ("two_scale", 2),
                                        ("higher_order", 3)])
    def test_compiled_kernel_matches_reference(self, kind, n):
        gt, V, S = random_instance(8, d=4, T=5, h=3)
        system = FlowSystem(kind, gt, 3, n)
        H = system.heads
        V, S = V[:H].copy(), S[:H].copy()
        if kind == "cooperative":
            S[0] = gt.position_vector(0)
        dV, dS = system.derivative(V, S)
        dirs, scales, pos, mask, weights = system.kernel_args()
        kV, kS = _kernels.evaluate(V.reshape(H, -1).copy(), S, dirs.reshape(len(dirs), -1), scales, pos, mask,
                                   weights)
        np.testing.assert_allclose(kV.reshape(dV.shape), dV, atol=1e-10)
        np.testing.assert_allclose(kS, dS, atol=1e-10)

    @pytest.mark.parametrize("kind", ["full", "coupled"])
    def test_system_derivative_is_weighted_gradient(self, kind):
        gt, V, S = random_instance(9, d=3, T=4, h=2)
        system = FlowSystem(kind, gt, 2)
        H = system.heads
        V, S = V[:H].copy(), S[:H].copy()
        dV, dS = system.derivative(V, S)
        loss = lambda: system.loss(V, S)
        gV, gS = numeric_gradient(loss, V), numeric_gradient(loss, S)
        for k in range(H):
            w = system.weights[k]
            P = pi_projector(S[k])
            np.testing.assert_allclose(dV[k], -gV[k] / w, rtol=1e-6, atol=1e-6)
            np.testing.assert_allclose(dS[k], -P @ P @ gS[k] / w, rtol=1e-6, atol=1e-6)

    def test_coupled_rhs_zero_at_tied_optimum(self):
        gt, _, _ = random_instance(10, h=3)
        V = gt.scales[0] / 3 * gt.directions[0]
        dV, ds = coupled_rhs(V, gt.position_vector(0), gt, 3)
        np.testing.assert_allclose(dV, 0, atol=1e-12)
        np.testing.assert_allclose(ds, 0, atol=1e-12)


class TestSystems:
    def test_shape_validation(self):
        gt, V, S = random_instance(0, h=3)
        with pytest.raises(DimensionError):
            FlowSystem("coupled", gt, 3).check_state(V, S)

    def test_kind_validation(self):
        gt, _, _ = random_instance(0, h=3)
        with pytest.raises(ConfigError):
            FlowSystem("other", gt, 3)
        with pytest.raises(DomainError):
            FlowSystem("higher_order", gt, 3, n=4)
        with pytest.raises(ConfigError):
            FlowSystem("two_scale", gt, 3, n=3)

    def test_projection_removes_learned_directions(self):
        gt, V, _ = random_instance(1, h=3)
        proj = project_matrix(V[0], gt, 2)
        np.testing.assert_allclose(np.einsum("ab,kab->k", proj, gt.directions[:2]), 0, atol=1e-12)


class TestInitializations:
    def test_symmetric_init_ordering(self):
        gt, _, _ = random_instance(2, h=3)
        V, s = symmetric_init(gt, 3)
        mv, ms = ordering_margins(V, s, gt)
        assert np.all(mv > 0) and np.all(ms > 0)
        assert s.sum() == pytest.approx(1)

    @given(st.floats(0, 0.05), st.integers(0, 1000))
    def test_noisy_init_on_simplex(self, noise, seed):
        gt, _, _ = random_instance(3, h=2)
        V, S, raw = noisy_uniform_init(gt, 2, noise, np.random.default_rng(seed))
        assert np.all(V == 0)
        np.testing.assert_allclose(S.sum(axis=1), 1)
        assert S.min() >= 0 and raw.shape == S.shape

    def test_negative_noise_rejected(self):
        gt, _, _ = random_instance(3, h=2)
        with pytest.raises(DomainError):
            noisy_uniform_init(gt, 2, -1.0, np.random.default_rng(0))

    def test_match_heads_recovers_permutation(self):
        gt, _, _ = random_instance(4, h=3)
        V, S = gt.optimum()
        perm, rv, rs = match_heads(V[[2, 0, 1]], S[[2, 0, 1]], V, S)
        assert tuple(perm) == (1, 2, 0)
        np.testing.assert_allclose(rv, 0)
        np.testing.assert_allclose(rs, 0)
