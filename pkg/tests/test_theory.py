import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st

from stagewise.errors import ConfigError
from stagewise.flow import build_ground_truth
from stagewise.theory import (FAIL, PASS, SADDLE, UNMET, CheckReport, check_bounded_deviation, check_boundedcoop,
                              check_competitive_fixed_point, check_early_alignment, check_higher_order,
                              check_lyapunov_suite, competitive_fixed_point, config_digest,
                              feature_crossing_times, fit_growth_rate, perturb_heads, sample_ordered_init,
                              taylor_displacement)


def small_gt(seed=0, d=4, T=5, h=3, b0=1.0):
    return build_ground_truth(d, T, h, 1.7, b0, np.random.default_rng(seed))


class TestReport:
    def report(self, **kw):
        base = dict(name="x", config={"a": 1}, residuals={"r": 0.5}, tolerances={"r": 1.0})
        base.update(kw)
        return CheckReport(**base)

    def test_status_rules(self):
        assert self.report().status == PASS
        assert self.report(residuals={"r": 2.0}).status == FAIL
        assert self.report(residuals={"r": float("nan")}).status == FAIL
        assert self.report(residuals={}).status == FAIL
        assert self.report(preconditions={"p": False}).status == UNMET
        assert self.report(saddle=True).status == SADDLE
        assert self.report(saddle=True, preconditions={"p": False}).status == SADDLE
        assert self.report(residuals={"r": 2.0}).failures() == ["r"]

    def test_text_is_parseable_and_stable(self):
        r = self.report(measurements={"v": np.float64(0.25)})
        parsed = yaml.safe_load(r.to_text())
        assert parsed["status"] == PASS and parsed["residuals"]["r"] == {"value": 0.5, "tolerance": 1.0}
        assert r.content_digest() == self.report(measurements={"v": 0.25}).content_digest()

    def test_digest_ignores_key_order(self):
        assert config_digest({"a": 1, "b": [1, 2]}) == config_digest({"b": [1, 2], "a": 1})
        assert config_digest({"a": 1}) != config_digest({"a": 2})
        assert config_digest({"v": np.arange(3)}) == config_digest({"v": [0, 1, 2]})

    def test_unknown_tolerance_rejected(self):
        with pytest.raises(ConfigError):
            check_competitive_fixed_point(small_gt(), 3, tolerances={"fixed_pt": 1.0})


class TestHelpers:
    @given(st.floats(1e-6, 1e-2), st.integers(0, 1000))
    def test_perturbation_size_and_simplex(self, eps, seed):
        rng = np.random.default_rng(seed)
        V = rng.standard_normal((3, 2, 2))
        S = rng.dirichlet(np.ones(4), size=3)
        Vp, Sp = perturb_heads(V, S, eps, rng)
        dv = np.linalg.norm(Vp - V, axis=(1, 2))
        ds = np.linalg.norm(Sp - S, axis=1)
        assert np.all(dv <= eps * (1 + 1e-12)) and np.all(dv >= 0.5 * eps * (1 - 1e-12))
        assert np.all(ds <= eps * (1 + 1e-12))
        np.testing.assert_allclose(Sp.sum(axis=1), 1)
        assert Sp.min() >= 0

    def test_growth_rate_recovers_exponent(self):
        t = np.linspace(0, 100, 2001)
        rate, window = fit_growth_rate(t, 1e-4 * np.exp(0.1 * t), 1e-4)
        assert rate == pytest.approx(0.1, rel=1e-9)
        assert window[0] == pytest.approx(np.log(2) / 0.1, abs=0.05)

    def test_growth_rate_without_growth(self):
        t = np.linspace(0, 1, 11)
        assert np.isnan(fit_growth_rate(t, np.full(11, 1e-4), 1e-4)[0])

    def test_crossing_times(self):
        t = np.arange(5.0)
        res = np.array([[1.0, 1.0], [0.5, 1.0], [0.05, 1.0], [0.01, 0.2], [0.0, 0.2]])
        assert feature_crossing_times(t, res, 0.1) == [2.0, None]

    def test_taylor_displacement_tangent(self):
        gt = small_gt()
        shift = taylor_displacement(gt, np.full(gt.T, 1 / gt.T), 0.1)
        assert abs(shift.sum()) < 1e-15
        assert np.argmax(shift) == gt.positions[0]

    def test_sampled_init_is_ordered(self):
        gt = small_gt(2)
        for seed in range(20):
            V, s = sample_ordered_init(gt, np.random.default_rng(seed))
            overlaps = np.einsum("ab,kab->k", V, gt.directions)
            assert np.all(overlaps[0] >= overlaps[1:])
            assert np.all(s[0] >= s[1:3])


class TestChecks:
    def test_fixed_point_start_passes(self):
        gt = small_gt()
        report = check_competitive_fixed_point(gt, 3, init=competitive_fixed_point(gt, 3))
        assert report.status == PASS
        assert report.measurements["final_time"] <= report.config["dt"] * report.config["log_every"]

    def test_ordering_violation_is_unmet(self):
        gt = small_gt()
        V = -gt.directions[0]
        s = np.full(gt.T, 1 / gt.T)
        assert check_competitive_fixed_point(gt, 3, init=(V, s)).status == UNMET

    def test_unperturbed_deviation_is_zero(self):
        gt = small_gt()
        report = check_bounded_deviation(gt, 3, 0.0, np.random.default_rng(0), horizon=2.0)
        assert report.status == PASS and report.measurements["max_deviation"] <= 1e-12

    def test_unperturbed_cooperative_deviation_is_zero(self):
        gt = small_gt()
        report = check_boundedcoop(gt, 3, 0.0, np.random.default_rng(0), horizon=2.0)
        assert report.status == PASS

    def test_saddle_reported(self):
        report = check_higher_order(small_gt(), 3, 2, eps=0.0)
        assert report.status == SADDLE

    def test_breakaway_index_validated(self):
        with pytest.raises(ConfigError):
            check_higher_order(small_gt(), 3, 4)

    def test_lyapunov_suite_short(self):
        gt = small_gt(1)
        report = check_lyapunov_suite(gt, 3, np.random.default_rng(1), t_end=2.0)
        assert report.status == PASS, report.residuals

    def test_early_alignment(self):
        gt = small_gt(2, d=5, T=6)
        report = check_early_alignment(gt, 3, np.random.default_rng(2))
        assert report.status == PASS, report.residuals

    def test_reruns_identical(self):
        gt = small_gt(3)
        a = check_lyapunov_suite(gt, 3, np.random.default_rng(7), t_end=1.0)
        b = check_lyapunov_suite(gt, 3, np.random.default_rng(7), t_end=1.0)
        assert a.content_digest() == b.content_digest()
        assert a.log.to_csv() == b.log.to_csv()


class TestLyapunovProperty:
    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_coupled_phi_nondecreasing(self, seed):
        gt = small_gt(seed % 17, d=3, T=4)
        report = check_lyapunov_suite(gt, 3, np.random.default_rng(seed), t_end=1.0, dt=1e-2)
        assert report.residuals["phi_backslide"] <= 1e-8
        assert report.residuals["cooperative_backslide"] <= 1e-8
        assert report.residuals["loss_increase"] <= 1e-8
        assert report.residuals["ordering_backslide"] <= 1e-9
