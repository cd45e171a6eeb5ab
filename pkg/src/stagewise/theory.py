"""Numerical certification of the convergence and stability results.

Each check integrates a flow variant from a controlled initialization and
turns the mathematical claim into named residuals compared against declared
tolerances.  The report passes iff every residual is within its tolerance;
preconditions are evaluated first and a violation short-circuits the check.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .flow import (FlowSystem, GroundTruth, ensemble_target, lyapunov_breakaway, noisy_uniform_init,
                   ordering_margins, symmetric_init)
from .integrate import Controls, Trajectory, integrate_system
from .logs import MetricLog
from .errors import ConfigError

PASS, FAIL, UNMET, SADDLE = "pass", "fail", "precondition unmet", "saddle"

DEFAULT_TOLERANCES = {
    "fixed_point": 1e-3,
    "lyapunov_backslide": 1e-8,
    "ordering_backslide": 1e-9,
    "envelope_factor": 1.1,
    "simplex_drift": 1e-6,
    "init_loss_margin": 1e-6,
}


def _plain(value):
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (np.floating, float)):
        return float(value)
    if isinstance(value, (np.integer, int)) and not isinstance(value, bool):
        return int(value)
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    return value


def config_digest(config: dict) -> str:
    text = json.dumps(_plain(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class CheckReport:
    """Outcome of one certification run.

    ``residuals[name] <= tolerances[name]`` for every name is the pass rule;
    ``preconditions`` hold booleans evaluated at the initial state.
    """

    name: str
    config: dict
    residuals: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    envelopes: dict = field(default_factory=dict)
    preconditions: dict = field(default_factory=dict)
    measurements: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    log: MetricLog | None = None
    saddle: bool = False

    @property
    def status(self) -> str:
        if self.saddle:
            return SADDLE
        if not all(self.preconditions.values()):
            return UNMET
        for key, tol in self.tolerances.items():
            value = self.residuals.get(key, np.nan)
            if not value <= tol:
                return FAIL
        return PASS

    @property
    def passed(self) -> bool:
        return self.status == PASS

    @property
    def digest(self) -> str:
        return config_digest(self.config)

    def failures(self) -> list[str]:
        return [k for k, tol in self.tolerances.items() if not self.residuals.get(k, np.nan) <= tol]

    def to_dict(self) -> dict:
        return _plain({
            "check": self.name,
            "config_digest": self.digest,
            "status": self.status,
            "config": self.config,
            "preconditions": self.preconditions,
            "residuals": {k: {"value": self.residuals.get(k, float("nan")), "tolerance": tol}
                          for k, tol in self.tolerances.items()},
            "envelopes": self.envelopes,
            "measurements": self.measurements,
            "notes": list(self.notes),
            "log_rows": len(self.log) if self.log is not None else 0,
        })

    def to_text(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def content_digest(self) -> str:
        """Hash of the whole report; identical reruns give identical digests."""
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _tolerances(overrides: dict | None, *names: str) -> dict:
    merged = dict(DEFAULT_TOLERANCES)
    merged.update(overrides or {})
    unknown = set(overrides or {}) - set(DEFAULT_TOLERANCES)
    if unknown:
        raise ConfigError(f"unknown tolerance names {sorted(unknown)}")
    return {n: float(merged[n]) for n in names}


def _gt_config(gt: GroundTruth) -> dict:
    return {"d": gt.d, "T": gt.T, "h": gt.h, "scales": gt.scales,
            "directions_digest": hashlib.sha256(np.ascontiguousarray(gt.directions).tobytes()).hexdigest()}


def _backslide(values) -> float:
    """Largest decrease between consecutive entries (0 for a nondecreasing series)."""
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return 0.0
    return float(max(0.0, -np.min(np.diff(values))))


def perturb_heads(V_ref: np.ndarray, S_ref: np.ndarray, eps: float, rng: np.random.Generator):
    """Per-head perturbation of size eps * U(0.5, 1) in V and in s.

    V moves along a random Frobenius direction; s moves towards a random
    simplex point so that it stays on the simplex.
    """
    V = np.array(V_ref, dtype=float)
    S = np.array(S_ref, dtype=float)
    for k in range(len(V)):
        direction = rng.standard_normal(V[k].shape)
        V[k] += eps * rng.uniform(0.5, 1.0) * direction / np.linalg.norm(direction)
        target = rng.dirichlet(np.ones(S.shape[1]))
        gap = np.linalg.norm(target - S[k])
        weight = min(1.0, eps * rng.uniform(0.5, 1.0) / gap)
        S[k] = (1.0 - weight) * S[k] + weight * target
    return V, S


def competitive_fixed_point(gt: GroundTruth, h: int) -> tuple[np.ndarray, np.ndarray]:
    return gt.scales[0] / h * gt.directions[0], gt.position_vector(0)


def check_competitive_fixed_point(gt: GroundTruth, h: int, init=None, tolerances: dict | None = None,
                                  dt: float | None = None, t_max: float | None = None,
                                  log_every: int = 2000) -> CheckReport:
    """Coupled flow from an ordering-compliant init reaches (m_1/h V_1*, s_1*).

    ``init`` is (V, s) or None for :func:`symmetric_init`.  Integration stops
    once both fixed-point residuals meet the tolerance or at ``t_max``
    (default 1e7/m_h).  The Lyapunov function phi and the ordering margins
    are tracked at every logged state.
    """
    tol = _tolerances(tolerances, "fixed_point", "lyapunov_backslide", "ordering_backslide", "simplex_drift")
    V0, s0 = init if init is not None else symmetric_init(gt, h)
    V0 = np.asarray(V0, dtype=float)
    s0 = np.asarray(s0, dtype=float)
    if dt is None:
        dt = 2.7 / max(h, gt.scales[0] ** 2 / h)
    if t_max is None:
        t_max = 1e7 / gt.scales[-1]
    config = {"check": "competitive_fixed_point", "gt": _gt_config(gt), "h": h, "dt": dt, "t_max": t_max,
              "log_every": log_every, "init_V": V0, "init_s": s0, "tolerances": tol}
    report = CheckReport("competitive_fixed_point", config, tolerances=tol)
    margins_V, margins_s = ordering_margins(V0, s0, gt)
    report.preconditions = {"ordering_V": bool(np.all(margins_V >= 0)), "ordering_s": bool(np.all(margins_s >= 0))}
    if not all(report.preconditions.values()):
        report.notes.append("initialization outside the ordering set")
        return report

    V_star, s_star = competitive_fixed_point(gt, h)
    limit = tol["fixed_point"]

    def converged(_t, V, S):
        return np.linalg.norm(V[0] - V_star) < limit and np.linalg.norm(S[0] - s_star) < limit

    system = FlowSystem("coupled", gt, h)
    traj = integrate_system(system, V0[None], s0[None], t_max,
                            Controls(dt=dt, log_every=log_every, stop_tol=0.0), stop=converged)
    report.log = traj.log
    margins = [ordering_margins(V[0], S[0], gt) for V, S in zip(traj.V, traj.S)]
    min_margin = min(float(min(np.min(mv, initial=np.inf), np.min(ms, initial=np.inf))) for mv, ms in margins)
    report.residuals = {
        "fixed_point": max(float(np.linalg.norm(traj.final_V[0] - V_star)),
                           float(np.linalg.norm(traj.final_S[0] - s_star))),
        "lyapunov_backslide": _backslide(traj.log.column("phi")),
        "ordering_backslide": max(0.0, -min_margin),
        "simplex_drift": traj.total_correction,
    }
    report.measurements = {
        "value_residual": float(np.linalg.norm(traj.final_V[0] - V_star)),
        "attention_residual": float(np.linalg.norm(traj.final_S[0] - s_star)),
        "final_time": traj.final_t,
        "stop_reason": traj.stop_reason,
        "predicted_value_norm": float(gt.scales[0] / h),
    }
    if traj.nan_abort:
        report.residuals["fixed_point"] = float("nan")
        report.notes.append("non-finite state")
    return report


def deviation_series(full: Trajectory, reference: Trajectory, groups: list[int]) -> np.ndarray:
    """Delta(t) = max over heads of the distance to the matching reference head.

    ``groups[k]`` names the reference head that full head k is compared with.
    """
    out = []
    for V, S, V_ref, S_ref in zip(full.V, full.S, reference.V, reference.S):
        dev_V = np.linalg.norm(V - V_ref[groups], axis=(1, 2))
        dev_S = np.linalg.norm(S - S_ref[groups], axis=1)
        out.append(max(float(dev_V.max()), float(dev_S.max())))
    return np.array(out)


def fit_growth_rate(times: np.ndarray, deviation: np.ndarray, eps: float) -> tuple[float, tuple[float, float]]:
    """Least-squares slope of log Delta over the first decade of growth above 2 eps.

    Returns (rate, (t_start, t_end)); the rate is nan if Delta never grows
    through [2 eps, 20 eps] within the run.
    """
    above = np.nonzero(deviation >= 2 * eps)[0]
    if len(above) == 0:
        return float("nan"), (float("nan"), float("nan"))
    first = above[0]
    beyond = np.nonzero(deviation[first:] >= 20 * eps)[0]
    if len(beyond) == 0:
        return float("nan"), (float(times[first]), float("nan"))
    last = first + beyond[0]
    t = times[first:last + 1]
    slope = np.polyfit(t, np.log(deviation[first:last + 1]), 1)[0]
    return float(slope), (float(t[0]), float(t[-1]))


def _envelope_report(report: CheckReport, times, deviation, eps: float, tol: dict):
    if eps == 0:
        report.residuals["envelope_factor"] = 0.0 if np.max(deviation) <= 1e-12 else float("inf")
        report.measurements["max_deviation"] = float(np.max(deviation))
        report.notes.append("unperturbed start: deviation must stay at rounding level")
        return
    rate, fit_window = fit_growth_rate(times, deviation, eps)
    report.envelopes["growth_rate"] = {"constant": rate, "fit_window": list(fit_window)}
    if not rate > 0:
        report.residuals["envelope_factor"] = float("nan")
        report.notes.append("no growth decade within the run")
        return
    window = 1.0 / (-rate * np.log(eps))
    inside = times <= window
    ratio = deviation[inside] / (eps * np.exp(rate * times[inside]))
    report.envelopes["validity_window"] = {"constant": rate, "window": [0.0, float(window)]}
    report.residuals["envelope_factor"] = float(np.max(ratio))
    report.measurements.update({"window_end": float(window), "window_points": int(np.sum(inside)),
                                "initial_deviation": float(deviation[0])})


def check_bounded_deviation(gt: GroundTruth, h: int, eps: float, rng: np.random.Generator,
                            horizon: float = 100.0, dt: float = 1e-2, init=None,
                            tolerances: dict | None = None) -> CheckReport:
    """Heads started within eps of a symmetric state track the coupled flow.

    Delta(t) is compared with eps * exp(c t) over [0, 1/(-c ln eps)], with c
    fitted on the first growth decade of Delta.
    """
    tol = _tolerances(tolerances, "envelope_factor")
    V0, s0 = init if init is not None else symmetric_init(gt, h)
    V_ref = np.repeat(np.asarray(V0, dtype=float)[None], h, axis=0)
    S_ref = np.repeat(np.asarray(s0, dtype=float)[None], h, axis=0)
    V_start, S_start = perturb_heads(V_ref, S_ref, eps, rng) if eps > 0 else (V_ref, S_ref)
    config = {"check": "bounded_deviation", "gt": _gt_config(gt), "h": h, "eps": eps, "horizon": horizon,
              "dt": dt, "init_V": V_start, "init_s": S_start, "tolerances": tol}
    report = CheckReport("bounded_deviation", config, tolerances=tol)
    dev_V = np.linalg.norm(V_start - V_ref, axis=(1, 2))
    dev_S = np.linalg.norm(S_start - S_ref, axis=1)
    report.preconditions = {"within_eps": bool(max(dev_V.max(), dev_S.max()) <= eps + 1e-15)}
    controls = Controls(dt=dt, log_every=1, stop_tol=0.0)
    full = integrate_system(FlowSystem("full", gt, h), V_start, S_start, horizon, controls)
    reference = integrate_system(FlowSystem("coupled", gt, h), V_ref[:1], S_ref[:1], horizon, controls)
    report.log = full.log
    if full.nan_abort or reference.nan_abort:
        report.residuals["envelope_factor"] = float("nan")
        report.notes.append("non-finite state")
        return report
    deviation = deviation_series(full, reference, [0] * h)
    _envelope_report(report, np.array(full.times), deviation, eps, tol)
    return report


def cooperative_init(gt: GroundTruth, h: int, eta: float = 1e-2):
    """Ensemble at (m_1/h V_1*, s_1*) and a breakaway head nudged by eta towards feature 2."""
    V = gt.scales[0] / h * gt.directions[0]
    V_off = V + eta * gt.directions[1]
    s_off = (1.0 - eta) * gt.position_vector(0) + eta * gt.position_vector(1)
    return V, V_off, s_off


def check_boundedcoop(gt: GroundTruth, h: int, eps: float, rng: np.random.Generator, eta: float = 1e-2,
                      horizon: float = 100.0, dt: float = 1e-2, tolerances: dict | None = None) -> CheckReport:
    """h heads started within eps of the cooperative configuration track it.

    The reference is the cooperative system (ensemble V with attention fixed
    at s_1*, breakaway head (V', s')); Delta(t) covers every ensemble head and
    the breakaway head.
    """
    if h < 2:
        raise ConfigError("the cooperative configuration needs h >= 2")
    tol = _tolerances(tolerances, "envelope_factor")
    V, V_off, s_off = cooperative_init(gt, h, eta)
    s1 = gt.position_vector(0)
    V_ref = np.stack([V] * (h - 1) + [V_off])
    S_ref = np.stack([s1] * (h - 1) + [s_off])
    V_start, S_start = perturb_heads(V_ref, S_ref, eps, rng) if eps > 0 else (V_ref, S_ref)
    config = {"check": "boundedcoop", "gt": _gt_config(gt), "h": h, "eps": eps, "eta": eta, "horizon": horizon,
              "dt": dt, "init_V": V_start, "init_s": S_start, "tolerances": tol}
    report = CheckReport("boundedcoop", config, tolerances=tol)
    dev = max(np.linalg.norm(V_start - V_ref, axis=(1, 2)).max(), np.linalg.norm(S_start - S_ref, axis=1).max())
    report.preconditions = {"within_eps": bool(dev <= eps + 1e-15),
                            "breakaway_off_saddle": bool(np.linalg.norm(s_off - s1) > 0)}
    controls = Controls(dt=dt, log_every=1, stop_tol=0.0)
    full = integrate_system(FlowSystem("full", gt, h), V_start, S_start, horizon, controls)
    reference = integrate_system(FlowSystem("cooperative", gt, h), np.stack([V, V_off]),
                                 np.stack([s1, s_off]), horizon, controls)
    report.log = full.log
    if full.nan_abort or reference.nan_abort:
        report.residuals["envelope_factor"] = float("nan")
        report.notes.append("non-finite state")
        return report
    deviation = deviation_series(full, reference, [0] * (h - 1) + [1])
    _envelope_report(report, np.array(full.times), deviation, eps, tol)
    report.measurements["min_breakaway_gap"] = float(min(np.linalg.norm(S[1] - s1) for S in reference.S))
    return report


def breakaway_margin(n: int, V_off: np.ndarray, s_off: np.ndarray, gt: GroundTruth) -> float:
    """Left minus right side of the initial loss-decrease condition (positive when it holds)."""
    return lyapunov_breakaway(n, V_off, s_off, gt)


def breakaway_ordering(n: int, V_off: np.ndarray, s_off: np.ndarray, gt: GroundTruth) -> tuple[np.ndarray, np.ndarray]:
    """(<V', V_n* - V_k*>, <s', s_n* - s_k*>) for k = n+1..h."""
    ov = np.einsum("ab,kab->k", V_off, gt.directions)
    os_ = s_off[gt.positions]
    return ov[n - 1] - ov[n:], os_[n - 1] - os_[n:]


def breakaway_init(gt: GroundTruth, h: int, n: int, eps: float):
    """Small-nudge start: the breakaway head sits on feature 1 with weight eps towards feature n."""
    V_off = gt.scales[0] / h * gt.directions[0] + eps * gt.directions[n - 1]
    s_off = (1.0 - eps) * gt.position_vector(0) + eps * gt.position_vector(n - 1)
    return V_off, s_off


def check_higher_order(gt: GroundTruth, h: int, n: int, eps: float = 1e-2, init=None,
                       tolerances: dict | None = None, dt: float | None = None, t_max: float | None = None,
                       log_every: int = 2000, name: str = "higher_order") -> CheckReport:
    """Slow breakaway flow towards feature n reaches (V_n*, s_n*).

    Preconditions: the ordering of the breakaway head towards feature n and
    the initial loss-decrease margin (> ``init_loss_margin``).  The limit of
    the slow flow at s' = s_n* is m_n V_n*, so the report records both the
    stated target V_n* and the stationary value m_n V_n*.
    """
    if not 2 <= n <= gt.h:
        raise ConfigError(f"breakaway index must lie in [2, {gt.h}]")
    tol = _tolerances(tolerances, "fixed_point", "lyapunov_backslide", "ordering_backslide", "simplex_drift")
    V_off, s_off = init if init is not None else breakaway_init(gt, h, n, eps)
    V_off = np.asarray(V_off, dtype=float)
    s_off = np.asarray(s_off, dtype=float)
    scale_n = gt.scales[n - 1]
    if dt is None:
        dt = 2.7 / max(1.0, scale_n ** 2, float(np.sum(V_off ** 2)))
    if t_max is None:
        t_max = 1e7 / gt.scales[-1]
    config = {"check": name, "gt": _gt_config(gt), "h": h, "n": n, "eps": eps, "dt": dt, "t_max": t_max,
              "log_every": log_every, "init_V": V_off, "init_s": s_off, "tolerances": tol}
    report = CheckReport(name, config, tolerances=tol)
    margin = breakaway_margin(n, V_off, s_off, gt)
    mv, ms = breakaway_ordering(n, V_off, s_off, gt)
    report.preconditions = {
        "ordering_V": bool(np.all(mv >= 0)),
        "ordering_s": bool(np.all(ms >= 0)),
        "init_loss_margin": bool(margin > _tolerances(tolerances, "init_loss_margin")["init_loss_margin"]),
    }
    report.measurements["init_loss_margin"] = margin
    if eps == 0 and init is None:
        report.saddle = True
        report.notes.append("unperturbed breakaway head sits at the saddle s' = s_1*")
        return report
    if not all(report.preconditions.values()):
        return report

    V_target, s_target = gt.directions[n - 1], gt.position_vector(n - 1)
    limit = tol["fixed_point"]

    def converged(_t, V, S):
        return np.linalg.norm(V[0] - V_target) < limit and np.linalg.norm(S[0] - s_target) < limit

    system = FlowSystem("higher_order", gt, h, n=n)
    traj = integrate_system(system, V_off[None], s_off[None], t_max,
                            Controls(dt=dt, log_every=log_every, stop_tol=1e-13), stop=converged)
    report.log = traj.log
    orderings = [breakaway_ordering(n, V[0], S[0], gt) for V, S in zip(traj.V, traj.S)]
    min_margin = min(float(min(np.min(a, initial=np.inf), np.min(b, initial=np.inf))) for a, b in orderings)
    V_end, s_end = traj.final_V[0], traj.final_S[0]
    report.residuals = {
        "fixed_point": max(float(np.linalg.norm(V_end - V_target)), float(np.linalg.norm(s_end - s_target))),
        "lyapunov_backslide": _backslide(traj.log.column("phi")),
        "ordering_backslide": max(0.0, -min_margin),
        "simplex_drift": traj.total_correction,
    }
    report.measurements.update({
        "value_residual": float(np.linalg.norm(V_end - V_target)),
        "attention_residual": float(np.linalg.norm(s_end - s_target)),
        "scaled_value_residual": float(np.linalg.norm(V_end - scale_n * V_target)),
        "final_attention_on_target": float(s_end[gt.positions[n - 1]]),
        "final_attention_on_first": float(s_end[gt.positions[0]]),
        "final_time": traj.final_t,
        "stop_reason": traj.stop_reason,
    })
    return report


def check_cooperative_convergence(gt: GroundTruth, h: int, eps: float = 1e-2, init=None,
                                  tolerances: dict | None = None, dt: float | None = None,
                                  t_max: float | None = None, tracking_horizon: float = 50.0,
                                  log_every: int = 2000) -> CheckReport:
    """Two-scale flow from the small nudge towards feature 2 reaches (V_2*, s_2*).

    Also runs the cooperative system from the matching start and records
    how the ensemble value tracks its instantaneous optimum V*(t): the tail
    mean of ||V - V*|| must not exceed its initial value.
    """
    report = check_higher_order(gt, h, 2, eps, init, tolerances, dt, t_max, log_every,
                                name="cooperative_convergence")
    if report.saddle or not all(report.preconditions.values()):
        return report
    V, V_off, s_off = cooperative_init(gt, h, eps)
    if init is not None:
        V_off, s_off = (np.asarray(a, dtype=float) for a in init)
    system = FlowSystem("cooperative", gt, h)
    traj = integrate_system(system, np.stack([V, V_off]), np.stack([gt.position_vector(0), s_off]),
                            tracking_horizon, Controls(dt=1e-2, log_every=10, stop_tol=0.0))
    gaps = np.array([np.linalg.norm(Vs[0] - ensemble_target(Vs[1], Ss[1], gt, h)) for Vs, Ss in zip(traj.V, traj.S)])
    tail = float(np.mean(gaps[len(gaps) // 2:]))
    report.tolerances["ensemble_tracking"] = float(gaps[0])
    report.residuals["ensemble_tracking"] = tail
    report.tolerances["cooperative_lyapunov_backslide"] = report.tolerances["lyapunov_backslide"]
    report.residuals["cooperative_lyapunov_backslide"] = _backslide(traj.log.column("phi"))
    report.measurements.update({"ensemble_gap_initial": float(gaps[0]), "ensemble_gap_tail_mean": tail})
    return report


def taylor_displacement(gt: GroundTruth, s0: np.ndarray, t: float) -> np.ndarray:
    """Second-order prediction of s_k(t) - s_k(0) from V = 0 and nearly uniform s.

    With dV/dt(0) = G 1/T the attention derivative is about
    t Pi(s)^2 (V-dot^T G), whose time integral is t^2/2 times that vector.
    """
    T = gt.T
    pull = np.zeros(T)
    pull[gt.positions] = gt.scales ** 2 / T
    proj = np.diag(s0) - np.outer(s0, s0)
    return 0.5 * t * t * (proj @ (proj @ pull))


def check_early_alignment(gt: GroundTruth, h: int, rng: np.random.Generator, noise: float = 1e-6,
                          t_small: float | None = None, steps: int = 200, cosine_floor: float = 0.999,
                          taylor_tolerance: float = 0.1) -> CheckReport:
    """Near V = 0 and uniform s, values align with G 1/T and attention drifts towards s_1*.

    Residuals: 1 - min cosine(V_k(t), G 1/T) over (0, t_small]; the number of
    heads whose attention displacement peaks away from s_1*; the relative
    gap between the displacement and its second-order prediction.
    """
    if t_small is None:
        t_small = 0.1 / gt.scales[0]
    T = gt.T
    V0, S0, _ = noisy_uniform_init(gt, h, noise, rng)
    tol = {"alignment": 1.0 - cosine_floor, "misaligned_heads": 0.0, "taylor_gap": taylor_tolerance}
    config = {"check": "early_alignment", "gt": _gt_config(gt), "h": h, "noise": noise, "t_small": t_small,
              "steps": steps, "init_s": S0, "tolerances": tol}
    report = CheckReport("early_alignment", config, tolerances=tol)
    report.preconditions = {"values_zero": True, "near_uniform": bool(np.max(np.abs(S0 - 1.0 / T)) < 1e-3)}
    direction = gt.target().apply_right(np.full(T, 1.0 / T))
    direction /= np.linalg.norm(direction)
    traj = integrate_system(FlowSystem("full", gt, h), V0, S0, t_small,
                            Controls(dt=t_small / steps, log_every=1, stop_tol=0.0))
    report.log = traj.log
    cosines = [float(np.sum(V[k] * direction) / np.linalg.norm(V[k]))
               for V in traj.V[1:] for k in range(h)]
    shift = traj.final_S - S0
    wrong = sum(int(np.argmax(shift[k]) != gt.positions[0]) for k in range(h))
    gaps = [float(np.linalg.norm(shift[k] - taylor_displacement(gt, S0[k], traj.final_t))
                  / np.linalg.norm(shift[k])) for k in range(h)]
    report.residuals = {"alignment": 1.0 - min(cosines), "misaligned_heads": float(wrong), "taylor_gap": max(gaps)}
    report.measurements = {"min_cosine": min(cosines), "final_time": traj.final_t,
                           "displacement_norm": float(np.linalg.norm(shift))}
    return report


def feature_crossing_times(times, residuals: np.ndarray, fraction: float = 0.1) -> list:
    """First time each per-feature residual column drops below ``fraction`` of its start (None if never)."""
    times = np.asarray(times, dtype=float)
    out = []
    for j in range(residuals.shape[1]):
        below = np.nonzero(residuals[:, j] < fraction * residuals[0, j])[0]
        out.append(float(times[below[0]]) if len(below) else None)
    return out


def chained_acquisition(gt: GroundTruth, h: int, eps: float = 1e-2, **kwargs) -> list[CheckReport]:
    """Run the breakaway check for n = 2, ..., h in sequence."""
    return [check_higher_order(gt, h, n, eps, **kwargs) for n in range(2, gt.h + 1)]


def sample_ordered_init(gt: GroundTruth, rng: np.random.Generator, value_scale: float = 0.1):
    """Random (V, s) inside the ordering set: V_1* and s_1* dominate every other feature."""
    V = value_scale * rng.standard_normal((gt.d, gt.d)) / gt.d
    overlaps = np.einsum("ab,kab->k", V, gt.directions)
    gap = overlaps[1:].max(initial=-np.inf) - overlaps[0]
    if gap > 0:
        V = V + (gap + value_scale * rng.uniform(0.0, 0.1)) * gt.directions[0]
    s = rng.dirichlet(np.ones(gt.T))
    top = gt.positions[np.argmax(s[gt.positions])]
    s[[gt.positions[0], top]] = s[[top, gt.positions[0]]]
    return V, s


def check_lyapunov_suite(gt: GroundTruth, h: int, rng: np.random.Generator, t_end: float = 20.0,
                         dt: float = 1e-2, tolerances: dict | None = None) -> CheckReport:
    """Per-step monotonicity of phi (coupled flow), the cooperative Lyapunov
    function and the full-flow loss, plus forward invariance of the ordering
    set under the coupled flow, from random admissible starts."""
    tol = _tolerances(tolerances, "lyapunov_backslide", "ordering_backslide", "simplex_drift")
    tol = {"phi_backslide": tol["lyapunov_backslide"], "cooperative_backslide": tol["lyapunov_backslide"],
           "loss_increase": tol["lyapunov_backslide"], "ordering_backslide": tol["ordering_backslide"],
           "simplex_drift": tol["simplex_drift"]}
    V0, s0 = sample_ordered_init(gt, rng)
    eta = rng.uniform(1e-3, 1e-1)
    V_c, V_off, s_off = cooperative_init(gt, h, eta)
    V_full = 0.1 * rng.standard_normal((h, gt.d, gt.d)) / gt.d
    S_full = rng.dirichlet(np.ones(gt.T), size=h)
    config = {"check": "lyapunov_suite", "gt": _gt_config(gt), "h": h, "t_end": t_end, "dt": dt,
              "coupled_init": [V0, s0], "eta": eta, "full_init": [V_full, S_full], "tolerances": tol}
    report = CheckReport("lyapunov_suite", config, tolerances=tol)
    mv, ms = ordering_margins(V0, s0, gt)
    report.preconditions = {"ordering_V": bool(np.all(mv >= 0)), "ordering_s": bool(np.all(ms >= 0))}
    controls = Controls(dt=dt, log_every=1, stop_tol=0.0)
    coupled = integrate_system(FlowSystem("coupled", gt, h), V0[None], s0[None], t_end, controls)
    coop = integrate_system(FlowSystem("cooperative", gt, h), np.stack([V_c, V_off]),
                            np.stack([gt.position_vector(0), s_off]), t_end, controls)
    full = integrate_system(FlowSystem("full", gt, h), V_full, S_full, t_end, controls)
    margins = [ordering_margins(V[0], S[0], gt) for V, S in zip(coupled.V, coupled.S)]
    min_margin = min(float(min(np.min(a, initial=np.inf), np.min(b, initial=np.inf))) for a, b in margins)
    report.residuals = {
        "phi_backslide": _backslide(coupled.log.column("phi")),
        "cooperative_backslide": _backslide(coop.log.column("phi")),
        "loss_increase": _backslide(-full.log.column("loss")),
        "ordering_backslide": max(0.0, -min_margin),
        "simplex_drift": max(coupled.total_correction, coop.total_correction, full.total_correction),
    }
    report.log = coupled.log
    return report
