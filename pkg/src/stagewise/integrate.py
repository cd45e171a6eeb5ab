"""Fixed-step RK4 integration with per-step simplex renormalization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError
from .flow import FlowSystem
from .logs import MetricLog
from .numerics import renormalize_simplex


@dataclass
class Controls:
    """Step size, logging stride (in steps) and stopping rule.

    Integration stops at ``t_end``, when the derivative norm drops below
    ``stop_tol`` (checked at logged steps; 0 disables it), or when the
    optional ``stop`` predicate holds at a logged step.
    """

    dt: float = 1e-2
    log_every: int = 100
    stop_tol: float = 1e-8
    flag_correction: float = 1e-6
    backend: str = "compiled"
    keep_states: bool = True

    def __post_init__(self):
        if self.dt <= 0 or self.log_every < 1:
            raise ConfigError("step size and log stride must be positive")
        if self.backend not in ("compiled", "reference"):
            raise ConfigError(f"unknown backend {self.backend!r}")


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    V: list = field(default_factory=list)
    S: list = field(default_factory=list)
    log: MetricLog | None = None
    stop_reason: str = ""
    nan_abort: bool = False
    flagged_steps: int = 0
    max_correction: float = 0.0
    total_correction: float = 0.0
    final_V: np.ndarray | None = None
    final_S: np.ndarray | None = None
    final_t: float = 0.0

    @property
    def states(self):
        return list(zip(self.times, self.V, self.S))


def log_columns(system: FlowSystem) -> list[str]:
    H, h = system.heads, system.gt.h
    cols = ["t", "loss", "phi"]
    cols += [f"vnorm_{k}" for k in range(H)]
    cols += [f"overlap_{k}_{j}" for k in range(H) for j in range(h)]
    cols += [f"s_{k}_{j}" for k in range(H) for j in range(h)]
    cols += ["renorm_correction"]
    return cols


def log_row(system: FlowSystem, t: float, V: np.ndarray, S: np.ndarray, correction: float) -> dict:
    gt = system.gt
    row = {"t": t, "loss": system.loss(V, S), "phi": system.lyapunov(V, S)}
    overlaps = np.einsum("kab,jab->kj", V, gt.directions)
    for k in range(system.heads):
        row[f"vnorm_{k}"] = float(np.linalg.norm(V[k]))
        for j in range(gt.h):
            row[f"overlap_{k}_{j}"] = float(overlaps[k, j])
            row[f"s_{k}_{j}"] = float(S[k, gt.positions[j]])
    row["renorm_correction"] = correction
    return row


def derivative_norm(system: FlowSystem, V: np.ndarray, S: np.ndarray) -> float:
    dV, dS = system.derivative(V, S)
    return float(np.sqrt(np.sum(dV ** 2) + np.sum(dS ** 2)))


def rk4_step(rhs: Callable, V: np.ndarray, S: np.ndarray, dt: float):
    k1 = rhs(V, S)
    k2 = rhs(V + 0.5 * dt * k1[0], S + 0.5 * dt * k1[1])
    k3 = rhs(V + 0.5 * dt * k2[0], S + 0.5 * dt * k2[1])
    k4 = rhs(V + dt * k3[0], S + dt * k3[1])
    V_new = V + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    S_new = S + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    return V_new, S_new


def _advance_reference(rhs, V, S, dt, nsteps, flag_tol, renormalize=True):
    max_corr = total = 0.0
    flagged = 0
    for step in range(nsteps):
        V_new, S_new = rk4_step(rhs, V, S, dt)
        if not (np.all(np.isfinite(V_new)) and np.all(np.isfinite(S_new))):
            return V, S, step, max_corr, total, flagged, True
        corr = 0.0
        if renormalize and S_new.size:
            S_new, corr = renormalize_simplex(S_new)
        max_corr = max(max_corr, corr)
        total += corr
        flagged += corr > flag_tol
        V, S = V_new, S_new
    return V, S, nsteps, max_corr, total, flagged, False


def integrate_system(system: FlowSystem, V0, S0, t_end: float, controls: Controls | None = None,
                     stop: Callable | None = None, observer: Callable | None = None) -> Trajectory:
    """Integrate a flow variant from (V0, S0) up to ``t_end``.

    States and a metric row are recorded every ``controls.log_every`` steps
    and at the end; ``observer(t, V, S)`` is called at the same points.  A
    non-finite state aborts the run, keeping the last finite state.
    """
    from . import _kernels

    controls = controls or Controls()
    V = np.array(V0, dtype=float)
    S = np.array(S0, dtype=float)
    system.check_state(V, S)
    shape_V = V.shape
    traj = Trajectory(log=MetricLog(log_columns(system)))
    total_steps = int(round(t_end / controls.dt))
    args = system.kernel_args()
    dirs = args[0].reshape(args[0].shape[0], -1)
    flat_V = V.reshape(V.shape[0], -1).copy()

    def record(step, correction):
        t = step * controls.dt
        Vr = flat_V.reshape(shape_V)
        traj.times.append(t)
        if controls.keep_states:
            traj.V.append(Vr.copy())
            traj.S.append(S.copy())
        traj.log.append(log_row(system, t, Vr, S, correction))
        if observer is not None:
            observer(t, Vr, S)

    record(0, 0.0)
    step = 0
    traj.stop_reason = "t_end"
    while step < total_steps:
        chunk = min(controls.log_every, total_steps - step)
        if controls.backend == "compiled":
            taken, max_corr, total_corr, flagged, bad = _kernels.advance(
                flat_V, S, dirs, args[1], args[2], args[3], args[4], controls.dt, chunk, controls.flag_correction)
        else:
            Vn, Sn, taken, max_corr, total_corr, flagged, bad = _advance_reference(
                system.derivative, flat_V.reshape(shape_V), S, controls.dt, chunk, controls.flag_correction)
            flat_V[:] = Vn.reshape(flat_V.shape)
            S[:] = Sn
        step += taken
        traj.max_correction = max(traj.max_correction, max_corr)
        traj.total_correction += total_corr
        traj.flagged_steps += flagged
        record(step, max_corr)
        if bad:
            traj.nan_abort = True
            traj.stop_reason = "non-finite state"
            break
        Vr = flat_V.reshape(shape_V)
        if controls.stop_tol > 0 and derivative_norm(system, Vr, S) < controls.stop_tol:
            traj.stop_reason = "stationary"
            break
        if stop is not None and stop(step * controls.dt, Vr, S):
            traj.stop_reason = "stop condition"
            break
    traj.final_V = flat_V.reshape(shape_V).copy()
    traj.final_S = S.copy()
    traj.final_t = step * controls.dt
    return traj


def integrate(rhs, V0, S0, t_end: float, controls: Controls | None = None, renormalize: bool = True):
    """RK4 for an arbitrary right-hand side ``rhs(V, S) -> (dV, dS)``.

    Returns (V, S, summary) where summary holds the correction statistics.
    Intended for small generic systems; flow variants should go through
    :func:`integrate_system`.
    """
    controls = controls or Controls()
    V = np.array(V0, dtype=float)
    S = np.array(S0, dtype=float)
    steps = int(round(t_end / controls.dt))
    V, S, taken, max_corr, total, flagged, bad = _advance_reference(
        rhs, V, S, controls.dt, steps, controls.flag_correction, renormalize)
    return V, S, {"steps": taken, "max_correction": max_corr, "total_correction": total,
                  "flagged_steps": flagged, "nan_abort": bad}


def richardson_check(system: FlowSystem, V0, S0, t_end: float, dt: float, backend: str = "compiled") -> dict:
    """Step-halving self-check of the fourth-order convergence.

    Runs with dt, dt/2 and dt/4; for a fourth-order method the dt vs dt/2
    difference should be about 16 times the dt/2 vs dt/4 difference.
    """
    finals = []
    for k in range(3):
        c = Controls(dt=dt / 2 ** k, log_every=10 ** 9, stop_tol=0.0, backend=backend, keep_states=False)
        tr = integrate_system(system, V0, S0, t_end, c)
        finals.append(np.concatenate([tr.final_V.ravel(), tr.final_S.ravel()]))
    coarse = float(np.linalg.norm(finals[0] - finals[1]))
    fine = float(np.linalg.norm(finals[1] - finals[2]))
    predicted = 16.0 * fine
    return {"coarse_difference": coarse, "fine_difference": fine, "predicted": predicted,
            "observed_order": float(np.log2(coarse / fine)) if fine > 0 and coarse > 0 else float("nan"),
            "passed": bool(coarse <= 10.0 * predicted)}
