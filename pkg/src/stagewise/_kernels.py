"""Compiled RK4 stepping for the weighted flow layout of ``FlowSystem``.

Arrays: V (H, d*d), S (H, T), directions (F, d*d), scales (F,),
positions (F,), mask (T,), weights (H,).
"""

import numba
import numpy as np


@numba.njit(cache=True, fastmath=True)
def derivative(V, S, dirs, scales, pos, mask, weights, dV, dS, work_s, gram_s, gram_v, overlap, g):
    H, n = V.shape
    T = S.shape[1]
    F = dirs.shape[0]
    for l in range(H):
        for p in range(T):
            work_s[l, p] = mask[p] * S[l, p]
    for k in range(H):
        for l in range(k, H):
            acc_s = 0.0
            for p in range(T):
                acc_s += work_s[k, p] * work_s[l, p]
            acc_v = 0.0
            for i in range(n):
                acc_v += V[k, i] * V[l, i]
            gram_s[k, l] = acc_s
            gram_s[l, k] = acc_s
            gram_v[k, l] = acc_v
            gram_v[l, k] = acc_v
        for j in range(F):
            acc = 0.0
            for i in range(n):
                acc += V[k, i] * dirs[j, i]
            overlap[k, j] = acc
    for k in range(H):
        for i in range(n):
            dV[k, i] = 0.0
        for j in range(F):
            c = scales[j] * work_s[k, pos[j]]
            if c != 0.0:
                for i in range(n):
                    dV[k, i] += c * dirs[j, i]
        for l in range(H):
            c = weights[l] * gram_s[k, l]
            if c != 0.0:
                for i in range(n):
                    dV[k, i] -= c * V[l, i]
        for p in range(T):
            g[p] = 0.0
        for j in range(F):
            g[pos[j]] += scales[j] * overlap[k, j]
        for l in range(H):
            c = weights[l] * gram_v[k, l]
            for p in range(T):
                g[p] -= c * work_s[l, p]
        a = 0.0
        for p in range(T):
            a += S[k, p] * g[p]
        b = 0.0
        for p in range(T):
            g[p] = S[k, p] * (g[p] - a)
            b += S[k, p] * g[p]
        for p in range(T):
            dS[k, p] = S[k, p] * (g[p] - b)


@numba.njit(cache=True, fastmath=True)
def advance(V, S, dirs, scales, pos, mask, weights, dt, nsteps, flag_tol):
    """Take up to ``nsteps`` RK4 steps in place.

    Returns (steps taken, largest per-step simplex correction, summed
    correction, number of steps whose correction exceeded ``flag_tol``,
    nan flag).  On a non-finite state the last finite state is kept.
    """
    H, n = V.shape
    T = S.shape[1]
    F = dirs.shape[0]
    kV = np.empty((4, H, n))
    kS = np.empty((4, H, T))
    tV = np.empty((H, n))
    tS = np.empty((H, T))
    work_s = np.empty((H, T))
    gram_s = np.empty((H, H))
    gram_v = np.empty((H, H))
    overlap = np.empty((H, F))
    g = np.empty(T)
    max_corr = 0.0
    total_corr = 0.0
    flagged = 0
    for step in range(nsteps):
        derivative(V, S, dirs, scales, pos, mask, weights, kV[0], kS[0], work_s, gram_s, gram_v, overlap, g)
        for stage in range(1, 4):
            c = 0.5 * dt if stage < 3 else dt
            for k in range(H):
                for i in range(n):
                    tV[k, i] = V[k, i] + c * kV[stage - 1, k, i]
                for p in range(T):
                    tS[k, p] = S[k, p] + c * kS[stage - 1, k, p]
            derivative(tV, tS, dirs, scales, pos, mask, weights, kV[stage], kS[stage],
                       work_s, gram_s, gram_v, overlap, g)
        finite = True
        for k in range(H):
            for i in range(n):
                x = V[k, i] + dt / 6.0 * (kV[0, k, i] + 2.0 * kV[1, k, i] + 2.0 * kV[2, k, i] + kV[3, k, i])
                tV[k, i] = x
                if not np.isfinite(x):
                    finite = False
            for p in range(T):
                x = S[k, p] + dt / 6.0 * (kS[0, k, p] + 2.0 * kS[1, k, p] + 2.0 * kS[2, k, p] + kS[3, k, p])
                tS[k, p] = x
                if not np.isfinite(x):
                    finite = False
        if not finite:
            return step, max_corr, total_corr, flagged, True
        step_corr = 0.0
        for k in range(H):
            total = 0.0
            for p in range(T):
                work_s[k, p] = tS[k, p]
                if tS[k, p] < 0.0:
                    tS[k, p] = 0.0
                total += tS[k, p]
            for p in range(T):
                tS[k, p] /= total
                diff = tS[k, p] - work_s[k, p]
                step_corr += diff * diff
        step_corr = np.sqrt(step_corr)
        if step_corr > max_corr:
            max_corr = step_corr
        total_corr += step_corr
        if step_corr > flag_tol:
            flagged += 1
        for k in range(H):
            for i in range(n):
                V[k, i] = tV[k, i]
            for p in range(T):
                S[k, p] = tS[k, p]
    return nsteps, max_corr, total_corr, flagged, False


@numba.njit(cache=True, fastmath=True)
def evaluate(V, S, dirs, scales, pos, mask, weights):
    H, n = V.shape
    T = S.shape[1]
    dV = np.empty((H, n))
    dS = np.empty((H, T))
    derivative(V, S, dirs, scales, pos, mask, weights, dV, dS, np.empty((H, T)), np.empty((H, H)),
               np.empty((H, H)), np.empty((H, dirs.shape[0])), np.empty(T))
    return dV, dS
