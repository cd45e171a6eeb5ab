"""Independent slow reimplementations used as test oracles.

Nothing here imports the vectorized code paths under test; everything is
written with explicit loops over the defining sums.
"""

import numpy as np

LD = np.longdouble


def brute_next_token(features, intervals, alphas, context, d):
    """softmax(sum_k A_k sum_{i in I(k)} alpha_i e_{x_{t-i}}) with explicit loops.

    ``context`` lists the last w tokens oldest first, so lag i is
    context[w - 1 - i].
    """
    w = len(context)
    logits = np.zeros(d)
    for k, group in enumerate(intervals):
        for lag in group:
            onehot = np.zeros(d)
            onehot[context[w - 1 - lag]] = 1.0
            logits += alphas[lag] * (features[k] @ onehot)
    z = np.exp(logits - logits.max())
    return z / z.sum()


def monte_carlo_regression_loss(V, s, scales, directions, positions, samples, rng):
    """Sample estimate of 1/2 E||sum_k V_k X s_k - sum_k m_k V_k* X s_k*||^2.

    X has independent standard Gaussian entries, so E[x_i x_j^T] = 1{i=j} I.
    Returns (mean, standard error).
    """
    h, d, _ = V.shape
    T = s.shape[1]
    star = np.zeros((len(scales), T))
    for k, p in enumerate(positions):
        star[k, p] = 1.0
    X = rng.standard_normal((samples, d, T))
    model = np.zeros((samples, d))
    for k in range(h):
        model += np.einsum("ab,nbt,t->na", V[k], X, s[k])
    target = np.zeros((samples, d))
    for k in range(len(scales)):
        target += scales[k] * np.einsum("ab,nbt,t->na", directions[k], X, star[k])
    values = 0.5 * np.sum((model - target) ** 2, axis=1)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(samples))


def loop_model_loss(attn, value, seqs, d, T, w, context_limit=None):
    """Mean next-token cross-entropy of the attention model in extended precision.

    Builds every input column explicitly and scores keys against each query
    with dense products x_j^T A_k x_q, one query position at a time.
    """
    B, L = seqs.shape
    D = d + L
    attn = np.asarray(attn, dtype=LD)
    value = np.asarray(value, dtype=LD)
    x = np.zeros((B, D, L), dtype=LD)
    for b in range(B):
        for j in range(L):
            x[b, seqs[b, j], j] = 1
            x[b, d + j, j] = 1
    total = LD(0)
    for t in range(T):
        q = w - 1 + t
        first = 0 if context_limit is None else max(0, q - context_limit + 1)
        keys = x[:, :, first:q + 1]
        logits = np.zeros((B, d), dtype=LD)
        for k in range(attn.shape[0]):
            scores = np.matmul(keys.transpose(0, 2, 1), attn[k] @ x[:, :, q, None])[..., 0]
            scores = scores - scores.max(axis=1, keepdims=True)
            a = np.exp(scores)
            a /= a.sum(axis=1, keepdims=True)
            logits += np.matmul(value[k], np.matmul(keys, a[..., None]))[..., 0]
        z = logits - logits.max(axis=1, keepdims=True)
        log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total -= log_probs[np.arange(B), seqs[:, q + 1]].sum()
    return total / (B * T)


def central_differences(loss, arrays, step=1e-5):
    """Central differences of ``loss()`` with respect to every entry of each array (edited in place)."""
    out = []
    h = LD(step)
    for arr in arrays:
        grad = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loss()
            arr[idx] = old - h
            down = loss()
            arr[idx] = old
            grad[idx] = float((up - down) / (2 * h))
        out.append(grad)
    return out


def relative_error(analytic, numeric, floor=1e-8):
    """Max entrywise |a - n| / max(|a|, |n|, floor).

    The floor keeps structurally zero coordinates (round-off of order 1e-17
    on one side, exact zero on the other) from reading as relative error 1.
    """
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def brute_tensor_loss(V, s, scales, directions, positions):
    """1/2 ||G - P||^2 by materializing the full (d, d, T) arrays."""
    d = V.shape[1]
    T = s.shape[1]
    G = np.zeros((d, d, T))
    for k, p in enumerate(positions):
        G[:, :, p] += scales[k] * directions[k]
    P = np.zeros((d, d, T))
    for k in range(len(V)):
        P += V[k][:, :, None] * s[k][None, None, :]
    return 0.5 * float(np.sum((G - P) ** 2))


def rk4_linear_decay(x0, dt, steps):
    x = np.array(x0, dtype=float)
    for _ in range(steps):
        k1 = -x
        k2 = -(x + 0.5 * dt * k1)
        k3 = -(x + 0.5 * dt * k2)
        k4 = -(x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x
