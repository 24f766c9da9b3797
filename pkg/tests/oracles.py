"""Independent reference computations used by the tests."""

import numpy as np


def naive_covariance(Y):
    Y = np.asarray(Y, dtype=float)
    T, p = Y.shape
    mean = [sum(Y[t, i] for t in range(T)) / T for i in range(p)]
    S = np.zeros((p, p))
    for i in range(p):
        for j in range(p):
            S[i, j] = sum((Y[t, i] - mean[i]) * (Y[t, j] - mean[j]) for t in range(T)) / T
    return S


def grid_min_variance_3(S, c, step=1e-3):
    """Minimum of w'Sw over the step grid of (w1, w2), w3 = 1 - w1 - w2, ||w||_1 <= c.

    For each grid value of w1 the feasible w2 form an interval and the
    objective is a quadratic in w2, so only the grid points next to the
    clipped minimizer need evaluating. This returns the same minimum as
    evaluating every grid point.
    """
    S = np.asarray(S, dtype=float)
    half = (c + 1.0) / 2.0
    n = int(np.ceil(half / step))
    w1 = np.arange(-n, n + 1) * step
    a = 1.0 - w1
    slack = (c - np.abs(w1) - np.abs(a)) / 2.0
    keep = slack >= -1e-12
    w1, a, slack = w1[keep], a[keep], np.maximum(slack[keep], 0.0)
    lo = np.minimum(0.0, a) - slack
    hi = np.maximum(0.0, a) + slack
    # q(w2) = w' S w with w = (w1, w2, a - w2)
    A = S[1, 1] - 2 * S[1, 2] + S[2, 2]
    Bc = 2 * (S[0, 1] * w1 - S[0, 2] * w1 + S[1, 2] * a - S[2, 2] * a)
    star = np.clip(-Bc / (2 * A), lo, hi)
    g_lo = np.ceil(lo / step - 1e-9)
    g_hi = np.floor(hi / step + 1e-9)
    best = np.full(w1.size, np.inf)
    for off in (-1.0, 0.0, 1.0):
        for base in (np.floor(star / step), np.ceil(star / step)):
            g = np.clip(base + off, g_lo, g_hi)
            ok = g_lo <= g_hi
            w2 = g * step
            W = np.stack([w1, w2, a - w2], axis=1)
            q = np.einsum("ni,ij,nj->n", W, S, W)
            best = np.where(ok, np.minimum(best, q), best)
    return float(best.min())


def brute_grid_min_variance_3(S, c, step):
    """Every grid point evaluated; only practical for coarse steps."""
    S = np.asarray(S, dtype=float)
    n = int(np.ceil((c + 1.0) / 2.0 / step))
    g = np.arange(-n, n + 1) * step
    w1, w2 = np.meshgrid(g, g, indexing="ij")
    W = np.stack([w1, w2, 1.0 - w1 - w2], axis=-1)
    ok = np.abs(W).sum(axis=-1) <= c + 1e-9
    q = np.einsum("...i,ij,...j->...", W, S, W)
    return float(q[ok].min())
