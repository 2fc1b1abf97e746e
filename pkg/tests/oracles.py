"""Independent brute-force references used by the tests.

Nothing here imports from the package internals: every routine is a
second, deliberately naive implementation.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, w, stride=(1, 1), padding=(0, 0)):
    """Direct convolution. ``x``: (N, C, H, W); ``w``: (O, C, kh, kw)."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                r = i * sh + di - ph
                                q = j * sw + dj - pw
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[b, ic, r, q] * w[oc, ic, di, dj]
                    out[b, oc, i, j] = acc
    return out


def depthwise_loops(x, w, stride=(1, 1), padding=(0, 0)):
    """Per-channel convolution. ``w``: (C*m, kh, kw); output channel k reads input k // m."""
    n, c = x.shape[:2]
    m = w.shape[0] // c
    outs = []
    for k in range(w.shape[0]):
        src = k // m
        outs.append(conv2d_loops(x[:, src:src + 1], w[k][None, None], stride, padding)[:, 0])
    return np.stack(outs, axis=1)


def mlp_forward(x, layers):
    """``layers``: list of (W, b, relu?) with W shaped (out, in)."""
    h = np.asarray(x, dtype=np.float64)
    for w, b, act in layers:
        h = h @ np.asarray(w, dtype=np.float64).T + b
        if act:
            h = np.maximum(h, 0.0)
    return h


def count_cells(placements, rows, cols, tiles):
    """Paint every placement into boolean grids; returns (grids, overlap found)."""
    grids = np.zeros((tiles, rows, cols), dtype=np.int64)
    for p in placements:
        grids[p.tile, p.row_offset:p.row_offset + p.rows, p.col_offset:p.col_offset + p.cols] += 1
    return grids, bool(np.any(grids > 1))


def propagated_mvm_std(x, g_target_pos, g_target_neg, sigma_fn):
    """Std of ``x @ (G+ - G-)`` when every device gets independent noise ``sigma_fn(g)``."""
    var = (x ** 2) @ (sigma_fn(g_target_pos) ** 2 + sigma_fn(g_target_neg) ** 2)
    return np.sqrt(var)


def central_difference(f, x, eps=1e-6):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + eps
        up = f(x)
        x[i] = old - eps
        dn = f(x)
        x[i] = old
        g[i] = (up - dn) / (2 * eps)
    return g


def sigma_poly(g):
    """Programming-noise polynomial written out term by term."""
    g = np.asarray(g, dtype=np.float64)
    return np.maximum(-1.1731 * g * g + 1.9650 * g + 0.2635, 0.0)


def peak_tops(rows, cols, mux, t_cim):
    return 2.0 * rows * cols / (mux * t_cim) / 1e12


def logistic_regression_accuracy(x, y, steps=2000, lr=0.5):
    """Full-batch gradient descent on a two-class logistic model."""
    xb = np.hstack([x, np.ones((len(x), 1))])
    w = np.zeros(xb.shape[1])
    for _ in range(steps):
        p = 1.0 / (1.0 + np.exp(-(xb @ w)))
        w -= lr * xb.T @ (p - y) / len(y)
    return float(np.mean(((xb @ w) > 0) == (y == 1)))


def hand_heuristic_output_scale(n_adc, n_dac, g_max, rows, n_std_in=4.0, n_std_out=4.0, w_std=1.0):
    a = 2 ** (n_adc - 1) - 1
    d = 2 ** (n_dac - 1) - 1
    return (a / n_std_out) / (d * g_max * math.sqrt(rows)) * n_std_in * w_std
