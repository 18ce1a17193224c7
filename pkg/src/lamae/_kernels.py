"""Fused row-wise kernels for the elementwise-heavy tensor ops.

Each kernel is a serial loop, so results do not depend on thread scheduling.
"""

import math

import numba
import numpy as np

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@numba.njit(cache=True)
def gelu_forward(x):
    """Returns (x * Phi(x), d/dx of the same)."""
    flat = x.ravel()
    y = np.empty_like(flat)
    dy = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        y[i] = v * cdf
        dy[i] = cdf + v * _INV_SQRT2PI * math.exp(-0.5 * v * v)
    return y.reshape(x.shape), dy.reshape(x.shape)


@numba.njit(cache=True)
def layer_norm_forward(x2, gamma, beta, eps):
    n, d = x2.shape
    y = np.empty_like(x2)
    xhat = np.empty_like(x2)
    inv = np.empty(n)
    for r in range(n):
        mu = 0.0
        for j in range(d):
            mu += x2[r, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x2[r, j] - mu
            var += c * c
        var /= d
        s = 1.0 / math.sqrt(var + eps)
        inv[r] = s
        for j in range(d):
            h = (x2[r, j] - mu) * s
            xhat[r, j] = h
            y[r, j] = h * gamma[j] + beta[j]
    return y, xhat, inv


@numba.njit(cache=True)
def layer_norm_backward(g2, xhat, inv, gamma):
    n, d = g2.shape
    dx = np.empty_like(g2)
    dgamma = np.zeros(d)
    dbeta = np.zeros(d)
    for r in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            dh = g2[r, j] * gamma[j]
            m1 += dh
            m2 += dh * xhat[r, j]
            dgamma[j] += g2[r, j] * xhat[r, j]
            dbeta[j] += g2[r, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            dx[r, j] = inv[r] * (g2[r, j] * gamma[j] - m1 - xhat[r, j] * m2)
    return dx, dgamma, dbeta


@numba.njit(cache=True)
def softmax_backward_rows(gp2, p2, scale):
    """In place: gp2 <- scale * p * (gp - sum(gp * p))."""
    n, m = gp2.shape
    for r in range(n):
        dot = 0.0
        for j in range(m):
            dot += gp2[r, j] * p2[r, j]
        for j in range(m):
            gp2[r, j] = scale * p2[r, j] * (gp2[r, j] - dot)
