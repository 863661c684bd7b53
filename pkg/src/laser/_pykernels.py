"""Pure numpy kernels for the windowed-MLP policy.

Row ``r`` of a batch is one prediction: ``ctx[r]`` holds the ids of the
previous ``W`` tokens (``-1`` for an empty slot, embedded as zeros).
"""

from __future__ import annotations

import numpy as np


def _split(theta, V, D, H, W):
    o = 0
    E = theta[o:o + V * D].reshape(V, D); o += V * D
    W1 = theta[o:o + W * D * H].reshape(W * D, H); o += W * D * H
    b1 = theta[o:o + H]; o += H
    W2 = theta[o:o + H * V].reshape(H, V); o += H * V
    b2 = theta[o:o + V]
    return E, W1, b1, W2, b2


def forward(theta, V, D, H, W, ctx):
    E, W1, b1, W2, b2 = _split(theta, V, D, H, W)
    R = ctx.shape[0]
    E_ext = np.vstack([E, np.zeros((1, D))])
    x = E_ext[np.where(ctx < 0, V, ctx)].reshape(R, W * D)
    h = np.tanh(x @ W1 + b1)
    z = h @ W2 + b2
    m = z.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    return x, h, z - lse


def backward(theta, V, D, H, W, ctx, x, h, logp, targets, coeffs):
    """Gradient of sum_r coeffs[r] * logp[r, targets[r]] w.r.t. theta."""
    E, W1, b1, W2, b2 = _split(theta, V, D, H, W)
    R = ctx.shape[0]
    grad = np.zeros_like(theta)
    gE, gW1, gb1, gW2, gb2 = _split(grad, V, D, H, W)

    dz = -np.exp(logp) * coeffs[:, None]
    dz[np.arange(R), targets] += coeffs
    gW2 += h.T @ dz
    gb2 += dz.sum(axis=0)
    dpre = (dz @ W2.T) * (1.0 - h * h)
    gW1 += x.T @ dpre
    gb1 += dpre.sum(axis=0)
    dx = (dpre @ W1.T).reshape(R * W, D)
    ids = ctx.reshape(-1)
    keep = ids >= 0
    np.add.at(gE, ids[keep], dx[keep])
    return grad


def sample_tokens(logp, u):
    """Inverse-CDF draw from each row of ``exp(logp)`` using uniforms ``u``."""
    c = np.cumsum(np.exp(logp), axis=1)
    tok = (c < (u * c[:, -1])[:, None]).sum(axis=1)
    return np.minimum(tok, logp.shape[1] - 1).astype(np.int64)
