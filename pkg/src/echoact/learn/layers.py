"""Forward/backward pairs for every layer type, channels-last (NHWC).

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache.  Nothing is stored on module
state, so forward passes are reentrant.
"""

from __future__ import annotations

import numpy as np

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _tap(xp: np.ndarray, i: int, j: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Strided view of the padded input seen by kernel tap ``(i, j)``."""
    return xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x


# ------------------------------------------------------------------ convolution
# Convolutions are computed tap by tap: one (B*Ho*Wo, C) x (C, O) matmul per
# kernel offset.  This avoids materialising im2col buffers, which dominate
# time and memory when the channel count is small.


def conv2d_forward(x, w, b=None, stride=1, pad=0):
    """``x``: (B, H, W, C), ``w``: (kh, kw, C, O) -> (B, Ho, Wo, O)."""
    bsz, h, wd, c = x.shape
    kh, kw, c2, o = w.shape
    if c != c2:
        raise ValueError(f"conv expects {c2} input channels, got {c}")
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    xp = _pad(x, pad)
    out = np.zeros((bsz * ho * wo, o), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            out += np.ascontiguousarray(_tap(xp, i, j, stride, ho, wo)).reshape(-1, c) @ w[i, j]
    if b is not None:
        out += b
    return out.reshape(bsz, ho, wo, o), (xp, w, x.shape, stride, pad, b is not None)


def conv2d_backward(dout, cache, input_grad=True):
    """Returns ``(dx, dw, db)``; ``dx`` is None when ``input_grad`` is False."""
    xp, w, xshape, s, p, has_bias = cache
    bsz, h, wd, c = xshape
    kh, kw, _, o = w.shape
    ho, wo = dout.shape[1:3]
    d = dout.reshape(-1, o)
    dw = np.empty_like(w)
    dxp = np.zeros(xp.shape, dtype=dout.dtype) if input_grad else None
    for i in range(kh):
        for j in range(kw):
            tap = np.ascontiguousarray(_tap(xp, i, j, s, ho, wo)).reshape(-1, c)
            dw[i, j] = tap.T @ d
            if input_grad:
                _tap(dxp, i, j, s, ho, wo)[...] += (d @ w[i, j].T).reshape(bsz, ho, wo, c)
    db = d.sum(axis=0) if has_bias else None
    if not input_grad:
        return None, dw, db
    dx = dxp[:, p : p + h, p : p + wd, :] if p else dxp
    return dx, dw, db


def conv_transpose2d_forward(x, w, b=None, stride=2, pad=1):
    """Adjoint of ``conv2d`` with weight ``w`` of shape (kh, kw, Cout, Cin).

    Output size is ``(H - 1) * stride - 2 * pad + kh``.
    """
    bsz, h, wd, cin = x.shape
    kh, kw, cout, cin2 = w.shape
    if cin != cin2:
        raise ValueError(f"transposed conv expects {cin2} input channels, got {cin}")
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wd - 1) * stride - 2 * pad + kw
    flat = x.reshape(-1, cin)
    yp = np.zeros((bsz, ho + 2 * pad, wo + 2 * pad, cout), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            _tap(yp, i, j, stride, h, wd)[...] += (flat @ w[i, j].T).reshape(bsz, h, wd, cout)
    y = yp[:, pad : pad + ho, pad : pad + wo, :] if pad else yp
    if b is not None:
        y = y + b
    return y, (x, w, stride, pad, b is not None)


def conv_transpose2d_backward(dout, cache):
    x, w, s, p, has_bias = cache
    bsz, h, wd, cin = x.shape
    kh, kw, cout, _ = w.shape
    dyp = _pad(dout, p)
    flat = x.reshape(-1, cin)
    dx = np.zeros((bsz * h * wd, cin), dtype=dout.dtype)
    dw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            tap = np.ascontiguousarray(_tap(dyp, i, j, s, h, wd)).reshape(-1, cout)
            dx += tap @ w[i, j]
            dw[i, j] = tap.T @ flat
    db = dout.reshape(-1, cout).sum(axis=0) if has_bias else None
    return dx.reshape(x.shape), dw, db


# ------------------------------------------------------------------ normalisation


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel (last axis) batch norm.

    In train mode batch statistics are used and the running buffers are
    updated in place; in eval mode the running buffers are used.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mu = x.mean(axis=axes)
        xc = x - mu
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        n = x.size // x.shape[-1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        # one fused scale and shift; xhat is only rebuilt if a backward pass asks for it
        inv = 1.0 / np.sqrt(running_var + eps)
        scale = gamma * inv
        out = x * scale.astype(x.dtype, copy=False)
        out += (beta - running_mean * scale).astype(x.dtype, copy=False)
        return out, ((x, running_mean.copy()), gamma, inv, train)
    out = gamma * xhat + beta
    return out.astype(x.dtype, copy=False), (xhat, gamma, inv, train)


def batchnorm_backward(dout, cache):
    xhat, gamma, inv, train = cache
    if not train:
        x, mean = xhat
        xhat = (x - mean) * inv
    axes = tuple(range(dout.ndim - 1))
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * xhat).sum(axis=axes)
    dxhat = dout * gamma
    if train:
        n = dout.size // dout.shape[-1]
        dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    else:
        dx = dxhat * inv
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


# ------------------------------------------------------------------ elementwise, pooling, dense


def leaky_relu_forward(x, slope=LEAKY_SLOPE):
    if 0 <= slope <= 1:
        out = np.maximum(x, slope * x)  # sign of out equals sign of x
        return out, (out, slope)
    return np.where(x > 0, x, slope * x).astype(x.dtype, copy=False), (x, slope)


def leaky_relu_backward(dout, cache):
    ref, slope = cache
    return np.where(ref > 0, dout, slope * dout).astype(dout.dtype, copy=False)


def global_avg_pool_forward(x):
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dout, shape):
    _, h, w, _ = shape
    return np.broadcast_to((dout / (h * w))[:, None, None, :], shape).copy()


def linear_forward(x, w, b):
    return x @ w + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def dropout_forward(x, p, rng, train):
    if not train or p <= 0:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep, keep


def dropout_backward(dout, keep):
    return dout if keep is None else dout * keep


# ------------------------------------------------------------------ losses


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def focal_loss_with_grad(logits, labels, gamma):
    """Mean focal loss over the batch and its gradient w.r.t. the logits.

    Per item ``-(1 - p_t)**gamma * log(p_t)`` with ``p_t`` clamped at 1e-12.
    """
    probs = softmax(logits.astype(np.float64))
    n = probs.shape[0]
    idx = np.arange(n)
    pt_raw = probs[idx, labels]
    pt = np.maximum(pt_raw, 1e-12)
    q = 1.0 - pt
    logp = np.log(pt)
    loss = -(q**gamma) * logp
    # dL/dz_j = A * (onehot_j - p_j) with A = gamma q^(gamma-1) p log p - q^gamma
    if gamma == 0:
        a = -np.ones_like(pt)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(q > 0, gamma * q ** (gamma - 1) * pt * logp, 0.0)
        a = term - q**gamma
    a = np.where(pt_raw < 1e-12, 0.0, a)
    onehot = np.zeros_like(probs)
    onehot[idx, labels] = 1.0
    grad = a[:, None] * (onehot - probs) / n
    return float(loss.mean()), grad.astype(logits.dtype)


def cross_entropy_with_grad(logits, labels):
    probs = softmax(logits.astype(np.float64))
    n = probs.shape[0]
    idx = np.arange(n)
    loss = -np.log(np.maximum(probs[idx, labels], 1e-12))
    grad = probs.copy()
    grad[idx, labels] -= 1.0
    return float(loss.mean()), (grad / n).astype(logits.dtype)


def mse_with_grad(recon, target, weight=None):
    """Mean squared error (optionally restricted to ``weight`` == 1 entries) and its gradient."""
    diff = recon.astype(np.float64) - target
    if weight is None:
        return float(np.mean(diff * diff)), (2.0 * diff / diff.size).astype(recon.dtype)
    count = max(float(weight.sum()), 1.0)
    return float(np.sum(weight * diff * diff) / count), (2.0 * weight * diff / count).astype(recon.dtype)
