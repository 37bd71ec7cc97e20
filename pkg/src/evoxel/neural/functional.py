"""Forward/backward kernels on (N, C, D, H, W) arrays.

Convolutions are cross-correlations lowered to one matmul against an
im2col patch matrix; transposed convolutions use the adjoint (col2im).
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Triple = tuple[int, int, int]


def _triple(v) -> Triple:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 values, got {v!r}")
    return t


def conv_output_shape(size: Sequence[int], kernel, stride, padding) -> Triple:
    k, s, p = _triple(kernel), _triple(stride), _triple(padding)
    out = tuple((size[i] + 2 * p[i] - k[i]) // s[i] + 1 for i in range(3))
    if min(out) < 1:
        raise ValueError(f"input {tuple(size)} too small for kernel {k} with padding {p}")
    return out


def _pad(x: np.ndarray, p: Triple) -> np.ndarray:
    if not any(p):
        return x
    return np.pad(x, ((0, 0), (0, 0), (p[0], p[0]), (p[1], p[1]), (p[2], p[2])))


def _windows(xp: np.ndarray, k: Triple, s: Triple, out: Triple) -> np.ndarray:
    """(N, C, oD, oH, oW, kD, kH, kW) read-only view."""
    v = sliding_window_view(xp, k, axis=(2, 3, 4))
    return v[:, :, : (out[0] - 1) * s[0] + 1 : s[0], : (out[1] - 1) * s[1] + 1 : s[1], : (out[2] - 1) * s[2] + 1 : s[2]]


def im2col(x: np.ndarray, k: Triple, s: Triple, p: Triple, out: Triple) -> np.ndarray:
    """(C * kD * kH * kW, N * oD * oH * oW) patch matrix."""
    win = _windows(_pad(x, p), k, s, out)
    C = x.shape[1]
    return win.transpose(1, 5, 6, 7, 0, 2, 3, 4).reshape(C * int(np.prod(k)), -1)


def col2im(cols: np.ndarray, shape, k: Triple, s: Triple, p: Triple, out: Triple) -> np.ndarray:
    """Adjoint of :func:`im2col`; ``shape`` is the unpadded (N, C, D, H, W)."""
    N, C = shape[:2]
    oD, oH, oW = out
    cols = cols.reshape((C,) + tuple(k) + (N, oD, oH, oW))
    padded = (C, N) + tuple(shape[2 + i] + 2 * p[i] for i in range(3))
    acc = np.zeros(padded, dtype=cols.dtype)
    for a in range(k[0]):
        for b in range(k[1]):
            for c in range(k[2]):
                acc[:, :, a : a + s[0] * oD : s[0], b : b + s[1] * oH : s[1], c : c + s[2] * oW : s[2]] += cols[:, a, b, c]
    acc = acc[:, :, p[0] : p[0] + shape[2], p[1] : p[1] + shape[3], p[2] : p[2] + shape[4]]
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4))


def _to_rows(x: np.ndarray) -> np.ndarray:
    """(N, C, ...) -> (C, N * ...)."""
    return x.transpose(1, 0, 2, 3, 4).reshape(x.shape[1], -1)


def _from_rows(m: np.ndarray, N: int, spatial) -> np.ndarray:
    """(C, N * ...) -> contiguous (N, C, ...)."""
    return np.ascontiguousarray(m.reshape((m.shape[0], N) + tuple(spatial)).transpose(1, 0, 2, 3, 4))


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride=1, padding=0, bias=None, return_cols: bool = False):
    """x (N, Ci, D, H, W), w (Co, Ci, kD, kH, kW) -> (N, Co, oD, oH, oW).

    With ``return_cols`` the patch matrix is returned too, for reuse in the
    backward pass.
    """
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv3d shape mismatch: input {x.shape}, weights {w.shape}")
    k, s, p = w.shape[2:], _triple(stride), _triple(padding)
    out = conv_output_shape(x.shape[2:], k, s, p)
    cols = im2col(x, k, s, p, out)
    y = w.reshape(w.shape[0], -1) @ cols
    if bias is not None:
        y += bias.reshape(-1, 1)
    y = _from_rows(y, x.shape[0], out)
    return (y, cols) if return_cols else y


def conv3d_backward(x: np.ndarray, w: np.ndarray, grad: np.ndarray, stride=1, padding=0,
                    need_input_grad: bool = True, cols: np.ndarray = None):
    """Returns (grad_input or None, grad_weight, grad_bias)."""
    k, s, p = w.shape[2:], _triple(stride), _triple(padding)
    out = grad.shape[2:]
    if cols is None:
        cols = im2col(x, k, s, p, out)
    g = _to_rows(grad)
    gw = (g @ cols.T).reshape(w.shape)
    gb = g.sum(axis=1)
    gx = None
    if need_input_grad:
        gcols = w.reshape(w.shape[0], -1).T @ g
        gx = col2im(gcols, x.shape, k, s, p, out)
    return gx, gw, gb


def conv_transpose3d_forward(x: np.ndarray, w: np.ndarray, stride=2, padding=0, bias=None) -> np.ndarray:
    """Adjoint of conv3d. x (N, Ci, D, H, W), w (Ci, Co, kD, kH, kW).

    Output edge is ``(in - 1) * stride - 2 * padding + kernel``.
    """
    if x.ndim != 5 or w.ndim != 5 or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose3d shape mismatch: input {x.shape}, weights {w.shape}")
    k, s, p = w.shape[2:], _triple(stride), _triple(padding)
    N, Co = x.shape[0], w.shape[1]
    out = tuple((x.shape[2 + i] - 1) * s[i] - 2 * p[i] + k[i] for i in range(3))
    if min(out) < 1:
        raise ValueError("conv_transpose3d output would be empty")
    cols = w.reshape(w.shape[0], -1).T @ _to_rows(x)
    y = col2im(cols, (N, Co) + out, k, s, p, x.shape[2:])
    if bias is not None:
        y += bias.reshape(1, -1, 1, 1, 1)
    return y


def conv_transpose3d_backward(x: np.ndarray, w: np.ndarray, grad: np.ndarray, stride=2, padding=0):
    """Returns (grad_input, grad_weight, grad_bias)."""
    k, s, p = w.shape[2:], _triple(stride), _triple(padding)
    cols = im2col(grad, k, s, p, x.shape[2:])
    xr = _to_rows(x)
    gw = (xr @ cols.T).reshape(w.shape)
    gx = _from_rows(w.reshape(w.shape[0], -1) @ cols, x.shape[0], x.shape[2:])
    return gx, gw, grad.sum(axis=(0, 2, 3, 4))


# ---------------------------------------------------------------------------
# batch norm


def batchnorm_forward(x, gamma, beta, mean, var, eps):
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1, 1)) * inv.reshape(1, -1, 1, 1, 1)
    return xhat * gamma.reshape(1, -1, 1, 1, 1) + beta.reshape(1, -1, 1, 1, 1), xhat, inv


def batchnorm_backward(grad, xhat, inv, gamma, batch_stats: bool):
    axes = (0, 2, 3, 4)
    g_gamma = (grad * xhat).sum(axis=axes)
    g_beta = grad.sum(axis=axes)
    scale = (gamma * inv).reshape(1, -1, 1, 1, 1)
    if not batch_stats:
        return grad * scale, g_gamma, g_beta
    m = grad.size / grad.shape[1]
    gx = scale * (grad - (g_beta / m).reshape(1, -1, 1, 1, 1) - xhat * (g_gamma / m).reshape(1, -1, 1, 1, 1))
    return gx, g_gamma, g_beta


# ---------------------------------------------------------------------------
# efficient channel attention


def adaptive_kernel_size(channels: int, gamma: float = 2.0, b: float = 1.0) -> int:
    """Odd 1D kernel size for ``channels``: |log2(C)/gamma + b/gamma| rounded down, bumped to odd."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    t = int(abs(math.log2(channels) / gamma + b / gamma))
    k = t if t % 2 else t + 1
    return max(k, 1)


def sigmoid(z):
    z = np.asarray(z)
    out = np.empty_like(z, dtype=np.result_type(z, np.float32))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _circular_conv1d(s: np.ndarray, w: np.ndarray) -> np.ndarray:
    """z[n, c] = sum_j w[j] * s[n, (c + j - k//2) mod C]."""
    h = len(w) // 2
    z = np.zeros_like(s)
    for j, wj in enumerate(w):
        z += wj * np.roll(s, -(j - h), axis=1)
    return z


def eca_forward(x: np.ndarray, w: np.ndarray):
    """Returns (output, cache). Each channel is scaled by sigmoid of a circular 1D conv of the channel means."""
    s = x.mean(axis=(2, 3, 4))
    a = sigmoid(_circular_conv1d(s, w))
    return x * a[:, :, None, None, None], (x, s, a)


def eca_backward(grad: np.ndarray, w: np.ndarray, cache):
    x, s, a = cache
    h = len(w) // 2
    da = (grad * x).sum(axis=(2, 3, 4))
    dz = da * a * (1.0 - a)
    gw = np.array([(dz * np.roll(s, -(j - h), axis=1)).sum() for j in range(len(w))], dtype=w.dtype)
    ds = np.zeros_like(s)
    for j, wj in enumerate(w):
        ds += wj * np.roll(dz, j - h, axis=1)
    vol = x.shape[2] * x.shape[3] * x.shape[4]
    gx = grad * a[:, :, None, None, None] + (ds / vol)[:, :, None, None, None]
    return gx, gw


# ---------------------------------------------------------------------------
# focal loss

LOG_FLOOR = math.log(1e-12)


def focal_loss(logits: np.ndarray, target: np.ndarray, alpha: float = 0.25, gamma: float = 2.0):
    """Mean binary focal loss and its gradient w.r.t. the logits.

    ``-alpha_t (1 - p_t)^gamma log(p_t)`` with ``p = sigmoid(logit)``;
    ``log(p_t)`` is floored at ``log(1e-12)`` (zero gradient through the floor).
    """
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(target).astype(bool)
    sgn = np.where(y, 1.0, -1.0)
    sz = sgn * z
    # log sigmoid(sz), computed stably
    log_pt = np.minimum(sz, 0.0) - np.log1p(np.exp(-np.abs(sz)))
    pt = np.exp(log_pt)
    one_minus = sigmoid(-sz)
    a_t = np.where(y, alpha, 1.0 - alpha)
    floored = log_pt < LOG_FLOOR
    log_c = np.where(floored, LOG_FLOOR, log_pt)
    mod = one_minus**gamma
    loss = -a_t * mod * log_c
    # d/dz: d(p_t)/dz = sgn * p_t * (1 - p_t)
    d_mod = np.where(one_minus > 0, gamma * one_minus ** max(gamma - 1.0, 0.0), 0.0) if gamma != 0 else 0.0
    d_log = np.where(floored, 0.0, one_minus)  # d log(p_t)/d(sz) = 1 - p_t
    d_sz = -a_t * (-d_mod * pt * one_minus * log_c + mod * d_log)
    n = z.size
    return float(loss.sum() / n), (sgn * d_sz / n)
