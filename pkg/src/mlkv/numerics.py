"""Dense numeric kernels on numpy arrays.

All kernels operate along the last axis and accept arbitrary leading
dimensions, so a ``(rows, cols)`` matrix and a ``(batch, seq, d)`` activation
go through the same code. Arithmetic happens in the dtype of the inputs:
float32 for model state, float64 when checking gradients.
"""

import math

import numpy as np

from .errors import DimensionError, NumericError

STORAGE_DTYPE = np.float32
ROTARY_BASE = 10000.0
LN_EPS = 1e-5


def check_finite(x, name):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {name}")
    return x


def matmul(a, b):
    """Matrix product over the last axis of ``a`` and the first axis of ``b``.

    ``a`` may carry leading batch dimensions; ``b`` is a 2-D weight matrix.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m, mask=None):
    """Row-wise softmax along the last axis.

    ``mask`` is a boolean array broadcastable to ``m``; False entries get
    probability exactly zero. Every row must keep at least one True entry.
    """
    m = np.asarray(m)
    if np.isnan(m).any():
        raise NumericError("NaN input to softmax_rows")
    if mask is not None:
        m = np.where(mask, m, -np.inf)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``.

    Rows with zero spread normalize to exactly zero, so the result is ``beta``.
    """
    x = np.asarray(x)
    if x.shape[-1] != np.shape(gamma)[-1] or x.shape[-1] != np.shape(beta)[-1]:
        raise DimensionError(
            f"layer_norm length mismatch: x {x.shape}, gamma {np.shape(gamma)}, beta {np.shape(beta)}"
        )
    if eps <= 0:
        raise ValueError("eps must be positive")
    xhat, _ = _normalize(x, eps)
    return xhat * gamma + beta


def _normalize(x, eps):
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    flat = np.ptp(x, axis=-1, keepdims=True) == 0
    xhat = np.where(flat, 0.0, centered * inv_std).astype(x.dtype, copy=False)
    inv_std = np.where(flat, 0.0, inv_std).astype(x.dtype, copy=False)
    return xhat, inv_std


def rotary_angles(positions, d_k, dtype=np.float64):
    """Angles ``position * base**(-2t/d_k)`` with shape ``positions.shape + (d_k//2,)``."""
    if d_k % 2:
        raise DimensionError(f"rotary needs an even head dimension, got {d_k}")
    t = np.arange(d_k // 2, dtype=np.float64)
    freqs = ROTARY_BASE ** (-2.0 * t / d_k)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * freqs
    return ang.astype(dtype, copy=False)


def rotary_apply(v, positions, inverse=False):
    """Rotate consecutive pairs ``(v[2t], v[2t+1])`` of the last axis.

    ``positions`` broadcasts against ``v.shape[:-1]``. ``inverse`` rotates by
    the negative angle, which is the transpose used in backpropagation.
    """
    v = np.asarray(v)
    d_k = v.shape[-1]
    ang = rotary_angles(positions, d_k)
    cos = np.cos(ang).astype(v.dtype, copy=False)
    sin = np.sin(ang).astype(v.dtype, copy=False)
    if inverse:
        sin = -sin
    even = v[..., 0::2]
    odd = v[..., 1::2]
    out = np.empty(np.broadcast_shapes(v.shape, cos.shape[:-1] + (d_k,)), dtype=v.dtype)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of ``targets`` under row-wise ``logits``."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy shapes: logits {logits.shape}, targets {targets.shape}")
    vocab = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(f"target index out of range for vocab {vocab}")
    logp = log_softmax(logits)
    return -logp[np.arange(len(targets)), targets].mean()


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x)))


def gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
