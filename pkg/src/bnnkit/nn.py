"""Numpy layer primitives for training-form forward and backward passes.

Layout convention is NHWC; convolution windows are flattened in
(row offset, col offset, channel) order, matching the deployment engine's
sliding-window order so that latent and compiled execution see identical
dot products.

Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes the cache. Binarization backward uses the clipped (hard-tanh)
straight-through estimator; passing ``surrogate=True`` to the forwards swaps
``sign`` for ``hardtanh`` so the analytic backward becomes the exact gradient
of a differentiable network (that is what the finite-difference tests check).
"""

from __future__ import annotations

import numpy as np


def sign_pm1(x: np.ndarray) -> np.ndarray:
    """Sign with the >= 0 boundary mapped to +1."""
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype, copy=False)


def hardtanh(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def ste_mask(latent: np.ndarray) -> np.ndarray:
    return (np.abs(latent) <= 1.0).astype(latent.dtype)


def ste_backward(upstream_grad: np.ndarray, latent_input: np.ndarray) -> np.ndarray:
    """Straight-through gradient: pass where |latent| <= 1, zero elsewhere."""
    return upstream_grad * ste_mask(latent_input)


def quantize_pixels(images: np.ndarray) -> np.ndarray:
    """Map uint8 pixels to the [-1, 1) grid (p - 128) / 128, exactly in float32."""
    if images.dtype != np.uint8:
        raise ValueError("expected uint8 pixel data")
    return ((images.astype(np.float32) - 128.0) / 128.0).astype(np.float32)


# ---------------------------------------------------------------------------
# convolution via im2col


def im2col(x: np.ndarray, k: int, stride: int = 1) -> tuple[np.ndarray, tuple[int, int]]:
    """Lower (N, H, W, C) into (N*OH*OW, k*k*C) rows, (ky, kx, c) interior order."""
    n, h, w, c = x.shape
    if k > h or k > w:
        raise ValueError(f"{k}x{k} window exceeds {h}x{w} input")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, oh, ow, k, k, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    return windows.reshape(n * oh * ow, k * k * c), (oh, ow)


def col2im(dcols: np.ndarray, x_shape: tuple, k: int, stride: int = 1) -> np.ndarray:
    n, h, w, c = x_shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    dcols = dcols.reshape(n, oh, ow, k, k, c)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for ky in range(k):
        for kx in range(k):
            dx[:, ky : ky + oh * stride : stride, kx : kx + ow * stride : stride, :] += dcols[
                :, :, :, ky, kx, :
            ]
    return dx


def binarize_weights(w: np.ndarray, surrogate: bool = False) -> np.ndarray:
    return hardtanh(w) if surrogate else sign_pm1(w)


def conv_forward(x: np.ndarray, w: np.ndarray, surrogate: bool = False):
    """Convolution of real input with binarized latent weights (K, K, Ci, Co)."""
    k = w.shape[0]
    wb = binarize_weights(w.astype(x.dtype, copy=False), surrogate)
    wmat = wb.reshape(-1, w.shape[3])
    cols, (oh, ow) = im2col(x, k)
    out = cols @ wmat
    n = x.shape[0]
    out = out.reshape(n, oh, ow, w.shape[3])
    return out, (cols, wmat, w, x.shape, k)


def conv_backward(dout: np.ndarray, cache):
    cols, wmat, w, x_shape, k = cache
    n, oh, ow, co = dout.shape
    dmat = dout.reshape(-1, co)
    dwb = cols.T @ dmat
    dw = ste_backward(dwb.reshape(w.shape), w.astype(dwb.dtype, copy=False))
    dx = col2im(dmat @ wmat.T, x_shape, k)
    return dx, dw


def fc_forward(x: np.ndarray, w: np.ndarray, surrogate: bool = False):
    """Fully-connected layer on flattened input with binarized weights (Fin, Co)."""
    x2d = x.reshape(x.shape[0], -1)
    wb = binarize_weights(w.astype(x.dtype, copy=False), surrogate)
    out = x2d @ wb
    return out, (x2d, wb, w, x.shape)


def fc_backward(dout: np.ndarray, cache):
    x2d, wb, w, x_shape = cache
    dwb = x2d.T @ dout
    dw = ste_backward(dwb, w.astype(dwb.dtype, copy=False))
    dx = (dout @ wb.T).reshape(x_shape)
    return dx, dw


# ---------------------------------------------------------------------------
# batch normalization (per output channel, biased variance)


def batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axes = tuple(range(x.ndim - 1))
    return x.mean(axis=axes), x.var(axis=axes)


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    mean: np.ndarray,
    var: np.ndarray,
    eps: float,
    batch_mode: bool,
):
    """Normalize with the given statistics (batch stats when training)."""
    std = np.sqrt(var + eps).astype(x.dtype, copy=False)
    xhat = (x - mean) / std
    out = gamma * xhat + beta
    return out, (xhat, std, gamma.astype(x.dtype, copy=False), batch_mode)


def batchnorm_backward(dout: np.ndarray, cache):
    xhat, std, gamma, batch_mode = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    if batch_mode:
        # statistics depend on the batch itself
        m_dout = dout.mean(axis=axes)
        m_dx = (dout * xhat).mean(axis=axes)
        dx = (gamma / std) * (dout - m_dout - xhat * m_dx)
    else:
        dx = dout * (gamma / std)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# sign activation (STE), max pooling, loss


def sign_act_forward(x: np.ndarray, surrogate: bool = False):
    out = hardtanh(x) if surrogate else sign_pm1(x)
    return out, x


def sign_act_backward(dout: np.ndarray, cache):
    return ste_backward(dout, cache)


def maxpool2x2_forward(x: np.ndarray):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"pool needs even extents, got {h}x{w}")
    xr = (
        x.reshape(n, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, h // 2, w // 2, 4, c)
    )
    idx = xr.argmax(axis=3)  # ties go to the first window element
    out = np.take_along_axis(xr, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, (idx, x.shape)


def maxpool2x2_backward(dout: np.ndarray, cache):
    idx, x_shape = cache
    n, h, w, c = x_shape
    dxr = np.zeros((n, h // 2, w // 2, 4, c), dtype=dout.dtype)
    np.put_along_axis(dxr, idx[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
    return (
        dxr.reshape(n, h // 2, w // 2, 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, h, w, c)
    )


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch plus the gradient w.r.t. logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    rows = np.arange(n)
    loss = float(-np.log(np.maximum(p[rows, labels], 1e-30)).mean())
    dlogits = p.astype(logits.dtype, copy=True)
    dlogits[rows, labels] -= 1.0
    dlogits /= n
    return loss, dlogits
