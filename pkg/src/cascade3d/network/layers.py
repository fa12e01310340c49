"""Forward/backward pairs for the layers of a valid-convolution 3D U-Net.

Every tensor is a single sample in channels-last layout ``(X, Y, Z, C)``.
Forward functions return ``(output, cache)``; backward functions take the
upstream gradient and the cache.
"""

from __future__ import annotations

import numpy as np

from .kernels import col2im, im2col_into

BN_EPS = 1e-5
BN_MOMENTUM = 0.99


class Scratch:
    """Reusable column buffers keyed by layer name.

    A buffer is overwritten by the next forward through the same layer, so
    one Scratch must not be shared between concurrent forwards.
    """

    def __init__(self):
        self._bufs: dict[str, np.ndarray] = {}

    def get(self, key, shape, dtype) -> np.ndarray:
        buf = self._bufs.get(key)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = np.empty(shape, dtype=dtype)
            self._bufs[key] = buf
        return buf


# ----------------------------------------------------------------- convolution


def conv_forward(x, w, b, scratch: Scratch | None = None, key: str = "conv"):
    """Valid convolution with a ``(k, k, k, C_in, C_out)`` kernel."""
    k = w.shape[0]
    ci, co = w.shape[3], w.shape[4]
    if x.shape[3] != ci:
        raise ValueError(f"conv expects {ci} input channels, got {x.shape[3]}")
    out = tuple(n - k + 1 for n in x.shape[:3])
    if min(out) <= 0:
        raise ValueError(f"input {x.shape[:3]} too small for a {k}^3 kernel")
    if k == 1:
        cols = x.reshape(-1, ci)
    else:
        shape = (out[0] * out[1] * out[2], k**3 * ci)
        cols = scratch.get(key, shape, x.dtype) if scratch is not None else np.empty(shape, x.dtype)
        im2col_into(np.ascontiguousarray(x), k, cols)
    y = cols @ w.reshape(-1, co)
    y += b
    return y.reshape(out + (co,)), (cols, x.shape, w)


def conv_backward(gy, cache, need_input_grad: bool = True, scratch: Scratch | None = None, key: str = "conv"):
    cols, x_shape, w = cache
    k, ci, co = w.shape[0], w.shape[3], w.shape[4]
    g = gy.reshape(-1, co)
    gw = (cols.T @ g).reshape(w.shape)
    gb = g.sum(axis=0)
    gx = None
    if not need_input_grad:
        pass
    elif k == 1:
        gx = (g @ w.reshape(-1, co).T).reshape(x_shape)
    elif co < ci:
        # full correlation of the padded gradient with the flipped kernel
        # touches fewer columns than scattering ci-wide columns back
        p = k - 1
        gpad = np.pad(gy, ((p, p), (p, p), (p, p), (0, 0)))
        wf = w[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3)
        gx, _ = conv_forward(gpad, wf, np.zeros(ci, gy.dtype), scratch, key + ".bwd")
    else:
        gcols = g @ w.reshape(-1, co).T
        gx = col2im(gcols, x_shape[0], x_shape[1], x_shape[2], k)
    return gx, gw, gb


# ------------------------------------------------------------ up-convolution


def upconv_forward(x, w, b):
    """Transposed 2x2x2 convolution with stride 2; ``w`` is ``(2, 2, 2, C_in, C_out)``."""
    a0, a1, a2, ci = x.shape
    co = w.shape[4]
    wm = w.transpose(3, 0, 1, 2, 4).reshape(ci, 8 * co)
    y = (x.reshape(-1, ci) @ wm).reshape(a0, a1, a2, 2, 2, 2, co)
    y = y.transpose(0, 3, 1, 4, 2, 5, 6).reshape(2 * a0, 2 * a1, 2 * a2, co)
    y += b
    return y, (x, w)


def upconv_backward(gy, cache):
    x, w = cache
    a0, a1, a2, ci = x.shape
    co = w.shape[4]
    g = gy.reshape(a0, 2, a1, 2, a2, 2, co).transpose(0, 2, 4, 1, 3, 5, 6).reshape(-1, 8 * co)
    wm = w.transpose(3, 0, 1, 2, 4).reshape(ci, 8 * co)
    gx = (g @ wm.T).reshape(x.shape)
    gw = (x.reshape(-1, ci).T @ g).reshape(ci, 2, 2, 2, co).transpose(1, 2, 3, 0, 4)
    gb = gy.reshape(-1, co).sum(axis=0)
    return gx, np.ascontiguousarray(gw), gb


# ------------------------------------------------------------------ max-pool


def maxpool_forward(x):
    n0, n1, n2, c = x.shape
    if n0 % 2 or n1 % 2 or n2 % 2:
        raise ValueError(f"max-pool needs even dims, got {x.shape[:3]}")
    blocks = (
        x.reshape(n0 // 2, 2, n1 // 2, 2, n2 // 2, 2, c)
        .transpose(0, 2, 4, 6, 1, 3, 5)
        .reshape(n0 // 2, n1 // 2, n2 // 2, c, 8)
    )
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool_backward(gy, cache):
    idx, x_shape = cache
    n0, n1, n2, c = x_shape
    g = np.zeros(idx.shape + (8,), dtype=gy.dtype)
    np.put_along_axis(g, idx[..., None], gy[..., None], axis=-1)
    g = g.reshape(n0 // 2, n1 // 2, n2 // 2, c, 2, 2, 2).transpose(0, 4, 1, 5, 2, 6, 3)
    return g.reshape(x_shape)


# ---------------------------------------------------------------------- ReLU


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(gy, mask):
    return gy * mask


# --------------------------------------------------------- batch normalization


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Per-channel normalization over the spatial axes of one tile.

    In train mode the running statistics are updated in place.
    """
    c = x.shape[-1]
    flat = x.reshape(-1, c)
    if train:
        n = flat.shape[0]
        mean = flat.mean(axis=0)
        centered = flat - mean
        var = (centered * centered).mean(axis=0)
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = centered * inv
        running_mean *= BN_MOMENTUM
        running_mean += (1.0 - BN_MOMENTUM) * mean
        running_var *= BN_MOMENTUM
        running_var += (1.0 - BN_MOMENTUM) * var * (n / max(n - 1, 1))
        cache = (xhat, inv, gamma)
    else:
        inv = 1.0 / np.sqrt(running_var + BN_EPS)
        xhat = (flat - running_mean) * inv
        cache = None
    y = xhat * gamma + beta
    return y.reshape(x.shape).astype(x.dtype, copy=False), cache


def batchnorm_backward(gy, cache):
    if cache is None:
        raise RuntimeError("batch-norm backward needs a train-mode forward")
    xhat, inv, gamma = cache
    c = gy.shape[-1]
    g = gy.reshape(-1, c)
    n = g.shape[0]
    gbeta = g.sum(axis=0)
    ggamma = (g * xhat).sum(axis=0)
    gxhat = g * gamma
    gx = (inv / n) * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
    return gx.reshape(gy.shape), ggamma, gbeta


# ------------------------------------------------------- crop and concatenate


def center_crop_slices(src_dims, dst_dims) -> tuple[slice, slice, slice]:
    sl = []
    for s, d in zip(src_dims, dst_dims):
        if (s - d) % 2 or s < d:
            raise ValueError(f"cannot center-crop {src_dims} to {dst_dims}")
        m = (s - d) // 2
        sl.append(slice(m, m + d))
    return tuple(sl)


def crop_concat_forward(skip, up):
    """Center-crop ``skip`` to ``up``'s spatial dims and stack ``[skip, up]`` on channels."""
    sl = center_crop_slices(skip.shape[:3], up.shape[:3])
    y = np.concatenate([skip[sl], up], axis=-1)
    return y, (skip.shape, sl)


def crop_concat_backward(gy, cache):
    skip_shape, sl = cache
    cs = skip_shape[3]
    gskip = np.zeros(skip_shape, dtype=gy.dtype)
    gskip[sl] = gy[..., :cs]
    return gskip, gy[..., cs:]
