"""Spatial ops on NCHW tensors: convolution, pooling, upsampling."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, make_node


def _im2col(xl: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Channels-last patches: [N, Hp, Wp, C] -> [N*Ho*Wo, kh*kw*C]."""
    n, _, _, c = xl.shape
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xl.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xl[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding, no bias.

    Args:
        x: input of shape [N, C_in, H, W].
        kernel: weights of shape [C_out, C_in, kh, kw].
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ValueError(f"conv2d: input has {c_in} channels but kernel expects {k_in}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride={stride} / padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xl = np.zeros((n, hp, wp, c_in), dtype=x.dtype)
    xl[:, padding:padding + h, padding:padding + w, :] = x.data.transpose(0, 2, 3, 1)
    cols = _im2col(xl, kh, kw, stride, ho, wo)
    # kernel columns ordered (kh, kw, C_in) to match the patch layout
    wmat = kernel.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gk = None
        if kernel.requires_grad:
            gk = (gm.T @ cols).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, kh, kw, c_in)
            gxl = np.zeros_like(xl)
            for i in range(kh):
                for j in range(kw):
                    gxl[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            gx = gxl[:, padding:padding + h, padding:padding + w, :].transpose(0, 3, 1, 2)
        return gx, gk

    return make_node(np.ascontiguousarray(out), (x, kernel), bw, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties route the gradient to the first max."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"max_pool2d: spatial dims {h}x{w} not divisible by {size}")
    blocks = x.data.reshape(n, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(n, c, h // size, w // size, size * size)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return make_node(out, (x,), bw, "max_pool2d")


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_node(out, (x,), bw, "upsample_nearest2d")


nearest_upsample2d = upsample_nearest2d


def global_avg_pool2d(x: Tensor) -> Tensor:
    """Mean over H and W: [N, C, H, W] -> [N, C]."""
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] * inv, x.shape).copy(),)

    return make_node(x.data.mean(axis=(2, 3)), (x,), bw, "global_avg_pool2d")
