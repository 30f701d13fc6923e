"""Serial reference kernels (NCHW, float64).

The three convolution loops come from a compiled extension when it is
importable and from a numpy implementation otherwise.  Set
``SPATIALPAR_KERNELS=python`` to force the fallback, ``compiled`` to insist
on the extension.

Windowed kernels are split in two layers: ``*_valid`` / ``*_full`` helpers
work on arrays whose padding (or halo) is already materialized, and the
public ``conv_*`` / ``pool_*`` functions pad a whole tensor first.  The
distributed executor calls the helpers on its extended shards, so serial
and distributed runs share every floating-point operation.
"""

from __future__ import annotations

import importlib
import os

import numpy as np

from ..netgraph import ConvParams

from . import _pykernels


def _load(name: str):
    if name == "python":
        return _pykernels
    return importlib.import_module("._ckernels", __name__)


def get_backend(name: str):
    """Return the kernel module for ``'compiled'`` or ``'python'``."""
    if name not in ("compiled", "python"):
        raise ValueError(f"unknown kernel backend {name!r}")
    return _load(name)


def available_backends() -> list[str]:
    out = ["python"]
    try:
        _load("compiled")
        out.insert(0, "compiled")
    except ImportError:
        pass
    return out


_choice = os.environ.get("SPATIALPAR_KERNELS", "auto")
if _choice == "python":
    _core, BACKEND = _pykernels, "python"
elif _choice == "compiled":
    _core, BACKEND = _load("compiled"), "compiled"
else:
    try:
        _core, BACKEND = _load("compiled"), "compiled"
    except ImportError:
        _core, BACKEND = _pykernels, "python"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv_fp_valid(x_ext, w, stride):
    return _core.conv_fp_valid(_c(x_ext), _c(w), int(stride))


def conv_bpw_valid(x_ext, dy, stride, kernel):
    return _core.conv_bpw_valid(_c(x_ext), _c(dy), int(stride), int(kernel))


def conv_bpx_full(dy, w, stride, hx, wx):
    return _core.conv_bpx_full(_c(dy), _c(w), int(stride), int(hx), int(wx))


# -- padding / cropping --------------------------------------------------


def pad_spatial(x, pad_h: tuple[int, int], pad_w: tuple[int, int], value: float = 0.0):
    n, c, h, w = x.shape
    out = np.full((n, c, h + pad_h[0] + pad_h[1], w + pad_w[0] + pad_w[1]), value)
    out[:, :, pad_h[0] : pad_h[0] + h, pad_w[0] : pad_w[0] + w] = x
    return out


def place(src, src_origin: tuple[int, int], dst_shape, dst_origin: tuple[int, int]):
    """Copy the overlap of ``src`` into zeros of ``dst_shape`` (origins are global (h, w))."""
    out = np.zeros(dst_shape)
    add_overlap(out, dst_origin, src, src_origin)
    return out


def add_overlap(dst, dst_origin, src, src_origin):
    """``dst += src`` on the global (h, w) region both arrays cover."""
    h0 = max(dst_origin[0], src_origin[0])
    w0 = max(dst_origin[1], src_origin[1])
    h1 = min(dst_origin[0] + dst.shape[2], src_origin[0] + src.shape[2])
    w1 = min(dst_origin[1] + dst.shape[3], src_origin[1] + src.shape[3])
    if h0 >= h1 or w0 >= w1:
        return dst
    dst[:, :, h0 - dst_origin[0] : h1 - dst_origin[0], w0 - dst_origin[1] : w1 - dst_origin[1]] += src[
        :, :, h0 - src_origin[0] : h1 - src_origin[0], w0 - src_origin[1] : w1 - src_origin[1]
    ]
    return dst


def _check_4d(name, a):
    if np.ndim(a) != 4:
        raise ValueError(f"{name} must be a 4-D NCHW array, got shape {np.shape(a)}")


# -- convolution -----------------------------------------------------------


def conv_fp(x, w, conv: ConvParams):
    """Strided, zero-padded cross-correlation: y[k,f,i,j] = sum_c,a,b x[k,c,Si+a-P,Sj+b-P] w[f,c,a,b]."""
    _check_4d("x", x)
    _check_4d("w", w)
    if x.shape[1] != w.shape[1] or w.shape[2] != conv.kernel or w.shape[3] != conv.kernel:
        raise ValueError(f"shape mismatch: x {x.shape}, w {w.shape}, kernel {conv.kernel}")
    p = conv.padding
    return conv_fp_valid(pad_spatial(x, (p, p), (p, p)), w, conv.stride)


def conv_bp_weights(x, dy, conv: ConvParams):
    _check_4d("x", x)
    _check_4d("dy", dy)
    ho, wo = conv.out_extent(x.shape[2]), conv.out_extent(x.shape[3])
    if dy.shape[0] != x.shape[0] or dy.shape[2:] != (ho, wo):
        raise ValueError(f"shape mismatch: x {x.shape}, dy {dy.shape}")
    p = conv.padding
    return conv_bpw_valid(pad_spatial(x, (p, p), (p, p)), dy, conv.stride, conv.kernel)


def conv_bp_data(dy, w, conv: ConvParams, in_hw: tuple[int, int]):
    """Error signal for the layer input; ``in_hw`` is the input's (H, W)."""
    _check_4d("dy", dy)
    _check_4d("w", w)
    h, wd = in_hw
    if dy.shape[1] != w.shape[0] or dy.shape[2:] != (conv.out_extent(h), conv.out_extent(wd)):
        raise ValueError(f"shape mismatch: dy {dy.shape}, w {w.shape}, input {in_hw}")
    s, k, p = conv.stride, conv.kernel, conv.padding
    lh, lw = s * (dy.shape[2] - 1) + k, s * (dy.shape[3] - 1) + k
    full = conv_bpx_full(dy, w, s, lh, lw)
    return place(full, (-p, -p), (dy.shape[0], w.shape[1], h, wd), (0, 0))


# -- pooling ---------------------------------------------------------------


def pool_fp_valid(x_ext, kernel: int, stride: int, mode: str):
    """Pool over every full window of ``x_ext``; returns (y, argmax index or None)."""
    n, c, hx, wx = x_ext.shape
    ho, wo = (hx - kernel) // stride + 1, (wx - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"input {hx}x{wx} smaller than window {kernel}")
    if mode == "avg":
        y = np.zeros((n, c, ho, wo))
        for a in range(kernel):
            for b in range(kernel):
                y += x_ext[:, :, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride]
        return y / (kernel * kernel), None
    if mode != "max":
        raise ValueError(f"unknown pool mode {mode!r}")
    y = np.full((n, c, ho, wo), -np.inf)
    arg = np.zeros((n, c, ho, wo), dtype=np.int32)
    for a in range(kernel):
        for b in range(kernel):
            v = x_ext[:, :, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride]
            better = v > y  # first maximum in (a, b) order wins ties
            y = np.where(better, v, y)
            arg = np.where(better, a * kernel + b, arg)
    return y, arg


def pool_bp_full(dy, arg, kernel: int, stride: int, mode: str, hx: int, wx: int):
    n, c, ho, wo = dy.shape
    dx = np.zeros((n, c, hx, wx))
    for a in range(kernel):
        for b in range(kernel):
            view = dx[:, :, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride]
            if mode == "avg":
                view += dy / (kernel * kernel)
            else:
                view += np.where(arg == a * kernel + b, dy, 0.0)
    return dx


def pool_pad_value(mode: str) -> float:
    return -np.inf if mode == "max" else 0.0


def pool_fp(x, conv: ConvParams, mode: str = "max"):
    """Max or average pooling (average counts padded cells). Returns (y, argmax)."""
    _check_4d("x", x)
    p = conv.padding
    return pool_fp_valid(pad_spatial(x, (p, p), (p, p), pool_pad_value(mode)), conv.kernel, conv.stride, mode)


def pool_bp(dy, arg, conv: ConvParams, mode: str, in_hw: tuple[int, int]):
    _check_4d("dy", dy)
    h, w = in_hw
    if dy.shape[2:] != (conv.out_extent(h), conv.out_extent(w)):
        raise ValueError(f"shape mismatch: dy {dy.shape} for input {in_hw}")
    s, k, p = conv.stride, conv.kernel, conv.padding
    full = pool_bp_full(dy, arg, k, s, mode, s * (dy.shape[2] - 1) + k, s * (dy.shape[3] - 1) + k)
    return place(full, (-p, -p), (dy.shape[0], dy.shape[1], h, w), (0, 0))


# -- elementwise -----------------------------------------------------------


def relu_fp(x):
    return np.maximum(x, 0.0)


def relu_bp(dy, x):
    if np.shape(dy) != np.shape(x):
        raise ValueError(f"shape mismatch: dy {np.shape(dy)}, x {np.shape(x)}")
    return np.where(x > 0, dy, 0.0)


# -- batch normalization ---------------------------------------------------


def bn_partial_sums(x):
    """Per-channel (sum, sum of squares, count) over N, H, W."""
    return x.sum(axis=(0, 2, 3)), (x * x).sum(axis=(0, 2, 3)), x.shape[0] * x.shape[2] * x.shape[3]


def bn_stats(total, total_sq, count):
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    return mean, var


def bn_fp(x, mean, var, gamma, beta, eps):
    """Normalize with supplied per-channel statistics. Returns (y, xhat, inv_std)."""
    _check_4d("x", x)
    c = x.shape[1]
    for name, v in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        if np.shape(v) != (c,):
            raise ValueError(f"{name} must have shape ({c},), got {np.shape(v)}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    return gamma[None, :, None, None] * xhat + beta[None, :, None, None], xhat, inv_std


def bn_bp_partial_sums(dy, xhat):
    return dy.sum(axis=(0, 2, 3)), (dy * xhat).sum(axis=(0, 2, 3))


def bn_bp(dy, xhat, gamma, inv_std, sum_dy, sum_dy_xhat, count):
    """dL/dx of batch norm whose statistics were taken over a group of ``count`` elements.

    ``sum_dy`` and ``sum_dy_xhat`` are the group-wide per-channel sums; they
    are also dL/dbeta and dL/dgamma for that group.
    """
    if np.shape(dy) != np.shape(xhat):
        raise ValueError(f"shape mismatch: dy {np.shape(dy)}, xhat {np.shape(xhat)}")
    m_dy = (sum_dy / count)[None, :, None, None]
    m_dyx = (sum_dy_xhat / count)[None, :, None, None]
    return (gamma * inv_std)[None, :, None, None] * (dy - m_dy - xhat * m_dyx)


def batchnorm_train(x, gamma, beta, eps):
    """Batch norm with statistics from ``x`` itself (single group)."""
    s, sq, n = bn_partial_sums(x)
    mean, var = bn_stats(s, sq, n)
    return bn_fp(x, mean, var, gamma, beta, eps)


def batchnorm_train_bp(dy, xhat, gamma, inv_std):
    """Returns (dx, dgamma, dbeta) for :func:`batchnorm_train`."""
    sdy, sdyx = bn_bp_partial_sums(dy, xhat)
    n = dy.shape[0] * dy.shape[2] * dy.shape[3]
    return bn_bp(dy, xhat, gamma, inv_std, sdy, sdyx, n), sdyx, sdy


__all__ = [
    "BACKEND",
    "available_backends",
    "get_backend",
    "conv_fp",
    "conv_bp_weights",
    "conv_bp_data",
    "conv_fp_valid",
    "conv_bpw_valid",
    "conv_bpx_full",
    "pool_fp",
    "pool_bp",
    "pool_fp_valid",
    "pool_bp_full",
    "relu_fp",
    "relu_bp",
    "bn_partial_sums",
    "bn_stats",
    "bn_fp",
    "bn_bp",
    "bn_bp_partial_sums",
    "batchnorm_train",
    "batchnorm_train_bp",
    "pad_spatial",
    "place",
    "add_overlap",
]
