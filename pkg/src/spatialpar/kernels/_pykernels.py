"""Numpy fallback for the compiled convolution loops (same signatures)."""

import numpy as np


def _window(x, a, b, stride, ho, wo):
    return x[:, :, a : a + stride * (ho - 1) + 1 : stride, b : b + stride * (wo - 1) + 1 : stride]


def conv_fp_valid(x, w, stride):
    n, c, hx, wx = x.shape
    f, wc, k, _ = w.shape
    if wc != c:
        raise ValueError(f"weight shape {w.shape} does not match {c} input channels")
    if hx < k or wx < k:
        raise ValueError(f"input {hx}x{wx} smaller than kernel {k}")
    ho, wo = (hx - k) // stride + 1, (wx - k) // stride + 1
    y = np.zeros((n, ho, wo, f))
    for a in range(k):
        for b in range(k):
            y += np.tensordot(_window(x, a, b, stride, ho, wo), w[:, :, a, b], axes=([1], [1]))
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv_bpw_valid(x, dy, stride, k):
    n, c = x.shape[:2]
    _, f, ho, wo = dy.shape
    if dy.shape[0] != n:
        raise ValueError("sample count mismatch between x and dy")
    if (ho - 1) * stride + k > x.shape[2] or (wo - 1) * stride + k > x.shape[3]:
        raise ValueError("x does not cover every window of dy")
    dw = np.zeros((f, c, k, k))
    for a in range(k):
        for b in range(k):
            dw[:, :, a, b] = np.tensordot(dy, _window(x, a, b, stride, ho, wo), axes=([0, 2, 3], [0, 2, 3]))
    return dw


def conv_bpx_full(dy, w, stride, hx, wx):
    n, f, ho, wo = dy.shape
    wf, c, k, _ = w.shape
    if wf != f:
        raise ValueError(f"weight filters {wf} do not match dy channels {f}")
    if (ho - 1) * stride + k > hx or (wo - 1) * stride + k > wx:
        raise ValueError("output extent too small for the transposed convolution")
    dx = np.zeros((n, c, hx, wx))
    for a in range(k):
        for b in range(k):
            contrib = np.tensordot(dy, w[:, :, a, b], axes=([1], [0])).transpose(0, 3, 1, 2)
            _window(dx, a, b, stride, ho, wo)[...] += contrib
    return dx
