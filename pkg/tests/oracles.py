"""Independent brute-force references used by the tests.

Nothing here imports the code under test beyond plain data types, so a
bug in the package cannot leak into its own oracle.
"""

import itertools

import numpy as np


def blocks(extent, parts):
    """Near-equal contiguous blocks, remainder on the first blocks."""
    q, r = divmod(extent, parts)
    out, start = [], 0
    for i in range(parts):
        size = q + (1 if i < r else 0)
        out.append(range(start, start + size))
        start += size
    return out


def out_extent(extent, k, s, pad):
    return -(-(extent + 2 * pad - k + 1) // s)


def fp_dependence(out_rows, k, s, pad, extent):
    """Input rows read by the given output rows (scan every window tap)."""
    rows = set()
    for i in out_rows:
        for a in range(k):
            src = s * i + a - pad
            if 0 <= src < extent:
                rows.add(src)
    return rows


def bpx_dependence(in_rows, k, s, pad, o_extent):
    """Output rows whose error signal reaches the given input rows."""
    rows = set()
    for o in range(o_extent):
        for a in range(k):
            if s * o + a - pad in in_rows:
                rows.add(o)
    return rows


def halo_sets(grid, shape, k, s, pad, phase="fp"):
    """Per rank: {peer: set of (n, h, w)} received, from dependence scans.

    ``grid`` is (p_n, p_h, p_w); ranks are row-major over it.
    """
    pn, ph, pw = grid
    n, h, w = shape
    oh, ow = out_extent(h, k, s, pad), out_extent(w, k, s, pad)
    if phase == "fp":
        src_h, src_w = blocks(h, ph), blocks(w, pw)
        dst_h, dst_w = blocks(oh, ph), blocks(ow, pw)
    else:
        src_h, src_w = blocks(oh, ph), blocks(ow, pw)
        dst_h, dst_w = blocks(h, ph), blocks(w, pw)
    nb = blocks(n, pn)

    def rank(i, j, l):
        return (i * ph + j) * pw + l

    owner = {}
    for i, j, l in itertools.product(range(pn), range(ph), range(pw)):
        for e in itertools.product(nb[i], src_h[j], src_w[l]):
            owner[e] = rank(i, j, l)

    result = {}
    for i, j, l in itertools.product(range(pn), range(ph), range(pw)):
        if phase == "fp":
            rows = fp_dependence(dst_h[j], k, s, pad, h)
            cols = fp_dependence(dst_w[l], k, s, pad, w)
        else:
            rows = bpx_dependence(set(dst_h[j]), k, s, pad, oh)
            cols = bpx_dependence(set(dst_w[l]), k, s, pad, ow)
        me = rank(i, j, l)
        got: dict = {}
        for e in itertools.product(nb[i], rows, cols):
            peer = owner[e]
            if peer != me:
                got.setdefault(peer, set()).add(e)
        result[me] = got
    return result


def box_elements(box, step=(1, 1)):
    (n0, n1), (h0, h1), (w0, w1) = box
    return set(itertools.product(range(n0, n1), range(h0, h1, step[0]), range(w0, w1, step[1])))


def naive_conv(x, w, s, pad):
    """Direct evaluation of the forward sum, one output element at a time."""
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    oh, ow = out_extent(h, k, s, pad), out_extent(wd, k, s, pad)
    y = np.zeros((n, f, oh, ow))
    for b, g, i, j in itertools.product(range(n), range(f), range(oh), range(ow)):
        acc = 0.0
        for ch, a, bb in itertools.product(range(c), range(k), range(k)):
            r, q = s * i + a - pad, s * j + bb - pad
            if 0 <= r < h and 0 <= q < wd:
                acc += x[b, ch, r, q] * w[g, ch, a, bb]
        y[b, g, i, j] = acc
    return y


def central_difference(fn, x, step=1e-6):
    """Gradient of scalar ``fn`` at ``x`` by central differences."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = fn(x)
        flat[i] = old - step
        down = fn(x)
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return grad


def rel_error(a, b):
    scale = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / scale) if scale else float(np.max(np.abs(a)))


def brute_force_line(layers, options, cost, shuffle, order_key):
    """Minimum over every assignment, summing left to right along the chain.

    Ties go to the assignment whose per-layer ``order_key`` sequence is
    smallest.  Returns (cost, assignment tuple).
    """
    best = None
    for combo in itertools.product(*[options[l] for l in layers]):
        total = 0.0
        for i, (lid, d) in enumerate(zip(layers, combo)):
            if i:
                total = total + shuffle(layers[i - 1], lid, combo[i - 1], d)
            total = total + cost(lid, d)
        key = (total, [order_key(d) for d in combo])
        if best is None or key < best[0]:
            best = (key, combo)
    return best[0][0], best[1]


def brute_force_dag(ids, edges, options, cost, shuffle):
    """Minimum of the additive objective over every assignment of a DAG."""
    best = None
    for combo in itertools.product(*[options[l] for l in ids]):
        a = dict(zip(ids, combo))
        total = sum(cost(l, a[l]) for l in ids) + sum(shuffle(p, c, a[p], a[c]) for p, c in edges)
        if best is None or total < best[0]:
            best = (total, a)
    return best
