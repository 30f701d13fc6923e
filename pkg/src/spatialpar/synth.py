"""Seeded random networks, tensors and strategies for verification runs."""

from __future__ import annotations

import numpy as np

from .dist import DistributionError, LayerDistribution, grids
from .netgraph import NetworkGraph, parse_network
from .planner import _check, candidate_order

KERNELS = (1, 3, 5, 7)
BODY_KINDS = ("conv", "pool", "relu", "batchnorm-local", "batchnorm-spatial")


def random_network(seed: int | np.random.Generator, n_layers: int | None = None, *, max_n: int = 2,
                   max_c: int = 8, max_hw: int = 32, skips: bool = False) -> dict:
    """Network document with an input layer followed by ``n_layers`` body layers (3-8 by default).

    The first body layer is always a convolution.  With ``skips`` some
    layers also add the output of an earlier layer of equal shape.
    """
    rng = np.random.default_rng(seed)
    body = int(rng.integers(3, 9)) if n_layers is None else n_layers
    if not 1 <= body <= 64:
        raise ValueError("networks need between 1 and 64 body layers")
    n = int(rng.integers(1, max_n + 1))
    c = int(rng.integers(1, max_c + 1))
    h = int(rng.integers(max(4, max_hw // 4), max_hw + 1))
    w = int(rng.integers(max(4, max_hw // 4), max_hw + 1))
    layers = [{"id": "in", "kind": "input", "n": n, "c": c, "h": h, "w": w}]
    shapes = {"in": (c, h, w)}
    prev = "in"
    for i in range(1, body + 1):
        kind = "conv" if i == 1 else str(rng.choice(BODY_KINDS))
        ch, hh, ww = shapes[prev]
        lid = f"l{i}"
        entry = {"id": lid, "kind": kind, "parents": [prev]}
        if kind in ("conv", "pool"):
            k = int(rng.choice([k for k in KERNELS if k <= min(hh, ww)]))
            s = int(rng.choice([1, 2])) if min(hh, ww) >= 8 else 1
            pad = k // 2 if rng.random() < 0.8 else 0
            if kind == "conv":
                f = int(rng.integers(1, max_c + 1))
                entry.update(filters=f, kernel=k, stride=s, padding=pad)
            else:
                f = ch
                entry.update(window=k, stride=s, padding=pad, mode=str(rng.choice(["max", "avg"])))
            oh = -(-(hh + 2 * pad - k + 1) // s)
            ow = -(-(ww + 2 * pad - k + 1) // s)
            shapes[lid] = (f, oh, ow)
        else:
            shapes[lid] = (ch, hh, ww)
        if skips and i > 1 and rng.random() < 0.3:
            same = [p["id"] for p in layers if shapes[p["id"]] == shapes[prev] and p["id"] != prev]
            if same:
                entry["parents"].append(str(rng.choice(same)))
        layers.append(entry)
        prev = lid
    return {"layers": layers}


def random_graph(seed, **kw) -> NetworkGraph:
    return parse_network(random_network(seed, **kw))


def random_tensors(g: NetworkGraph, seed: int | np.random.Generator):
    """(inputs, weights, seeds) for one training step of ``g``."""
    rng = np.random.default_rng(seed)
    inputs = {lid: rng.standard_normal(g.out_shapes[lid].as_tuple()) for lid in g.sources()}
    weights = {}
    for l in g.layers:
        ws = g.weight_shape(l.id)
        if ws is None:
            continue
        if len(ws) == 2:
            weights[l.id] = np.stack([rng.uniform(0.5, 1.5, ws[1]), rng.standard_normal(ws[1])])
        else:
            weights[l.id] = rng.standard_normal(ws)
    seeds = {lid: rng.standard_normal(g.out_shapes[lid].as_tuple()) for lid in g.sinks()}
    return inputs, weights, seeds


def valid_grids(g: NetworkGraph, lid: str, nranks: int) -> list[LayerDistribution]:
    out = []
    for d in sorted(grids(nranks), key=candidate_order):
        try:
            _check(g, lid, d)
        except DistributionError:
            continue
        out.append(d)
    return out


def verification_strategies(g: NetworkGraph, nranks: int, mixed: int = 0,
                            seed: int | np.random.Generator = 0) -> list[dict[str, LayerDistribution]]:
    """One strategy per grid (layers that cannot use it take their first valid grid) plus random mixes."""
    valid = {lid: valid_grids(g, lid, nranks) for lid in g.ids}
    empty = [lid for lid, v in valid.items() if not v]
    if empty:
        return []
    out: list[dict[str, LayerDistribution]] = []
    seen = set()
    for d in sorted(grids(nranks), key=candidate_order):
        s = {lid: d if d in v else v[0] for lid, v in valid.items()}
        key = tuple(s[lid].grid for lid in g.ids)
        if key not in seen:
            seen.add(key)
            out.append(s)
    rng = np.random.default_rng(seed)
    for _ in range(mixed):
        s = {lid: v[int(rng.integers(len(v)))] for lid, v in valid.items()}
        key = tuple(s[lid].grid for lid in g.ids)
        if key not in seen:
            seen.add(key)
            out.append(s)
    return out
