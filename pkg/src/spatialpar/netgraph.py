"""CNN description as a DAG of layers with resolved tensor shapes.

A network document is JSON with a top-level ``layers`` array::

    {"layers": [
        {"id": "data", "kind": "input", "parents": [], "n": 2, "c": 3, "h": 32, "w": 32},
        {"id": "conv1", "kind": "conv", "parents": ["data"],
         "filters": 8, "kernel": 3, "stride": 1, "padding": 1},
        {"id": "relu1", "kind": "relu", "parents": ["conv1"]}
    ]}

Layers with several parents receive the elementwise sum of their parents'
outputs (residual joins).
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

KINDS = (
    "input",
    "conv",
    "pool",
    "relu",
    "batchnorm-local",
    "batchnorm-spatial",
    "fc",
    "output",
)
BN_KINDS = ("batchnorm-local", "batchnorm-spatial")
# layers whose kernels read a spatial neighbourhood (need halos)
WINDOWED_KINDS = ("conv", "pool")


class NetworkError(ValueError):
    """Malformed network description."""


@dataclass(frozen=True)
class TensorShape:
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("n", "c", "h", "w"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise NetworkError(f"tensor extent {name}={v!r} must be a positive integer")

    @property
    def size(self) -> int:
        return self.n * self.c * self.h * self.w

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)


def _out_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    # ceil((H + 2P - K + 1) / S)
    return -(-(extent + 2 * padding - kernel + 1) // stride)


@dataclass(frozen=True)
class ConvParams:
    """Sliding-window geometry shared by convolution and pooling."""

    filters: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise NetworkError(
                f"bad window geometry kernel={self.kernel} stride={self.stride} padding={self.padding}"
            )
        if self.padding > self.halo:
            raise NetworkError(f"padding {self.padding} exceeds halo radius {self.halo}")

    @property
    def halo(self) -> int:
        """Halo radius O = floor(K/2)."""
        return self.kernel // 2

    def out_extent(self, extent: int) -> int:
        return _out_extent(extent, self.kernel, self.stride, self.padding)


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    parents: tuple[str, ...] = ()
    conv: ConvParams | None = None  # conv and pool geometry
    pool_mode: str = "max"
    features: int | None = None  # fc
    eps: float = 1e-5  # batch norm
    input_shape: TensorShape | None = None  # input layer

    @property
    def has_weights(self) -> bool:
        return self.kind == "conv" or self.kind in BN_KINDS

    @property
    def windowed(self) -> bool:
        return self.kind in WINDOWED_KINDS

    def to_dict(self) -> dict:
        d: dict = {"id": self.id, "kind": self.kind, "parents": list(self.parents)}
        if self.kind == "input":
            s = self.input_shape
            d.update(n=s.n, c=s.c, h=s.h, w=s.w)
        elif self.kind == "conv":
            p = self.conv
            d.update(filters=p.filters, kernel=p.kernel, stride=p.stride, padding=p.padding)
        elif self.kind == "pool":
            p = self.conv
            d.update(window=p.kernel, stride=p.stride, padding=p.padding, mode=self.pool_mode)
        elif self.kind == "fc":
            d["features"] = self.features
        elif self.kind in BN_KINDS:
            d["eps"] = self.eps
        return d


def _int_field(entry: Mapping, key: str, default=None) -> int:
    v = entry.get(key, default)
    if v is None:
        raise NetworkError(f"layer {entry.get('id')!r}: missing field {key!r}")
    if isinstance(v, bool) or not isinstance(v, int):
        raise NetworkError(f"layer {entry.get('id')!r}: field {key!r} must be an integer, got {v!r}")
    return v


def layer_from_dict(entry: Mapping) -> LayerSpec:
    if "id" not in entry or "kind" not in entry:
        raise NetworkError(f"layer entry needs 'id' and 'kind': {entry!r}")
    lid, kind = str(entry["id"]), entry["kind"]
    if kind not in KINDS:
        raise NetworkError(f"layer {lid!r}: unknown layer kind {kind!r}")
    parents = tuple(str(p) for p in entry.get("parents", ()))
    if kind == "input":
        if parents:
            raise NetworkError(f"input layer {lid!r} cannot have parents")
        shape = TensorShape(*(_int_field(entry, k) for k in "nchw"))
        return LayerSpec(lid, kind, parents, input_shape=shape)
    if not parents:
        raise NetworkError(f"layer {lid!r} has no parents")
    if kind == "conv":
        k = _int_field(entry, "kernel")
        if k % 2 == 0:
            raise NetworkError(f"layer {lid!r}: even kernel size {k} is not supported")
        conv = ConvParams(
            filters=_int_field(entry, "filters"),
            kernel=k,
            stride=_int_field(entry, "stride", 1),
            padding=_int_field(entry, "padding", k // 2),
        )
        if conv.filters < 1:
            raise NetworkError(f"layer {lid!r}: filters must be positive")
        return LayerSpec(lid, kind, parents, conv=conv)
    if kind == "pool":
        win = _int_field(entry, "window")
        mode = entry.get("mode", "max")
        if mode not in ("max", "avg"):
            raise NetworkError(f"layer {lid!r}: pool mode must be 'max' or 'avg'")
        conv = ConvParams(
            filters=0,
            kernel=win,
            stride=_int_field(entry, "stride", win),
            padding=_int_field(entry, "padding", 0),
        )
        return LayerSpec(lid, kind, parents, conv=conv, pool_mode=mode)
    if kind == "fc":
        feats = _int_field(entry, "features")
        if feats < 1:
            raise NetworkError(f"layer {lid!r}: features must be positive")
        return LayerSpec(lid, kind, parents, features=feats)
    if kind in BN_KINDS:
        eps = float(entry.get("eps", 1e-5))
        if eps < 0:
            raise NetworkError(f"layer {lid!r}: eps must be non-negative")
        return LayerSpec(lid, kind, parents, eps=eps)
    return LayerSpec(lid, kind, parents)


def _stable_toposort(layers: Sequence[LayerSpec]) -> list[LayerSpec]:
    index = {l.id: i for i, l in enumerate(layers)}
    indeg = [len(set(l.parents)) for l in layers]
    children: list[list[int]] = [[] for _ in layers]
    for i, l in enumerate(layers):
        for p in dict.fromkeys(l.parents):
            children[index[p]].append(i)
    ready = [i for i, d in enumerate(indeg) if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(layers[i])
        for c in children[i]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != len(layers):
        stuck = sorted(layers[i].id for i, d in enumerate(indeg) if d > 0)
        raise NetworkError(f"cycle detected among layers {stuck}")
    return order


@dataclass(frozen=True)
class NetworkGraph:
    """Validated network; ``layers`` is in deterministic topological order."""

    layers: tuple[LayerSpec, ...]
    in_shapes: Mapping[str, TensorShape | None]
    out_shapes: Mapping[str, TensorShape]
    declared: tuple[str, ...] = field(default=())

    @classmethod
    def from_layers(cls, layers: Sequence[LayerSpec]) -> "NetworkGraph":
        ids = [l.id for l in layers]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise NetworkError(f"duplicate layer ids {dup}")
        known = set(ids)
        for l in layers:
            for p in l.parents:
                if p not in known:
                    raise NetworkError(f"layer {l.id!r} references unknown parent {p!r}")
                if p == l.id:
                    raise NetworkError(f"cycle detected: layer {l.id!r} is its own parent")
        ordered = _stable_toposort(layers)
        in_shapes: dict[str, TensorShape | None] = {}
        out_shapes: dict[str, TensorShape] = {}
        for l in ordered:
            if l.kind == "input":
                in_shapes[l.id] = None
                out_shapes[l.id] = l.input_shape
                continue
            shapes = [out_shapes[p] for p in l.parents]
            first = shapes[0]
            for p, s in zip(l.parents[1:], shapes[1:]):
                if s != first:
                    raise NetworkError(
                        f"layer {l.id!r}: shape mismatch between parents "
                        f"{l.parents[0]!r} {first.as_tuple()} and {p!r} {s.as_tuple()}"
                    )
            in_shapes[l.id] = first
            out_shapes[l.id] = _resolve_output(l, first)
        return cls(tuple(ordered), in_shapes, out_shapes, tuple(ids))

    # -- lookup -------------------------------------------------------
    def __len__(self) -> int:
        return len(self.layers)

    def __iter__(self):
        return iter(self.layers)

    def layer(self, lid: str) -> LayerSpec:
        for l in self.layers:
            if l.id == lid:
                return l
        raise KeyError(lid)

    @property
    def ids(self) -> list[str]:
        return [l.id for l in self.layers]

    def children(self, lid: str) -> list[str]:
        return [l.id for l in self.layers if lid in l.parents]

    def sources(self) -> list[str]:
        return [l.id for l in self.layers if not l.parents]

    def sinks(self) -> list[str]:
        has_child = {p for l in self.layers for p in l.parents}
        return [l.id for l in self.layers if l.id not in has_child]

    def is_line(self) -> bool:
        return all(len(l.parents) <= 1 for l in self.layers) and all(
            len(self.children(l.id)) <= 1 for l in self.layers
        ) and len(self.sources()) == 1

    def edges(self) -> list[tuple[str, str]]:
        return [(p, l.id) for l in self.layers for p in dict.fromkeys(l.parents)]

    def weight_shape(self, lid: str) -> tuple[int, ...] | None:
        l = self.layer(lid)
        if l.kind == "conv":
            k = l.conv.kernel
            return (l.conv.filters, self.in_shapes[lid].c, k, k)
        if l.kind in BN_KINDS:
            return (2, self.in_shapes[lid].c)
        return None

    def flops(self, lid: str) -> float:
        """Multiply-accumulate count of one forward pass (0 for cheap layers)."""
        l = self.layer(lid)
        if l.kind == "conv":
            o = self.out_shapes[lid]
            return float(o.size) * self.in_shapes[lid].c * l.conv.kernel**2
        if l.kind == "fc":
            s = self.in_shapes[lid]
            return float(s.size) * l.features
        return 0.0

    # -- serialization ------------------------------------------------
    def to_dict(self) -> dict:
        by_id = {l.id: l for l in self.layers}
        return {"layers": [by_id[i].to_dict() for i in self.declared]}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    # -- path decomposition ------------------------------------------
    def longest_path_decomposition(self, weight: Mapping[str, float] | Callable[[str], float]):
        return longest_path_decomposition(self, weight)


def _resolve_output(l: LayerSpec, s: TensorShape) -> TensorShape:
    if l.kind in ("conv", "pool"):
        p = l.conv
        h, w = p.out_extent(s.h), p.out_extent(s.w)
        if h < 1 or w < 1:
            raise NetworkError(f"layer {l.id!r}: window {p.kernel} larger than padded input {s.h}x{s.w}")
        c = p.filters if l.kind == "conv" else s.c
        return TensorShape(s.n, c, h, w)
    if l.kind == "fc":
        return TensorShape(s.n, l.features, 1, 1)
    return s


def parse_network(doc: str | Mapping) -> NetworkGraph:
    """Parse and validate a network document (JSON text or decoded mapping)."""
    if isinstance(doc, str):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as e:
            raise NetworkError(f"network spec is not valid JSON: {e}") from None
    if not isinstance(doc, Mapping) or not isinstance(doc.get("layers"), list):
        raise NetworkError("network spec needs a top-level 'layers' array")
    if not doc["layers"]:
        raise NetworkError("network has no layers")
    return NetworkGraph.from_layers([layer_from_dict(e) for e in doc["layers"]])


def load_network(path) -> NetworkGraph:
    with open(path) as f:
        return parse_network(f.read())


def _better(a: tuple[float, int], b: tuple[float, int] | None) -> bool:
    return b is None or a > b


def longest_path_decomposition(
    g: NetworkGraph, weight: Mapping[str, float] | Callable[[str], float]
) -> list[list[str]]:
    """Cover the DAG with source-to-sink paths, heaviest first.

    Each round picks a source-to-sink path maximizing the total weight of
    layers not yet covered (covered layers count zero, and among equal
    weights fewer covered layers win). Every round covers at least one new
    layer. Ties resolve to the earlier layer in topological order.
    """
    wfun = weight if callable(weight) else weight.__getitem__
    order = g.ids
    w = {lid: float(wfun(lid)) for lid in order}
    if any(v < 0 for v in w.values()):
        raise ValueError("layer weights must be non-negative")
    parents = {l.id: list(dict.fromkeys(l.parents)) for l in g.layers}
    children = {lid: [] for lid in order}
    for lid in order:
        for p in parents[lid]:
            children[p].append(lid)

    covered: set[str] = set()
    paths: list[list[str]] = []
    while len(covered) < len(order):

        def score(lid):
            return (0.0, -1) if lid in covered else (w[lid], 0)

        # best source->v prefix, keyed (weight, -covered count)
        fwd: dict[str, tuple[float, int]] = {}
        fprev: dict[str, str | None] = {}
        for lid in order:
            best, arg = None, None
            for p in parents[lid]:
                if _better(fwd[p], best):
                    best, arg = fwd[p], p
            s = score(lid)
            base = best if best is not None else (0.0, 0)
            fwd[lid] = (base[0] + s[0], base[1] + s[1])
            fprev[lid] = arg
        # best v->sink suffix, excluding v itself
        bwd: dict[str, tuple[float, int]] = {}
        bnext: dict[str, str | None] = {}
        for lid in reversed(order):
            best, arg = None, None
            for c in children[lid]:
                cand = (bwd[c][0] + score(c)[0], bwd[c][1] + score(c)[1])
                if _better(cand, best):
                    best, arg = cand, c
            bwd[lid] = best if best is not None else (0.0, 0)
            bnext[lid] = arg

        pick, pick_key = None, None
        for lid in order:
            if lid in covered:
                continue
            key = (fwd[lid][0] + bwd[lid][0], fwd[lid][1] + bwd[lid][1])
            if _better(key, pick_key):
                pick, pick_key = lid, key
        path = []
        cur = pick
        while cur is not None:
            path.append(cur)
            cur = fprev[cur]
        path.reverse()
        cur = bnext[pick]
        while cur is not None:
            path.append(cur)
            cur = bnext[cur]
        covered.update(path)
        paths.append(path)
    return paths
