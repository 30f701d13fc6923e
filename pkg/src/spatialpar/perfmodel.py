"""Analytic cost and memory model for distributed CNN training steps.

Communication follows a two-level latency/bandwidth model: a message of
``n`` words between ranks ``r`` and ``q`` costs ``alpha + beta * n * word_bytes``,
with intra-node constants when ``r // node_size == q // node_size``.
Local convolution times come from an empirical :class:`CostTable`.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels as K
from .dist import (
    BlockedDim,
    LayerDistribution,
    ShufflePlan,
    bpx_needed,
    error_halo_spec,
    fp_needed,
    fp_step,
    halo_spec,
    owned_indices,
    shuffle_plan,
    strided_intersect,
    strided_len,
)
from .netgraph import BN_KINDS, ConvParams, NetworkGraph, TensorShape

COST_OPS = ("fp", "bp-data", "bp-filter", "fc")
CSV_HEADER = ["op", "n", "c", "h", "w", "f", "k", "s", "pad", "seconds"]


class MissingCostError(KeyError):
    def __init__(self, key):
        super().__init__(key)
        self.key = key

    def __str__(self):
        names = CSV_HEADER[:-1]
        return "no cost-table entry for " + ",".join(f"{n}={v}" for n, v in zip(names, self.key))


@dataclass(frozen=True)
class MachineModel:
    ranks: int
    node_size: int = 1
    alpha_intra: float = 0.0
    alpha_inter: float = 0.0
    beta_intra: float = 0.0
    beta_inter: float = 0.0
    word_bytes: int = 4

    def __post_init__(self):
        if self.ranks < 1 or self.node_size < 1 or self.word_bytes < 1:
            raise ValueError("ranks, node_size and word_bytes must be positive")
        for name in ("alpha_intra", "alpha_inter", "beta_intra", "beta_inter"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @classmethod
    def flat(cls, ranks: int, alpha: float, beta: float, word_bytes: int = 4) -> "MachineModel":
        return cls(ranks, ranks, alpha, alpha, beta, beta, word_bytes)

    def same_node(self, r: int, q: int) -> bool:
        return r // self.node_size == q // self.node_size

    def with_ranks(self, ranks: int) -> "MachineModel":
        return MachineModel(ranks, self.node_size, self.alpha_intra, self.alpha_inter,
                            self.beta_intra, self.beta_inter, self.word_bytes)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("ranks", "node_size", "alpha_intra", "alpha_inter", "beta_intra", "beta_inter", "word_bytes")}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MachineModel":
        try:
            return cls(
                ranks=int(d["ranks"]),
                node_size=int(d.get("node_size", d["ranks"])),
                alpha_intra=float(d["alpha_intra"]),
                alpha_inter=float(d.get("alpha_inter", d["alpha_intra"])),
                beta_intra=float(d["beta_intra"]),
                beta_inter=float(d.get("beta_inter", d["beta_intra"])),
                word_bytes=int(d.get("word_bytes", 4)),
            )
        except KeyError as e:
            raise ValueError(f"machine model missing field {e}") from None


def load_machine(path) -> MachineModel:
    with open(path) as f:
        return MachineModel.from_dict(json.load(f))


def sr_cost(m: MachineModel, n_words: float, intra: bool = True) -> float:
    """Send/receive of ``n_words`` between two ranks."""
    if n_words < 0:
        raise ValueError("message size must be non-negative")
    if intra:
        return m.alpha_intra + m.beta_intra * n_words * m.word_bytes
    return m.alpha_inter + m.beta_inter * n_words * m.word_bytes


def ar_cost(m: MachineModel, p: int, n_words: float, intra: bool | None = None) -> float:
    """Allreduce of ``n_words`` over ``p`` ranks: the cheaper of two classic algorithms.

    recursive doubling:      ceil(log2 p) * (alpha + n beta')
    ring / Rabenseifner:     2 (p - 1) alpha + 2 ((p - 1) / p) n beta'

    with beta' = beta * word_bytes.  Intra-node constants apply when the
    group fits in one node.
    """
    if p < 1 or n_words < 0:
        raise ValueError("allreduce needs p >= 1 and n >= 0")
    if p == 1:
        return 0.0
    if intra is None:
        intra = p <= m.node_size
    alpha = m.alpha_intra if intra else m.alpha_inter
    beta = (m.beta_intra if intra else m.beta_inter) * m.word_bytes
    doubling = math.ceil(math.log2(p)) * (alpha + n_words * beta)
    ring = 2 * (p - 1) * alpha + 2 * ((p - 1) / p) * n_words * beta
    return min(doubling, ring)


# -- cost tables ----------------------------------------------------------------


CostKey = tuple  # (op, n, c, h, w, f, k, s, pad)


@dataclass
class CostTable:
    """Measured local kernel times keyed by ``(op, n, c, h, w, f, k, s, pad)``."""

    entries: dict[CostKey, float] = field(default_factory=dict)

    def add(self, op, n, c, h, w, f, k, s, pad, seconds) -> None:
        if op not in COST_OPS:
            raise ValueError(f"unknown cost op {op!r}")
        if not seconds > 0:
            raise ValueError(f"cost-table times must be positive, got {seconds}")
        self.entries[(op, int(n), int(c), int(h), int(w), int(f), int(k), int(s), int(pad))] = float(seconds)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return tuple(key) in self.entries

    def lookup(self, key: CostKey, interpolate: bool = False) -> float:
        key = tuple(key)
        if key in self.entries:
            return self.entries[key]
        if interpolate:
            est = self._interpolate(key)
            if est is not None:
                return est
        raise MissingCostError(key)

    def _interpolate(self, key) -> float | None:
        # Approximation: fit log t = a + b log(n h w) over entries that agree
        # on everything except (n, h, w).
        op, n, c, h, w, f, k, s, pad = key
        pts = [
            (kk[1] * kk[3] * kk[4], t)
            for kk, t in self.entries.items()
            if (kk[0], kk[2], kk[5], kk[6], kk[7], kk[8]) == (op, c, f, k, s, pad)
        ]
        if not pts:
            return None
        work = n * h * w
        xs = np.log([p[0] for p in pts])
        ys = np.log([p[1] for p in pts])
        if len(set(xs.tolist())) < 2:
            w0, t0 = min(pts, key=lambda p: abs(math.log(p[0]) - math.log(work)))
            return t0 * work / w0
        slope, icept = np.polyfit(xs, ys, 1)
        return float(np.exp(icept + slope * math.log(work)))

    def to_csv(self) -> str:
        lines = [",".join(CSV_HEADER)]
        for key in sorted(self.entries):
            lines.append(",".join(str(v) for v in key) + f",{self.entries[key]!r}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "CostTable":
        rows = list(csv.reader(line for line in text.splitlines() if line.strip()))
        if not rows or [h.strip() for h in rows[0]] != CSV_HEADER:
            raise ValueError(f"cost table header must be {','.join(CSV_HEADER)}")
        t = cls()
        for i, row in enumerate(rows[1:], start=2):
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"cost table line {i}: expected {len(CSV_HEADER)} fields")
            t.add(row[0].strip(), *(int(v) for v in row[1:9]), float(row[9]))
        return t


def load_cost_table(path) -> CostTable:
    with open(path) as f:
        return CostTable.from_csv(f.read())


# -- per-layer cost --------------------------------------------------------------


@dataclass(frozen=True)
class LayerCost:
    """Seconds per phase plus communicated bytes (summed over all ranks)."""

    fp: float = 0.0
    bp_data: float = 0.0
    bp_weights: float = 0.0
    bp_allreduce: float = 0.0
    fp_compute: float = 0.0
    bp_data_compute: float = 0.0
    fp_halo: float = 0.0
    bp_halo: float = 0.0
    exposed_fp: float = 0.0
    exposed_bp: float = 0.0
    bytes: Mapping[str, int] = field(default_factory=dict)

    @property
    def total(self) -> float:
        """FP + BPx + BPw + BPa without any overlap."""
        return self.fp + self.bp_data + self.bp_weights + self.bp_allreduce

    @property
    def exposed_total(self) -> float:
        return self.exposed_fp + self.exposed_bp + self.bp_allreduce

    @property
    def bp_first(self) -> float:
        """Backward work before the weight gradient is ready (BPw with the dL/dy halo hidden under it)."""
        return self.exposed_bp - self.bp_data_compute

    def to_dict(self) -> dict:
        return {
            "fp": self.fp,
            "bp_data": self.bp_data,
            "bp_weights": self.bp_weights,
            "bp_allreduce": self.bp_allreduce,
            "exposed_fp": self.exposed_fp,
            "exposed_bp": self.exposed_bp,
            "exposed_total": self.exposed_total,
            "bytes": dict(self.bytes),
        }


def local_extents(d: LayerDistribution, shape: TensorShape) -> tuple[int, int, int]:
    """Largest local (n, h, w) block; with remainders on the first blocks this is rank 0's."""
    (n0, n1), (h0, h1), (w0, w1) = owned_indices(d, 0, shape)
    return (n1 - n0, h1 - h0, w1 - w0)


def conv_cost_key(op: str, d: LayerDistribution, conv: ConvParams, in_shape: TensorShape) -> CostKey:
    n, h, w = local_extents(d, in_shape)
    return (op, n, in_shape.c, h, w, conv.filters, conv.kernel, conv.stride, conv.padding)


def fc_cost_key(g: NetworkGraph, lid: str) -> CostKey:
    s = g.in_shapes[lid]
    return ("fc", s.n, s.c * s.h * s.w, 1, 1, g.layer(lid).features, 1, 1, 0)


def _halo_sum(own: BlockedDim, partner: BlockedDim, needed_fn, step: int = 1) -> tuple[int, int]:
    """(sum of needed lengths, sum of needed-and-owned lengths) along one axis."""
    need = inside = 0
    for i in range(own.parts):
        lo, hi = needed_fn(partner.block(i))
        need += strided_len((lo, hi), step)
        both = strided_intersect((lo, hi), step, own.block(i))
        if both is not None:
            inside += strided_len(both, step)
    return need, inside


def halo_elements(d: LayerDistribution, conv: ConvParams, in_shape: TensorShape, out_shape: TensorShape, phase: str) -> int:
    """Total halo elements received by all ranks in one exchange.

    Per rank the halo is (needed rows x needed cols) minus the owned part of
    that window; both factors sum independently over the grid, which gives
    N C (sum Nh * sum Nw - sum Ih * sum Iw).
    """
    _, ih, iw = d.dims(in_shape)
    _, oh, ow = d.dims(out_shape)
    if phase == "fp":
        src = in_shape
        step = fp_step(conv)
        rows = _halo_sum(ih, oh, lambda b: fp_needed(b, conv, in_shape.h), step)
        cols = _halo_sum(iw, ow, lambda b: fp_needed(b, conv, in_shape.w), step)
    elif phase == "bp-data":
        src = out_shape
        rows = _halo_sum(oh, ih, lambda b: bpx_needed(b, conv, out_shape.h))
        cols = _halo_sum(ow, iw, lambda b: bpx_needed(b, conv, out_shape.w))
    else:
        raise ValueError(phase)
    return src.n * src.c * (rows[0] * cols[0] - rows[1] * cols[1])


def _category_intra(m: MachineModel, d: LayerDistribution, offsets) -> bool:
    for r in range(d.nranks):
        i_n, i_h, i_w = d.coords(r)
        for oh, ow in offsets:
            j_h, j_w = i_h + oh, i_w + ow
            if 0 <= j_h < d.h_parts and 0 <= j_w < d.w_parts:
                if not m.same_node(r, d.rank_of(i_n, j_h, j_w)):
                    return False
    return True


def halo_time(m: MachineModel, d: LayerDistribution, halo: int, n: int, c: int, h: int, w: int) -> float:
    """2 SR(O n c h) + 2 SR(O n c w) + 4 SR(O^2 n c), dropping undivided directions."""
    if halo == 0:
        return 0.0
    t = 0.0
    if d.w_parts > 1:
        t += 2 * sr_cost(m, halo * n * c * h, _category_intra(m, d, [(0, -1), (0, 1)]))
    if d.h_parts > 1:
        t += 2 * sr_cost(m, halo * n * c * w, _category_intra(m, d, [(-1, 0), (1, 0)]))
    if d.w_parts > 1 and d.h_parts > 1:
        t += 4 * sr_cost(m, halo * halo * n * c, _category_intra(m, d, [(-1, -1), (-1, 1), (1, -1), (1, 1)]))
    return t


def layer_bytes(g: NetworkGraph, lid: str, d: LayerDistribution, word_bytes: int) -> dict[str, int]:
    """Halo bytes summed over ranks; pooling sends its backward halo back to the owners."""
    l = g.layer(lid)
    if not l.windowed:
        return {}
    in_shape, out_shape = g.in_shapes[lid], g.out_shapes[lid]
    fp = halo_elements(d, l.conv, in_shape, out_shape, "fp") * word_bytes
    if l.kind == "pool":
        return {"halo_fp": fp, "halo_bp": fp}
    return {"halo_fp": fp, "halo_bp": halo_elements(d, l.conv, in_shape, out_shape, "bp-data") * word_bytes}


def layer_cost(
    g: NetworkGraph,
    lid: str,
    d: LayerDistribution,
    m: MachineModel,
    t: CostTable | None,
    interpolate: bool = False,
) -> LayerCost:
    """Cost of one layer under ``d``; cheap layers are free apart from collectives."""
    l = g.layer(lid)
    in_shape, out_shape = g.in_shapes[lid], g.out_shapes[lid]
    wb = m.word_bytes
    if l.kind == "conv":
        conv = l.conv
        ln, lh, lw = local_extents(d, in_shape)
        _, oh, ow = local_extents(d, out_shape)
        if t is None:
            raise MissingCostError(conv_cost_key("fp", d, conv, in_shape))
        c_fp = t.lookup(conv_cost_key("fp", d, conv, in_shape), interpolate)
        c_bx = t.lookup(conv_cost_key("bp-data", d, conv, in_shape), interpolate)
        c_bw = t.lookup(conv_cost_key("bp-filter", d, conv, in_shape), interpolate)
        h_fp = halo_time(m, d, conv.halo, ln, in_shape.c, lh, lw)
        h_bx = halo_time(m, d, conv.halo, ln, out_shape.c, oh, ow)
        ar = ar_cost(m, d.nranks, conv.filters * in_shape.c * conv.kernel**2)
        return LayerCost(
            fp=c_fp + h_fp,
            bp_data=c_bx + h_bx,
            bp_weights=c_bw,
            bp_allreduce=ar,
            fp_compute=c_fp,
            bp_data_compute=c_bx,
            fp_halo=h_fp,
            bp_halo=h_bx,
            exposed_fp=max(c_fp, h_fp),
            exposed_bp=c_bx + max(c_bw, h_bx),
            bytes=layer_bytes(g, lid, d, wb),
        )
    if l.kind == "pool":
        # priced as free; bytes still reported for cross-checks
        return LayerCost(bytes=layer_bytes(g, lid, d, wb))
    if l.kind in BN_KINDS:
        c = in_shape.c
        ar = ar_cost(m, d.nranks, 2 * c)
        fp = bp = 0.0
        if l.kind == "batchnorm-spatial":
            grp = d.h_parts * d.w_parts
            fp = ar_cost(m, grp, 2 * c + 1)
            bp = ar_cost(m, grp, 2 * c)
        return LayerCost(fp=fp, bp_data=bp, bp_allreduce=ar, fp_compute=fp, bp_data_compute=bp,
                         exposed_fp=fp, exposed_bp=bp)
    if l.kind == "fc":
        if t is None:
            raise MissingCostError(fc_cost_key(g, lid))
        sec = t.lookup(fc_cost_key(g, lid), interpolate)
        return LayerCost(fp=sec, fp_compute=sec, exposed_fp=sec)
    return LayerCost()


# -- redistribution ----------------------------------------------------------------


def shuffle_cost(plan: ShufflePlan, m: MachineModel) -> float:
    """Pairwise-exchange all-to-all: the slowest rank's sum of its sends."""
    if plan.is_empty():
        return 0.0
    per_rank: dict[int, float] = {}
    for (s, dst), vol in sorted(plan.pair_volumes().items()):
        per_rank[s] = per_rank.get(s, 0.0) + sr_cost(m, vol, m.same_node(s, dst))
    return max(per_rank.values())


@dataclass(frozen=True)
class EdgeShuffle:
    src: str
    dst: str
    fp: float
    bp: float
    fp_bytes: int
    bp_bytes: int

    @property
    def total(self) -> float:
        return self.fp + self.bp


def edge_shuffle(g: NetworkGraph, parent: str, child: str, dp: LayerDistribution, dc: LayerDistribution,
                 m: MachineModel) -> EdgeShuffle:
    """Forward move of the parent's y plus backward move of the child's dL/dx."""
    if dp == dc:
        return EdgeShuffle(parent, child, 0.0, 0.0, 0, 0)
    shape = g.out_shapes[parent]
    fwd, bwd = shuffle_plan(dp, dc, shape), shuffle_plan(dc, dp, shape)
    wb = m.word_bytes
    return EdgeShuffle(parent, child, shuffle_cost(fwd, m), shuffle_cost(bwd, m),
                       fwd.moved_elements * wb, bwd.moved_elements * wb)


# -- whole network -----------------------------------------------------------------


def overlap_allreduces(segments: Sequence[tuple[float, float, float]]) -> tuple[float, float]:
    """Backward timeline with one allreduce in flight at a time.

    ``segments`` lists, in backward order, (work before the gradient is
    ready, allreduce time, work after it).  Each allreduce starts when its
    gradient is ready and the previous allreduce has finished, and overlaps
    any later compute.  Returns (compute end, last allreduce end).
    """
    t = 0.0
    ar_end = 0.0
    for before, ar, after in segments:
        t += before
        if ar > 0:
            ar_end = max(t, ar_end) + ar
        t += after
    return t, ar_end


@dataclass
class NetworkCost:
    total: float
    compute: float
    shuffle: float
    allreduce_exposed: float
    layers: dict[str, LayerCost]
    shuffles: list[EdgeShuffle]

    def category_bytes(self) -> dict[str, dict[str, int]]:
        """Halo and shuffle bytes per layer, shuffles booked on the consuming layer."""
        return _merge_bytes({lid: lc.bytes for lid, lc in self.layers.items()}, self.shuffles)

    def breakdown(self) -> dict:
        return {
            "total": self.total,
            "compute": self.compute,
            "shuffle": self.shuffle,
            "allreduce_exposed": self.allreduce_exposed,
            "layers": {k: v.to_dict() for k, v in self.layers.items()},
            "shuffles": [
                {"from": s.src, "to": s.dst, "fp": s.fp, "bp": s.bp, "fp_bytes": s.fp_bytes, "bp_bytes": s.bp_bytes}
                for s in self.shuffles
            ],
        }


def _merge_bytes(halos: Mapping[str, Mapping[str, int]], shuffles: Iterable[EdgeShuffle]) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    for lid, row in halos.items():
        for cat, v in row.items():
            if v:
                out.setdefault(lid, {})[cat] = v
    for s in shuffles:
        for cat, v in (("shuffle_fp", s.fp_bytes), ("shuffle_bp", s.bp_bytes)):
            if v:
                row = out.setdefault(s.dst, {})
                row[cat] = row.get(cat, 0) + v
    return out


def traffic_bytes(g: NetworkGraph, strategy, word_bytes: int) -> dict[str, dict[str, int]]:
    """Halo and shuffle volumes of one training step, without pricing anything."""
    assign = getattr(strategy, "assignment", strategy)
    m = MachineModel(1, word_bytes=word_bytes)
    halos = {l.id: layer_bytes(g, l.id, assign[l.id], word_bytes) for l in g.layers}
    return _merge_bytes(halos, [edge_shuffle(g, p, c, assign[p], assign[c], m) for p, c in g.edges()])


def network_cost(g: NetworkGraph, strategy, m: MachineModel, t: CostTable | None, interpolate: bool = False) -> NetworkCost:
    assign = getattr(strategy, "assignment", strategy)
    missing = [l.id for l in g.layers if l.id not in assign]
    if missing:
        raise ValueError(f"strategy does not cover layers {missing}")
    layers = {l.id: layer_cost(g, l.id, assign[l.id], m, t, interpolate) for l in g.layers}
    shuffles = [edge_shuffle(g, p, c, assign[p], assign[c], m) for p, c in g.edges()]
    fwd_compute = sum(lc.exposed_fp for lc in layers.values())
    fwd_shuffle = sum(s.fp for s in shuffles)
    bwd_in = {l.id: 0.0 for l in g.layers}
    for s in shuffles:
        bwd_in[s.src] += s.bp
    segments = []
    for l in reversed(g.layers):
        lc = layers[l.id]
        segments.append((bwd_in[l.id] + lc.bp_first, lc.bp_allreduce, lc.bp_data_compute))
    t_end, ar_end = overlap_allreduces(segments)
    bwd_shuffle = sum(s.bp for s in shuffles)
    bwd_compute = t_end - bwd_shuffle
    exposed = max(0.0, ar_end - t_end)
    compute = fwd_compute + bwd_compute
    shuffle = fwd_shuffle + bwd_shuffle
    return NetworkCost(compute + shuffle + exposed, compute, shuffle, exposed, layers, shuffles)


# -- memory --------------------------------------------------------------------------


@dataclass
class MemoryEstimate:
    """Bytes per rank, per layer and tensor (x, y, dx, dy, halo, w, dw)."""

    word_bytes: int
    per_layer: dict[str, list[dict[str, int]]]  # layer -> [rank] -> tensor -> bytes

    @property
    def nranks(self) -> int:
        return len(next(iter(self.per_layer.values())))

    def rank_total(self, rank: int) -> int:
        return sum(sum(v[rank].values()) for v in self.per_layer.values())

    @property
    def per_rank(self) -> list[int]:
        return [self.rank_total(r) for r in range(self.nranks)]

    @property
    def max_rank_bytes(self) -> int:
        return max(self.per_rank)

    def layer_bytes(self, lid: str, rank: int | None = None) -> int:
        rows = self.per_layer[lid]
        if rank is None:
            return max(sum(r.values()) for r in rows)
        return sum(rows[rank].values())

    def tensor_bytes(self, lid: str, tensor: str, rank: int = 0) -> int:
        return self.per_layer[lid][rank].get(tensor, 0)


def _local_elems(d: LayerDistribution, rank: int, shape: TensorShape) -> int:
    (n0, n1), (h0, h1), (w0, w1) = owned_indices(d, rank, shape)
    return (n1 - n0) * shape.c * (h1 - h0) * (w1 - w0)


def layer_memory(g: NetworkGraph, lid: str, d: LayerDistribution, word_bytes: int) -> list[dict[str, int]]:
    l = g.layer(lid)
    out_shape, in_shape = g.out_shapes[lid], g.in_shapes[lid]
    rows = []
    fp_specs = bp_specs = None
    if l.windowed:
        fp_specs = halo_spec(d, l.conv, in_shape, out_shape)
        if l.kind == "conv":
            bp_specs = error_halo_spec(d, l.conv, in_shape, out_shape)
    wshape = g.weight_shape(lid)
    wsize = int(np.prod(wshape)) if wshape else 0
    for r in range(d.nranks):
        row = {"y": _local_elems(d, r, out_shape)}
        if l.kind != "input":
            row["x"] = row["dx"] = _local_elems(d, r, in_shape)
            row["dy"] = row["y"]
            halo = 0
            if fp_specs is not None:
                halo += fp_specs[r].recv_count * in_shape.c
                if bp_specs is not None:
                    halo += bp_specs[r].recv_count * out_shape.c
                else:
                    halo += fp_specs[r].send_count * in_shape.c
            row["halo"] = halo
            if wsize:
                row["w"] = row["dw"] = wsize
        rows.append({k: v * word_bytes for k, v in row.items()})
    return rows


def memory_estimate(g: NetworkGraph, strategy, word_bytes: int = 4) -> MemoryEstimate:
    """Per-rank training memory: activations, error signals, halo buffers and replicated weights.

    The input layer holds only its output; gradients with respect to the
    data are not kept for training.
    """
    assign = getattr(strategy, "assignment", strategy)
    return MemoryEstimate(word_bytes, {l.id: layer_memory(g, l.id, assign[l.id], word_bytes) for l in g.layers})


def key_flops(key: CostKey) -> float:
    """Multiply-adds x 2 for the local kernel a cost-table key describes."""
    op, n, c, h, w, f, k, s, pad = key
    if op == "fc":
        return 2.0 * n * c * f
    oh = -(-(h + 2 * pad - k + 1) // s)
    ow = -(-(w + 2 * pad - k + 1) // s)
    return 2.0 * n * f * c * k * k * max(oh, 0) * max(ow, 0)


def synthetic_cost_table(keys: Iterable[CostKey], seconds_per_flop: float, overhead: float = 0.0) -> CostTable:
    """Cost table from a flop rate plus a fixed per-call overhead, for planning experiments."""
    t = CostTable()
    for key in keys:
        t.add(*key, overhead + seconds_per_flop * key_flops(key) or seconds_per_flop)
    return t


# -- kernel benchmarks ---------------------------------------------------------------


@dataclass(frozen=True, order=True)
class ConvShape:
    n: int
    c: int
    h: int
    w: int
    f: int
    k: int
    s: int = 1
    pad: int = 0

    @property
    def conv(self) -> ConvParams:
        return ConvParams(self.f, self.k, self.s, self.pad)


def read_shapes(text: str) -> list[ConvShape]:
    """CSV with header ``n,c,h,w,f,k,s,pad``."""
    rows = list(csv.reader(line for line in text.splitlines() if line.strip()))
    header = [h.strip() for h in rows[0]] if rows else []
    if header != ["n", "c", "h", "w", "f", "k", "s", "pad"]:
        raise ValueError("shapes file header must be n,c,h,w,f,k,s,pad")
    return [ConvShape(*(int(v) for v in row)) for row in rows[1:]]


def write_shapes(shapes: Iterable[ConvShape]) -> str:
    lines = ["n,c,h,w,f,k,s,pad"]
    lines += [f"{s.n},{s.c},{s.h},{s.w},{s.f},{s.k},{s.s},{s.pad}" for s in shapes]
    return "\n".join(lines) + "\n"


def time_kernel(fn, repetitions: int = 10, warmup: int = 3, batches: int = 3) -> float:
    """Mean wall time of ``repetitions`` calls after ``warmup`` untimed ones.

    The mean is taken ``batches`` times and the smallest is returned, which
    discards batches slowed down by other work on the host.
    """
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(batches):
        samples = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        best = min(best, float(np.mean(samples)))
    return best


def benchgen(shapes: Iterable[ConvShape], repetitions: int = 10, warmup: int = 3, seed: int = 0,
             batches: int = 3) -> CostTable:
    """Time the reference kernels for every shape and op."""
    if warmup < 3 or repetitions < 1:
        raise ValueError("benchgen needs at least 3 warmup runs and 1 timed run")
    rng = np.random.default_rng(seed)
    table = CostTable()
    for s in sorted(set(shapes)):
        conv = s.conv
        x = rng.standard_normal((s.n, s.c, s.h, s.w))
        w = rng.standard_normal((s.f, s.c, s.k, s.k))
        dy = rng.standard_normal((s.n, s.f, conv.out_extent(s.h), conv.out_extent(s.w)))
        key = (s.n, s.c, s.h, s.w, s.f, s.k, s.s, s.pad)
        table.add("fp", *key, time_kernel(lambda: K.conv_fp(x, w, conv), repetitions, warmup, batches))
        table.add("bp-data", *key, time_kernel(lambda: K.conv_bp_data(dy, w, conv, (s.h, s.w)), repetitions, warmup, batches))
        table.add("bp-filter", *key, time_kernel(lambda: K.conv_bp_weights(x, dy, conv), repetitions, warmup, batches))
    return table
