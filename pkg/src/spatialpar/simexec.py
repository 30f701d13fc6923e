"""Deterministic virtual-rank executor for one training step.

Every rank is a generator that runs the same program on its own shards.  It
sends without blocking and suspends on a receive until the matching message
is in its mailbox.  The scheduler resumes ranks in rank order, one round at a
time, until all of them finish; a round in which no rank makes progress is a
deadlock.  Channels ``(src, dst, tag, layer, phase, direction)`` are FIFO;
halo directions are named from the sender's side.

Nothing is shared between ranks except read-only weights; payloads are
copied on send.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import kernels as K
from .dist import (
    Box,
    DistributionError,
    LayerDistribution,
    strided_len,
    check_covers,
    error_halo_spec,
    fp_window,
    halo_spec,
    owned_indices,
    shuffle_plan,
    validate_windowed,
)
from .netgraph import BN_KINDS, NetworkGraph, TensorShape


class SimulationError(RuntimeError):
    """Executor failure: bad strategy, size mismatch or deadlock."""


# -- messages and the event log -----------------------------------------


@dataclass(frozen=True)
class Message:
    tag: str  # halo | halo-acc | shuffle | reduce | bcast
    src: int
    dst: int
    layer: str
    phase: str  # fp | bp-data | bp-weights
    direction: str
    payload: np.ndarray

    @property
    def channel(self):
        return (self.src, self.dst, self.tag, self.layer, self.phase, self.direction)


@dataclass(frozen=True)
class Event:
    step: int
    rank: int
    action: str  # send | recv | compute
    layer: str
    direction: str
    nbytes: int
    tag: str = ""
    phase: str = ""
    reads: tuple[str, ...] = ()

    @property
    def label(self) -> str:
        return ":".join(x for x in (self.action, self.tag, self.phase) if x)


class EventLog:
    """Append-only record of sends, receives and local kernel launches."""

    def __init__(self):
        self._events: list[Event] = []

    def append(self, ev: Event) -> None:
        self._events.append(ev)

    def __iter__(self):
        return iter(self._events)

    def __len__(self):
        return len(self._events)

    @property
    def events(self) -> tuple[Event, ...]:
        return tuple(self._events)

    def select(self, **kw) -> list[Event]:
        return [e for e in self._events if all(getattr(e, k) == v for k, v in kw.items())]

    def bytes(self, action="send", **kw) -> int:
        return sum(e.nbytes for e in self.select(action=action, **kw))

    def category_bytes(self) -> dict[str, dict[str, int]]:
        """Sent bytes per layer split into halo_fp, halo_bp, shuffle_fp, shuffle_bp and collective.

        Shuffles are booked on the consuming layer of the edge.
        """
        out: dict[str, dict[str, int]] = {}
        for e in self._events:
            if e.action != "send":
                continue
            if e.tag == "halo" and e.phase == "fp":
                cat = "halo_fp"
            elif e.tag in ("halo", "halo-acc"):
                cat = "halo_bp"
            elif e.tag == "shuffle":
                cat = "shuffle_fp" if e.phase == "fp" else "shuffle_bp"
            else:
                cat = "collective"
            row = out.setdefault(e.layer, {})
            row[cat] = row.get(cat, 0) + e.nbytes
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "rank", "action", "layer", "direction", "bytes"])
        for e in self._events:
            w.writerow([e.step, e.rank, e.label, e.layer, e.direction, e.nbytes])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.to_csv())


@dataclass(frozen=True)
class _Recv:
    src: int
    tag: str
    layer: str
    phase: str
    direction: str
    shape: tuple[int, ...]


class Fabric:
    def __init__(self, nranks: int, log: EventLog):
        self.nranks = nranks
        self.log = log
        self.step = 0
        self._queues: dict[tuple, deque] = defaultdict(deque)

    def send(self, src, dst, tag, layer, phase, direction, payload) -> None:
        if not 0 <= dst < self.nranks:
            raise SimulationError(f"rank {src} sent to nonexistent rank {dst}")
        msg = Message(tag, src, dst, layer, phase, direction, np.array(payload, dtype=np.float64))
        self._queues[msg.channel].append(msg)
        self.log.append(Event(self.step, src, "send", layer, direction, msg.payload.nbytes, tag, phase))

    def try_recv(self, dst: int, req: _Recv) -> np.ndarray | None:
        q = self._queues.get((req.src, dst, req.tag, req.layer, req.phase, req.direction))
        if not q:
            return None
        msg = q.popleft()
        if msg.payload.shape != req.shape:
            raise SimulationError(
                f"rank {dst} expected {req.tag} payload of shape {req.shape} from rank {req.src} "
                f"(layer {req.layer!r}, {req.phase}, {req.direction}) but got {msg.payload.shape}; "
                "index sets of sender and receiver disagree"
            )
        self.log.append(Event(self.step, dst, "recv", req.layer, req.direction, msg.payload.nbytes, req.tag, req.phase))
        return msg.payload

    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())


def run_programs(programs: Mapping[int, Iterable], fabric: Fabric) -> dict[int, object]:
    """Drive rank generators to completion; returns each generator's return value."""
    results: dict[int, object] = {}
    waiting: dict[int, tuple] = {}
    for r in sorted(programs):
        gen = iter(programs[r])
        try:
            waiting[r] = (gen, next(gen))
        except StopIteration as stop:
            results[r] = stop.value
    while waiting:
        fabric.step += 1
        progressed = False
        for r in sorted(waiting):
            gen, req = waiting[r]
            while True:
                payload = fabric.try_recv(r, req)
                if payload is None:
                    waiting[r] = (gen, req)
                    break
                progressed = True
                try:
                    req = gen.send(payload)
                except StopIteration as stop:
                    results[r] = stop.value
                    del waiting[r]
                    break
        if not progressed:
            blocked = {r: (w[1].tag, w[1].src, w[1].layer, w[1].phase) for r, w in waiting.items()}
            raise SimulationError(f"deadlock: ranks blocked on {blocked}")
    if fabric.pending():
        raise SimulationError(f"{fabric.pending()} messages were never received")
    return results


# -- shard helpers ------------------------------------------------------------


def _slices(owner: Box, box: Box, step=(1, 1)):
    return tuple(slice(b[0] - o[0], b[1] - o[0], st) for o, b, st in zip(owner, box, (1, *step)))


def take(arr: np.ndarray, owner: Box, box: Box, step=(1, 1)) -> np.ndarray:
    """Sub-array of a local shard covering the global ``box`` (h, w walked with ``step``)."""
    sn, sh, sw = _slices(owner, box, step)
    return arr[sn, :, sh, sw]


def put(arr: np.ndarray, owner: Box, box: Box, values: np.ndarray, step=(1, 1)) -> None:
    sn, sh, sw = _slices(owner, box, step)
    arr[sn, :, sh, sw] = values


def _box_shape(box: Box, channels: int, step=(1, 1)) -> tuple[int, int, int, int]:
    (n0, n1), h, w = box
    return (n1 - n0, channels, strided_len(h, step[0]), strided_len(w, step[1]))


def scatter(tensor: np.ndarray, dist: LayerDistribution) -> dict[int, np.ndarray]:
    """Split a global NCHW tensor into per-rank shards."""
    shape = TensorShape(*tensor.shape)
    check_covers(dist, shape)
    full = ((0, shape.n), (0, shape.h), (0, shape.w))
    return {r: take(tensor, full, owned_indices(dist, r, shape)).copy() for r in range(dist.nranks)}


def gather_global(shards: Mapping[int, np.ndarray], dist: LayerDistribution, shape: TensorShape) -> np.ndarray:
    """Reassemble shards into the global tensor (inverse of :func:`scatter`)."""
    missing = [r for r in range(dist.nranks) if r not in shards]
    if missing:
        raise SimulationError(f"coverage gap: no shard for ranks {missing}")
    out = np.empty(shape.as_tuple())
    full = ((0, shape.n), (0, shape.h), (0, shape.w))
    for r in range(dist.nranks):
        box = owned_indices(dist, r, shape)
        want = _box_shape(box, shape.c)
        if shards[r].shape != want:
            raise SimulationError(f"shard of rank {r} has shape {shards[r].shape}, expected {want}")
        put(out, full, box, shards[r])
    return out


# -- collectives -------------------------------------------------------------


def _allreduce(fab: Fabric, rank: int, group: Sequence[int], payload, layer: str, phase: str):
    """Reduce to the lowest rank in rank order, then broadcast. Generator."""
    group = sorted(group)
    if rank not in group:
        raise SimulationError(f"rank {rank} is not a member of allreduce group {group}")
    if len(group) == 1:
        return payload
    payload = np.asarray(payload, dtype=np.float64)
    root = group[0]
    if rank != root:
        fab.send(rank, root, "reduce", layer, phase, "", payload)
        return (yield _Recv(root, "bcast", layer, phase, "", payload.shape))
    acc = payload
    for r in group[1:]:
        part = yield _Recv(r, "reduce", layer, phase, "", payload.shape)
        acc = acc + part
    for r in group[1:]:
        fab.send(root, r, "bcast", layer, phase, "", acc)
    return acc


def allreduce(payloads: Sequence, group: Sequence[int] | None = None, log: EventLog | None = None):
    """Sum ``payloads[r]`` over ``group`` (default: all); returns every member's result."""
    group = list(range(len(payloads))) if group is None else sorted(group)
    lengths = {np.shape(payloads[r]) for r in group}
    if len(lengths) != 1:
        raise SimulationError(f"allreduce payload length mismatch: {sorted(lengths)}")
    fab = Fabric(len(payloads), log if log is not None else EventLog())
    progs = {r: _allreduce(fab, r, group, np.asarray(payloads[r], dtype=np.float64), "", "") for r in group}
    out = run_programs(progs, fab)
    return [out[r] for r in group]


def bn_groups(dist: LayerDistribution, spatial: bool) -> list[list[int]]:
    """Rank groups sharing batch-norm statistics."""
    if not spatial:
        return [[r] for r in range(dist.nranks)]
    per = dist.h_parts * dist.w_parts
    return [list(range(i * per, (i + 1) * per)) for i in range(dist.n_parts)]


def bn_spatial_aggregate(
    shards: Mapping[int, np.ndarray], dist: LayerDistribution, group: Sequence[int] | None = None
):
    """Per-channel mean/variance over the spatial shards of one sample block.

    ``group`` must be exactly the ranks sharing an N block.
    """
    ranks = sorted(shards) if group is None else sorted(group)
    groups = bn_groups(dist, spatial=True)
    if ranks not in groups:
        raise SimulationError(f"group {ranks} does not match a sample block of {dist}")
    fab = Fabric(dist.nranks, EventLog())

    def prog(r):
        s, sq, cnt = K.bn_partial_sums(shards[r])
        tot = yield from _allreduce(fab, r, ranks, np.concatenate([s, sq, [cnt]]), "", "fp")
        c = s.shape[0]
        return K.bn_stats(tot[:c], tot[c : 2 * c], tot[2 * c])

    out = run_programs({r: prog(r) for r in ranks}, fab)
    return out[ranks[0]]


# -- the training step ---------------------------------------------------------


def _assignment(strategy) -> dict[str, LayerDistribution]:
    a = getattr(strategy, "assignment", strategy)
    return {k: (v if isinstance(v, LayerDistribution) else LayerDistribution.from_dict(v)) for k, v in a.items()}


def validate_strategy(g: NetworkGraph, strategy, execute: bool = True) -> dict[str, LayerDistribution]:
    assign = _assignment(strategy)
    missing = [l.id for l in g.layers if l.id not in assign]
    if missing:
        raise SimulationError(f"undistributed layers: {missing}")
    nr = {d.nranks for d in assign.values()}
    if len(nr) != 1:
        raise SimulationError(f"strategy mixes rank counts {sorted(nr)}")
    for l in g.layers:
        d = assign[l.id]
        if execute and l.kind == "fc":
            raise SimulationError(f"layer {l.id!r}: fc layers can be planned and priced but not executed")
        try:
            if l.windowed:
                validate_windowed(d, l.conv, g.in_shapes[l.id], g.out_shapes[l.id])
            else:
                check_covers(d, g.out_shapes[l.id], f"layer {l.id!r}")
                if g.in_shapes[l.id] is not None:
                    check_covers(d, g.in_shapes[l.id], f"layer {l.id!r} input")
        except DistributionError as e:
            raise SimulationError(f"layer {l.id!r} under {d}: {e}") from None
    return assign


@dataclass
class StepResult:
    graph: NetworkGraph
    assignment: dict[str, LayerDistribution]
    y: dict[str, dict[int, np.ndarray]]
    dx: dict[str, dict[int, np.ndarray]]
    dy: dict[str, dict[int, np.ndarray]]
    dw: dict[str, np.ndarray]
    log: EventLog

    def gathered(self, which: str, lid: str) -> np.ndarray:
        """Global ``y``, ``dy`` or ``dx`` of a layer."""
        g, d = self.graph, self.assignment[lid]
        if which == "y":
            return gather_global(self.y[lid], d, g.out_shapes[lid])
        if which == "dy":
            return gather_global(self.dy[lid], d, g.out_shapes[lid])
        if which == "dx":
            shape = g.in_shapes[lid] or g.out_shapes[lid]
            return gather_global(self.dx[lid], d, shape)
        raise ValueError(which)


@dataclass
class _Ctx:
    g: NetworkGraph
    assign: dict[str, LayerDistribution]
    weights: Mapping[str, np.ndarray]
    fab: Fabric
    log: EventLog
    corrupt_halo: bool = False
    halos: dict = field(default_factory=dict)
    ehalos: dict = field(default_factory=dict)
    plans: dict = field(default_factory=dict)

    def halo(self, lid):
        if lid not in self.halos:
            l = self.g.layer(lid)
            self.halos[lid] = halo_spec(self.assign[lid], l.conv, self.g.in_shapes[lid], self.g.out_shapes[lid])
        return self.halos[lid]

    def ehalo(self, lid):
        if lid not in self.ehalos:
            l = self.g.layer(lid)
            self.ehalos[lid] = error_halo_spec(self.assign[lid], l.conv, self.g.in_shapes[lid], self.g.out_shapes[lid])
        return self.ehalos[lid]

    def plan(self, src_layer, dst_layer, reverse=False):
        key = (src_layer, dst_layer, reverse)
        if key not in self.plans:
            shape = self.g.out_shapes[src_layer]
            a, b = self.assign[src_layer], self.assign[dst_layer]
            self.plans[key] = shuffle_plan(b, a, shape) if reverse else shuffle_plan(a, b, shape)
        return self.plans[key]

    def compute(self, rank, layer, phase, reads):
        self.log.append(Event(self.fab.step, rank, "compute", layer, "", 0, "", phase, tuple(reads)))


def _redistribute(ctx: _Ctx, rank: int, arr, plan, layer: str, peer_layer: str, phase: str):
    """Move ``arr`` (this rank's shard under plan.src) to plan.dst. Generator."""
    c = plan.shape.c
    src_box = owned_indices(plan.src, rank, plan.shape)
    dst_box = owned_indices(plan.dst, rank, plan.shape)
    if plan.src == plan.dst:
        return arr
    for dst, box in plan.iter_sends(rank):
        ctx.fab.send(rank, dst, "shuffle", layer, phase, peer_layer, take(arr, src_box, box))
    out = np.zeros(_box_shape(dst_box, c))
    if rank in plan.kept:
        box = plan.kept[rank]
        put(out, dst_box, box, take(arr, src_box, box))
    for src, box in plan.iter_recvs(rank):
        payload = yield _Recv(src, "shuffle", layer, phase, peer_layer, _box_shape(box, c))
        put(out, dst_box, box, payload)
    return out


def _trim(payload, box: Box, direction: str, step):
    """Drop the outermost received halo row/column (debug corruption)."""
    n, h, w = box
    sh, sw = step
    if "north" == direction or direction.startswith("N"):
        payload, h = payload[:, :, 1:], (h[0] + sh, h[1])
    if "south" == direction or direction.startswith("S"):
        payload, h = payload[:, :, :-1], (h[0], h[1] - sh)
    if direction == "west" or direction.endswith("W"):
        payload, w = payload[:, :, :, 1:], (w[0] + sw, w[1])
    if direction == "east" or direction.endswith("E"):
        payload, w = payload[:, :, :, :-1], (w[0], w[1] - sw)
    return payload, (n, h, w)


def _halo_fill(ctx: _Ctx, rank: int, spec, local, channels: int, ext, ext_origin, layer, phase):
    """Exchange halos per ``spec`` and fill ``ext`` (extended local array). Generator."""
    owned = spec.owned
    for m in spec.messages:
        if m.send_count:
            ctx.fab.send(rank, m.peer, "halo", layer, phase, m.direction, take(local, owned, m.send, m.step))
    _copy_into(ext, ext_origin, local, owned)
    for m in spec.messages:
        if m.recv_count:
            shape = _box_shape(m.recv, channels, m.step)
            payload = yield _Recv(m.peer, "halo", layer, phase, _opposite(m.direction), shape)
            box = m.recv
            if ctx.corrupt_halo:
                payload, box = _trim(payload, box, m.direction, m.step)
            _copy_into(ext, ext_origin, payload, box, m.step)


def _overlap(lo: int, hi: int, step: int, e0: int, e1: int):
    """(source slice, destination slice) of a strided run ``lo, lo + step, ... < hi`` inside [e0, e1)."""
    first = lo + max(0, -(-(e0 - lo) // step)) * step
    stop = min(hi, e1)
    if first >= stop:
        return None
    count = (stop - 1 - first) // step + 1
    i0 = (first - lo) // step
    return slice(i0, i0 + count), slice(first - e0, first - e0 + (count - 1) * step + 1, step)


def _copy_into(ext, ext_origin, src, src_box: Box, step=(1, 1)) -> None:
    """Copy the (h, w) overlap of ``src`` (covering src_box) into ``ext``; N must match."""
    (_, _), (h0, h1), (w0, w1) = src_box
    eh0, ew0 = ext_origin
    rows = _overlap(h0, h1, step[0], eh0, eh0 + ext.shape[2])
    cols = _overlap(w0, w1, step[1], ew0, ew0 + ext.shape[3])
    if rows is None or cols is None:
        return
    ext[:, :, rows[1], cols[1]] = src[:, :, rows[0], cols[0]]


def _rank_program(ctx: _Ctx, rank: int, inputs: Mapping[str, np.ndarray], seeds: Mapping[str, np.ndarray], out):
    g, fab = ctx.g, ctx.fab
    ys, dys, dxs, dws = out["y"], out["dy"], out["dx"], out["dw"]
    saved: dict[str, dict] = {}

    # forward
    for l in g.layers:
        lid, d = l.id, ctx.assign[l.id]
        if l.kind == "input":
            ys[lid][rank] = inputs[lid]
            continue
        in_shape, out_shape = g.in_shapes[lid], g.out_shapes[lid]
        x = None
        for p in l.parents:
            part = yield from _redistribute(ctx, rank, ys[p][rank], ctx.plan(p, lid), lid, p, "fp")
            x = part if x is None else x + part
        st = saved[lid] = {"x": x}
        if l.windowed:
            conv = l.conv
            _, bh, bw = owned_indices(d, rank, out_shape)
            wh, ww = fp_window(bh, conv), fp_window(bw, conv)
            pad = K.pool_pad_value(l.pool_mode) if l.kind == "pool" else 0.0
            ext = np.full((x.shape[0], in_shape.c, wh[1] - wh[0], ww[1] - ww[0]), pad)
            yield from _halo_fill(ctx, rank, ctx.halo(lid)[rank], x, in_shape.c, ext, (wh[0], ww[0]), lid, "fp")
            st["x_ext"], st["origin"] = ext, (wh[0], ww[0])
            ctx.compute(rank, lid, "fp", ("x", "x_halo"))
            if l.kind == "conv":
                y = K.conv_fp_valid(ext, ctx.weights[lid], conv.stride)
            else:
                y, st["arg"] = K.pool_fp_valid(ext, conv.kernel, conv.stride, l.pool_mode)
        elif l.kind == "relu":
            ctx.compute(rank, lid, "fp", ("x",))
            y = K.relu_fp(x)
        elif l.kind in BN_KINDS:
            s, sq, cnt = K.bn_partial_sums(x)
            c = in_shape.c
            group = _bn_group(d, rank, l.kind)
            tot = yield from _allreduce(fab, rank, group, np.concatenate([s, sq, [cnt]]), lid, "fp")
            mean, var = K.bn_stats(tot[:c], tot[c : 2 * c], tot[2 * c])
            w = ctx.weights[lid]
            ctx.compute(rank, lid, "fp", ("x",))
            y, st["xhat"], st["inv_std"] = K.bn_fp(x, mean, var, w[0], w[1], l.eps)
            st["count"], st["group"] = tot[2 * c], group
        elif l.kind == "output":
            y = x
        else:
            raise SimulationError(f"layer {lid!r}: kind {l.kind!r} cannot be executed")
        want = _box_shape(owned_indices(d, rank, out_shape), out_shape.c)
        if y.shape != want:
            raise SimulationError(f"rank {rank} layer {lid!r}: output shard {y.shape} != owned block {want}")
        ys[lid][rank] = y

    # backward
    children = {l.id: g.children(l.id) for l in g.layers}
    for l in reversed(g.layers):
        lid, d = l.id, ctx.assign[l.id]
        out_shape = g.out_shapes[lid]
        if not children[lid]:
            dy = np.array(seeds[lid], dtype=np.float64)
        else:
            dy = None
            for c in children[lid]:
                for _ in range(ctx.g.layer(c).parents.count(lid)):
                    part = yield from _redistribute(
                        ctx, rank, dxs[c][rank], ctx.plan(lid, c, reverse=True), c, lid, "bp-data"
                    )
                    dy = part if dy is None else dy + part
        dys[lid][rank] = dy
        if l.kind == "input":
            dxs[lid][rank] = dy
            continue
        st = saved[lid]
        in_shape = g.in_shapes[lid]
        if l.kind == "conv":
            conv, w = l.conv, ctx.weights[lid]
            espec = ctx.ehalo(lid)[rank]
            for m in espec.messages:
                if m.send_count:
                    fab.send(rank, m.peer, "halo", lid, "bp-data", m.direction, take(dy, espec.owned, m.send))
            # the weight gradient never touches the dL/dy halo, so it runs
            # while that exchange is in flight
            ctx.compute(rank, lid, "bp-weights", ("x_ext", "dy"))
            dw_local = K.conv_bpw_valid(st["x_ext"], dy, conv.stride, conv.kernel)
            (_, _), nh, nw = espec.needed
            dy_ext = np.zeros((dy.shape[0], out_shape.c, nh[1] - nh[0], nw[1] - nw[0]))
            _copy_into(dy_ext, (nh[0], nw[0]), dy, espec.owned)
            for m in espec.messages:
                if m.recv_count:
                    payload = yield _Recv(
                        m.peer, "halo", lid, "bp-data", _opposite(m.direction), _box_shape(m.recv, out_shape.c)
                    )
                    _copy_into(dy_ext, (nh[0], nw[0]), payload, m.recv)
            ctx.compute(rank, lid, "bp-data", ("dy", "dy_halo", "w"))
            own = owned_indices(d, rank, in_shape)
            shape = _box_shape(own, in_shape.c)
            if dy_ext.size == 0:
                dx = np.zeros(shape)
            else:
                s, k, p = conv.stride, conv.kernel, conv.padding
                full = K.conv_bpx_full(dy_ext, w, s, s * (dy_ext.shape[2] - 1) + k, s * (dy_ext.shape[3] - 1) + k)
                dx = K.place(full, (s * nh[0] - p, s * nw[0] - p), shape, (own[1][0], own[2][0]))
            dws[lid] = yield from _allreduce(fab, rank, range(d.nranks), dw_local, lid, "bp-weights")
        elif l.kind == "pool":
            conv = l.conv
            ext, origin = st["x_ext"], st["origin"]
            ctx.compute(rank, lid, "bp-data", ("dy",))
            dx_ext = K.pool_bp_full(dy, st.get("arg"), conv.kernel, conv.stride, l.pool_mode, ext.shape[2], ext.shape[3])
            spec = ctx.halo(lid)[rank]
            # contributions that landed in neighbours' halo cells go back to their owners
            for m in spec.messages:
                if m.recv_count:
                    part = _extract(dx_ext, origin, m.recv, m.step)
                    fab.send(rank, m.peer, "halo-acc", lid, "bp-data", m.direction, part)
            own = spec.owned
            dx = K.place(dx_ext, origin, _box_shape(own, in_shape.c), (own[1][0], own[2][0]))
            for m in spec.messages:
                if m.send_count:
                    shape = _box_shape(m.send, in_shape.c, m.step)
                    payload = yield _Recv(m.peer, "halo-acc", lid, "bp-data", _opposite(m.direction), shape)
                    sn, sh, sw = _slices(own, m.send, m.step)
                    dx[sn, :, sh, sw] += payload
        elif l.kind == "relu":
            ctx.compute(rank, lid, "bp-data", ("dy", "x"))
            dx = K.relu_bp(dy, st["x"])
        elif l.kind in BN_KINDS:
            w = ctx.weights[lid]
            sdy, sdyx = K.bn_bp_partial_sums(dy, st["xhat"])
            c = in_shape.c
            tot = yield from _allreduce(fab, rank, st["group"], np.concatenate([sdy, sdyx]), lid, "bp-data")
            ctx.compute(rank, lid, "bp-data", ("dy", "xhat"))
            dx = K.bn_bp(dy, st["xhat"], w[0], st["inv_std"], tot[:c], tot[c:], st["count"])
            dws[lid] = yield from _allreduce(fab, rank, range(d.nranks), np.stack([sdyx, sdy]), lid, "bp-weights")
        elif l.kind == "output":
            dx = dy
        else:
            raise SimulationError(f"layer {lid!r}: kind {l.kind!r} cannot be executed")
        dxs[lid][rank] = dx


def _opposite(direction: str) -> str:
    flip = {"north": "south", "south": "north", "east": "west", "west": "east", "N": "S", "S": "N", "E": "W", "W": "E"}
    if direction in flip:
        return flip[direction]
    return "".join(flip[ch] for ch in direction)


def _extract(ext, origin, box: Box, step=(1, 1)):
    (_, _), (h0, h1), (w0, w1) = box
    return ext[:, :, h0 - origin[0] : h1 - origin[0] : step[0], w0 - origin[1] : w1 - origin[1] : step[1]]


def _bn_group(d: LayerDistribution, rank: int, kind: str) -> list[int]:
    for grp in bn_groups(d, kind == "batchnorm-spatial"):
        if rank in grp:
            return grp
    raise SimulationError(f"rank {rank} not in any batch-norm group")


def run_step(
    g: NetworkGraph,
    strategy,
    inputs: Mapping[str, np.ndarray] | np.ndarray,
    weights: Mapping[str, np.ndarray],
    seeds: Mapping[str, np.ndarray] | np.ndarray,
    *,
    debug_corrupt_halo: bool = False,
) -> StepResult:
    """Run forward, backward and the weight-gradient allreduce on virtual ranks.

    ``inputs`` and ``seeds`` (dL/dy of each sink layer) are global tensors;
    they are scattered according to their layer's distribution first.
    """
    assign = validate_strategy(g, strategy)
    inputs = _per_layer(inputs, g.sources(), "inputs")
    seeds = _per_layer(seeds, g.sinks(), "seeds")
    for lid in g.sources():
        if inputs[lid].shape != g.out_shapes[lid].as_tuple():
            raise SimulationError(f"input for {lid!r} has shape {inputs[lid].shape}, expected {g.out_shapes[lid].as_tuple()}")
    for lid in g.sinks():
        if np.shape(seeds[lid]) != g.out_shapes[lid].as_tuple():
            raise SimulationError(f"seed for {lid!r} has shape {np.shape(seeds[lid])}")
    for l in g.layers:
        ws = g.weight_shape(l.id)
        if ws is not None and np.shape(weights.get(l.id)) != ws:
            raise SimulationError(f"weights for {l.id!r} must have shape {ws}, got {np.shape(weights.get(l.id))}")
    nranks = next(iter(assign.values())).nranks
    log = EventLog()
    fab = Fabric(nranks, log)
    ctx = _Ctx(g, assign, weights, fab, log, corrupt_halo=debug_corrupt_halo)
    local_in = {lid: scatter(np.asarray(inputs[lid], dtype=np.float64), assign[lid]) for lid in g.sources()}
    local_seed = {lid: scatter(np.asarray(seeds[lid], dtype=np.float64), assign[lid]) for lid in g.sinks()}
    out = {k: {l.id: {} for l in g.layers} for k in ("y", "dy", "dx")}
    out["dw"] = {}
    per_rank_dw = {}
    progs = {}
    for r in range(nranks):
        rank_out = {"y": out["y"], "dy": out["dy"], "dx": out["dx"], "dw": {}}
        per_rank_dw[r] = rank_out["dw"]
        progs[r] = _rank_program(
            ctx,
            r,
            {lid: v[r] for lid, v in local_in.items()},
            {lid: v[r] for lid, v in local_seed.items()},
            rank_out,
        )
    run_programs(progs, fab)
    for lid, dw in per_rank_dw[0].items():
        for r in range(1, nranks):
            if not np.array_equal(per_rank_dw[r][lid], dw):
                raise SimulationError(f"allreduced dL/dw of {lid!r} differs between ranks 0 and {r}")
        out["dw"][lid] = dw
    return StepResult(g, assign, out["y"], out["dx"], out["dy"], out["dw"], log)


def _per_layer(value, layers, what):
    if isinstance(value, Mapping):
        missing = [l for l in layers if l not in value]
        if missing:
            raise SimulationError(f"{what} missing for layers {missing}")
        return value
    if len(layers) != 1:
        raise SimulationError(f"network has {len(layers)} layers needing {what}; pass a mapping")
    return {layers[0]: value}


# -- serial oracle --------------------------------------------------------------


@dataclass
class ReferenceResult:
    y: dict[str, np.ndarray]
    dy: dict[str, np.ndarray]
    dx: dict[str, np.ndarray]
    dw: dict[str, np.ndarray]
    # largest sum of |terms| behind any dw entry; bounds the roundoff of a
    # gradient that cancels to (nearly) zero
    dw_scale: dict[str, float] = field(default_factory=dict)


def reference_step(g: NetworkGraph, inputs, weights, seeds, strategy=None) -> ReferenceResult:
    """Single-process forward/backward on whole tensors.

    Batch-norm statistics are taken per group: one group without a
    strategy, otherwise the groups the strategy induces (each rank's block
    for local batch norm, each sample block for the spatial variant).
    """
    assign = _assignment(strategy) if strategy is not None else {}
    inputs = _per_layer(inputs, g.sources(), "inputs")
    seeds = _per_layer(seeds, g.sinks(), "seeds")
    y, dy, dx, dw, saved = {}, {}, {}, {}, {}
    dw_scale: dict[str, float] = {}
    for l in g.layers:
        lid = l.id
        if l.kind == "input":
            y[lid] = np.asarray(inputs[lid], dtype=np.float64)
            continue
        x = None
        for p in l.parents:
            x = y[p] if x is None else x + y[p]
        st = saved[lid] = {"x": x}
        if l.kind == "conv":
            y[lid] = K.conv_fp(x, weights[lid], l.conv)
        elif l.kind == "pool":
            y[lid], st["arg"] = K.pool_fp(x, l.conv, l.pool_mode)
        elif l.kind == "relu":
            y[lid] = K.relu_fp(x)
        elif l.kind in BN_KINDS:
            w = weights[lid]
            out = np.empty_like(x)
            xhat = np.empty_like(x)
            groups = []
            for box in _bn_boxes(g, assign.get(lid), lid, l.kind):
                part = take(x, _full(x), box)
                s, sq, cnt = K.bn_partial_sums(part)
                mean, var = K.bn_stats(s, sq, cnt)
                yy, xh, inv = K.bn_fp(part, mean, var, w[0], w[1], l.eps)
                put(out, _full(x), box, yy)
                put(xhat, _full(x), box, xh)
                groups.append((box, inv, cnt))
            y[lid] = out
            st["xhat"], st["groups"] = xhat, groups
        elif l.kind == "output":
            y[lid] = x
        else:
            raise SimulationError(f"layer {lid!r}: kind {l.kind!r} cannot be executed")

    for l in reversed(g.layers):
        lid = l.id
        kids = g.children(lid)
        if not kids:
            dy[lid] = np.asarray(seeds[lid], dtype=np.float64)
        else:
            acc = None
            for c in kids:
                for _ in range(g.layer(c).parents.count(lid)):
                    acc = dx[c] if acc is None else acc + dx[c]
            dy[lid] = acc
        if l.kind == "input":
            dx[lid] = dy[lid]
            continue
        st, in_shape = saved[lid], g.in_shapes[lid]
        if l.kind == "conv":
            dw[lid] = K.conv_bp_weights(st["x"], dy[lid], l.conv)
            dw_scale[lid] = float(np.max(K.conv_bp_weights(np.abs(st["x"]), np.abs(dy[lid]), l.conv)))
            dx[lid] = K.conv_bp_data(dy[lid], weights[lid], l.conv, (in_shape.h, in_shape.w))
        elif l.kind == "pool":
            dx[lid] = K.pool_bp(dy[lid], st.get("arg"), l.conv, l.pool_mode, (in_shape.h, in_shape.w))
        elif l.kind == "relu":
            dx[lid] = K.relu_bp(dy[lid], st["x"])
        elif l.kind in BN_KINDS:
            w = weights[lid]
            grad = np.empty_like(st["x"])
            dgamma = np.zeros(in_shape.c)
            dbeta = np.zeros(in_shape.c)
            for box, inv, cnt in st["groups"]:
                full = _full(st["x"])
                g_dy, g_xh = take(dy[lid], full, box), take(st["xhat"], full, box)
                sdy, sdyx = K.bn_bp_partial_sums(g_dy, g_xh)
                put(grad, full, box, K.bn_bp(g_dy, g_xh, w[0], inv, sdy, sdyx, cnt))
                dgamma = dgamma + sdyx
                dbeta = dbeta + sdy
            dx[lid] = grad
            dw[lid] = np.stack([dgamma, dbeta])
            dw_scale[lid] = float(max(np.abs(dy[lid] * st["xhat"]).sum(axis=(0, 2, 3)).max(),
                                      np.abs(dy[lid]).sum(axis=(0, 2, 3)).max()))
        elif l.kind == "output":
            dx[lid] = dy[lid]
    return ReferenceResult(y, dy, dx, dw, dw_scale)


def _full(x) -> Box:
    return ((0, x.shape[0]), (0, x.shape[2]), (0, x.shape[3]))


def _bn_boxes(g, d: LayerDistribution | None, lid, kind) -> list[Box]:
    shape = g.in_shapes[lid]
    if d is None:
        return [((0, shape.n), (0, shape.h), (0, shape.w))]
    if kind == "batchnorm-spatial":
        dn = d.dims(shape)[0]
        return [(dn.block(i), (0, shape.h), (0, shape.w)) for i in range(d.n_parts)]
    return [owned_indices(d, r, shape) for r in range(d.nranks)]


# -- comparison --------------------------------------------------------------


def max_rel_error(actual, expected, floor: float = 0.0) -> float:
    """max |a - e| / max(max |e|, floor) (0 when both are identically zero)."""
    actual, expected = np.asarray(actual), np.asarray(expected)
    if actual.shape != expected.shape:
        raise ValueError(f"shape mismatch {actual.shape} vs {expected.shape}")
    diff = float(np.max(np.abs(actual - expected), initial=0.0))
    scale = max(float(np.max(np.abs(expected), initial=0.0)), floor)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / scale


@dataclass(frozen=True)
class Discrepancy:
    tensor: str  # y | dx | dw
    layer: str
    rel_error: float
    worst_index: tuple[int, ...]


def compare_to_reference(res: StepResult, ref: ReferenceResult) -> list[Discrepancy]:
    """Relative error of every gathered y, dL/dx and dL/dw against the oracle.

    Weight gradients are measured against the larger of their own
    magnitude and the magnitude of the terms summed into them, so that a
    gradient which cancels to rounding noise is not judged by that noise.
    """
    out = []
    for l in res.graph.layers:
        lid = l.id
        for name in ("y", "dx"):
            got = res.gathered(name, lid)
            want = getattr(ref, name)[lid]
            out.append(Discrepancy(name, lid, max_rel_error(got, want), _worst(got, want)))
        if lid in ref.dw:
            got, want = res.dw[lid], ref.dw[lid]
            err = max_rel_error(got, want, ref.dw_scale.get(lid, 0.0))
            out.append(Discrepancy("dw", lid, err, _worst(got, want)))
    return out


def _worst(a, b) -> tuple[int, ...]:
    d = np.abs(np.asarray(a) - np.asarray(b))
    if d.size == 0:
        return ()
    return tuple(int(i) for i in np.unravel_index(int(np.argmax(d)), d.shape))
