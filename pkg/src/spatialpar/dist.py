"""Blocked distributions over a virtual processor grid.

Only N, H and W are ever partitioned; C and F are replicated on every rank.
Ranks are numbered row-major over grid coordinates ``(i_n, i_h, i_w)``.
All index ranges here are half-open ``(start, stop)`` pairs in global
coordinates.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator

from .netgraph import ConvParams, TensorShape

Range = tuple[int, int]
# (n range, h range, w range); channels are always complete
Box = tuple[Range, Range, Range]

DIRECTIONS = {
    (-1, 0): "north",
    (1, 0): "south",
    (0, -1): "west",
    (0, 1): "east",
    (-1, -1): "NW",
    (-1, 1): "NE",
    (1, -1): "SW",
    (1, 1): "SE",
}


class DistributionError(ValueError):
    """Distribution incompatible with a tensor or layer."""


@dataclass(frozen=True)
class BlockedDim:
    """Contiguous near-equal split of ``range(extent)``; extras go to the first blocks."""

    extent: int
    parts: int

    def __post_init__(self):
        if self.parts < 1:
            raise DistributionError(f"parts must be >= 1, got {self.parts}")
        if self.extent < 0:
            raise DistributionError(f"extent must be >= 0, got {self.extent}")

    @property
    def cuts(self) -> tuple[int, ...]:
        return _cuts(self.extent, self.parts)

    def block(self, i: int) -> Range:
        c = self.cuts
        return (c[i], c[i + 1])

    def size(self, i: int) -> int:
        a, b = self.block(i)
        return b - a

    def owner(self, index: int) -> int:
        c = self.cuts
        for i in range(self.parts):
            if c[i] <= index < c[i + 1]:
                return i
        raise IndexError(index)


@lru_cache(maxsize=4096)
def _cuts(extent: int, parts: int) -> tuple[int, ...]:
    q, r = divmod(extent, parts)
    cuts = [0]
    for i in range(parts):
        cuts.append(cuts[-1] + q + (1 if i < r else 0))
    return tuple(cuts)


@dataclass(frozen=True, order=True)
class LayerDistribution:
    """Processor grid extents for the N, H and W dimensions of a layer."""

    n_parts: int = 1
    h_parts: int = 1
    w_parts: int = 1

    def __post_init__(self):
        for v in self.grid:
            if not isinstance(v, int) or v < 1:
                raise DistributionError(f"grid extents must be positive integers, got {self.grid}")

    @property
    def grid(self) -> tuple[int, int, int]:
        return (self.n_parts, self.h_parts, self.w_parts)

    @property
    def nranks(self) -> int:
        return self.n_parts * self.h_parts * self.w_parts

    @property
    def kind(self) -> str:
        spatial = self.h_parts * self.w_parts > 1
        if not spatial:
            return "sample"
        return "hybrid" if self.n_parts > 1 else "spatial"

    def coords(self, rank: int) -> tuple[int, int, int]:
        if not 0 <= rank < self.nranks:
            raise DistributionError(f"rank {rank} out of range for {self.nranks} ranks")
        i_n, rest = divmod(rank, self.h_parts * self.w_parts)
        i_h, i_w = divmod(rest, self.w_parts)
        return (i_n, i_h, i_w)

    def rank_of(self, i_n: int, i_h: int, i_w: int) -> int:
        return (i_n * self.h_parts + i_h) * self.w_parts + i_w

    def dims(self, shape: TensorShape) -> tuple[BlockedDim, BlockedDim, BlockedDim]:
        return (
            BlockedDim(shape.n, self.n_parts),
            BlockedDim(shape.h, self.h_parts),
            BlockedDim(shape.w, self.w_parts),
        )

    def to_dict(self) -> dict:
        return {"n_parts": self.n_parts, "h_parts": self.h_parts, "w_parts": self.w_parts}

    @classmethod
    def from_dict(cls, d) -> "LayerDistribution":
        try:
            return cls(int(d["n_parts"]), int(d.get("h_parts", 1)), int(d.get("w_parts", 1)))
        except (KeyError, TypeError) as e:
            raise DistributionError(f"bad distribution literal {d!r}") from e

    def __str__(self) -> str:
        return f"{self.n_parts}x{self.h_parts}x{self.w_parts}"


def owned_indices(dist: LayerDistribution, rank: int, shape: TensorShape) -> Box:
    """Global (n, h, w) ranges owned by ``rank``; channels are always whole."""
    i_n, i_h, i_w = dist.coords(rank)
    dn, dh, dw = dist.dims(shape)
    return (dn.block(i_n), dh.block(i_h), dw.block(i_w))


def box_size(box: Box) -> int:
    out = 1
    for a, b in box:
        out *= max(0, b - a)
    return out


def strided_len(r: Range, step: int) -> int:
    return max(0, -(-(r[1] - r[0]) // step))


def box_count(box: Box, step: tuple[int, int] = (1, 1)) -> int:
    """Elements of ``box`` when its h and w ranges are walked with ``step``."""
    (n0, n1), h, w = box
    return max(0, n1 - n0) * strided_len(h, step[0]) * strided_len(w, step[1])


def strided_intersect(r: Range, step: int, block: Range) -> Range | None:
    """Members of ``r[0], r[0] + step, ...`` (below ``r[1]``) inside ``block``, as (first, last + 1)."""
    lo = max(r[0], block[0])
    start = r[0] + -(-(lo - r[0]) // step) * step
    stop = min(r[1], block[1])
    if start >= stop:
        return None
    return (start, start + (stop - 1 - start) // step * step + 1)


def _strided_box_intersect(needed: Box, owned: Box, step: tuple[int, int]) -> Box | None:
    n = box_intersect((needed[0],), (owned[0],))
    h = strided_intersect(needed[1], step[0], owned[1])
    w = strided_intersect(needed[2], step[1], owned[2])
    if n is None or h is None or w is None:
        return None
    return (n[0], h, w)


def box_intersect(a: Box, b: Box) -> Box | None:
    out = []
    for (a0, a1), (b0, b1) in zip(a, b):
        lo, hi = max(a0, b0), min(a1, b1)
        if lo >= hi:
            return None
        out.append((lo, hi))
    return tuple(out)


def check_covers(dist: LayerDistribution, shape: TensorShape, what: str = "tensor") -> None:
    """Every rank must own a non-empty block."""
    for name, bd in zip("NHW", dist.dims(shape)):
        if bd.parts > bd.extent:
            raise DistributionError(
                f"{what}: cannot split {name}={bd.extent} into {bd.parts} non-empty blocks"
            )


# -- halo index arithmetic ---------------------------------------------


def fp_needed(out_block: Range, conv: ConvParams, extent: int) -> Range:
    """Input rows read when computing output rows ``out_block``, clipped to the tensor."""
    q, r = out_block[0], out_block[1] - 1
    lo = conv.stride * q - conv.padding
    hi = conv.stride * r - conv.padding + conv.kernel - 1
    return (max(lo, 0), min(hi + 1, extent))


def fp_step(conv: ConvParams) -> int:
    """Row step of the forward dependence set.

    A 1-wide window with stride S reads only every S-th row; wider windows
    with S <= K read a contiguous range.  (For 1 < K < S the reads form
    runs, and the contiguous hull is used.)
    """
    return conv.stride if conv.kernel == 1 else 1


def fp_window(out_block: Range, conv: ConvParams) -> Range:
    """Unclipped input rows (padding included) read for ``out_block``."""
    q, r = out_block[0], out_block[1] - 1
    return (conv.stride * q - conv.padding, conv.stride * r - conv.padding + conv.kernel)


def bpx_needed(in_block: Range, conv: ConvParams, out_extent: int) -> Range:
    """Output rows whose error signal reaches input rows ``in_block``."""
    a0, e0 = in_block[0], in_block[1] - 1
    s, p, k = conv.stride, conv.padding, conv.kernel
    lo = -(-(a0 + p - k + 1) // s)
    hi = (e0 + p) // s
    lo, hi = max(lo, 0), min(hi, out_extent - 1)
    if lo > hi:
        return (0, 0)
    return (lo, hi + 1)


@dataclass(frozen=True)
class HaloMessage:
    direction: str
    peer: int
    send: Box  # rows/cols of the local tensor shipped to peer
    recv: Box  # rows/cols received from peer
    step: tuple[int, int] = (1, 1)  # h and w step inside send/recv

    @property
    def send_count(self) -> int:
        return box_count(self.send, self.step)

    @property
    def recv_count(self) -> int:
        return box_count(self.recv, self.step)


@dataclass(frozen=True)
class HaloSpec:
    """Per-rank halo exchange plan for one tensor of a windowed layer.

    ``owned`` is the rank's block of the exchanged tensor and ``needed`` the
    (clipped) region it must hold locally before running its kernel.  Halo
    boxes are walked with ``step`` along h and w; only the rows and
    columns on that grid are exchanged.
    """

    rank: int
    owned: Box
    needed: Box
    messages: tuple[HaloMessage, ...] = field(default=())
    step: tuple[int, int] = (1, 1)

    @property
    def recv_count(self) -> int:
        return sum(m.recv_count for m in self.messages)

    @property
    def send_count(self) -> int:
        return sum(m.send_count for m in self.messages)

    def by_direction(self) -> dict[str, HaloMessage]:
        return {m.direction: m for m in self.messages}


def _check_adjacent(needed: Range, dim, i: int, what: str, halo: int) -> None:
    if needed[0] >= needed[1]:
        return
    lo_block = dim.owner(needed[0])
    hi_block = dim.owner(needed[1] - 1)
    if lo_block < i - 1 or hi_block > i + 1:
        raise DistributionError(
            f"{what}: partition thinner than halo radius {halo} "
            f"(block {i} of {dim.parts} over extent {dim.extent} needs rows {needed})"
        )


def _exchange(
    dist: LayerDistribution,
    src_shape: TensorShape,
    needed_fn,
    what: str,
    halo: int,
    step: tuple[int, int] = (1, 1),
) -> list[HaloSpec]:
    """Build halo specs for a tensor of ``src_shape`` given each rank's needed region."""
    dn, dh, dw = dist.dims(src_shape)
    needed_all = {}
    for rank in range(dist.nranks):
        i_n, i_h, i_w = dist.coords(rank)
        nh, nw = needed_fn(i_h, i_w)
        _check_adjacent(nh, dh, i_h, what, halo)
        _check_adjacent(nw, dw, i_w, what, halo)
        needed_all[rank] = (dn.block(i_n), nh, nw)

    specs = []
    for rank in range(dist.nranks):
        i_n, i_h, i_w = dist.coords(rank)
        owned = owned_indices(dist, rank, src_shape)
        msgs = []
        for (oh, ow), name in DIRECTIONS.items():
            j_h, j_w = i_h + oh, i_w + ow
            if not (0 <= j_h < dist.h_parts and 0 <= j_w < dist.w_parts):
                continue
            peer = dist.rank_of(i_n, j_h, j_w)
            peer_owned = owned_indices(dist, peer, src_shape)
            recv = _strided_box_intersect(needed_all[rank], peer_owned, step)
            send = _strided_box_intersect(needed_all[peer], owned, step)
            if recv is None and send is None:
                continue
            empty = ((0, 0), (0, 0), (0, 0))
            msgs.append(HaloMessage(name, peer, send or empty, recv or empty, step))
        specs.append(HaloSpec(rank, owned, needed_all[rank], tuple(msgs), step))
    return specs


def _check_extent(dist: LayerDistribution, shape: TensorShape, halo: int, what: str) -> None:
    check_covers(dist, shape, what)
    for name, bd in zip("HW", dist.dims(shape)[1:]):
        if bd.parts > 1 and halo > 0 and min(bd.size(i) for i in range(bd.parts)) < halo:
            raise DistributionError(
                f"{what}: partition thinner than halo radius {halo} on {name} "
                f"({bd.extent} rows over {bd.parts} blocks)"
            )


def validate_windowed(
    dist: LayerDistribution, conv: ConvParams, in_shape: TensorShape, out_shape: TensorShape
) -> None:
    """Raise DistributionError unless ``dist`` is usable for this conv/pool layer."""
    halo_spec(dist, conv, in_shape, out_shape)
    error_halo_spec(dist, conv, in_shape, out_shape)


def halo_spec(
    dist: LayerDistribution, conv: ConvParams, in_shape: TensorShape, out_shape: TensorShape | None = None
) -> list[HaloSpec]:
    """Forward halo exchange on x: what each rank must fetch to compute its outputs."""
    if out_shape is None:
        out_shape = TensorShape(in_shape.n, max(conv.filters, 1), conv.out_extent(in_shape.h), conv.out_extent(in_shape.w))
    _check_extent(dist, in_shape, conv.halo, "input")
    check_covers(dist, out_shape, "output")
    _, oh, ow = dist.dims(out_shape)

    def needed(i_h, i_w):
        return fp_needed(oh.block(i_h), conv, in_shape.h), fp_needed(ow.block(i_w), conv, in_shape.w)

    step = fp_step(conv)
    return _exchange(dist, in_shape, needed, "forward halo", conv.halo, (step, step))


def error_halo_spec(
    dist: LayerDistribution, conv: ConvParams, in_shape: TensorShape, out_shape: TensorShape
) -> list[HaloSpec]:
    """Backward halo exchange on dL/dy needed to form each rank's dL/dx."""
    _check_extent(dist, in_shape, conv.halo, "input")
    check_covers(dist, out_shape, "output")
    _, ih, iw = dist.dims(in_shape)

    def needed(i_h, i_w):
        return bpx_needed(ih.block(i_h), conv, out_shape.h), bpx_needed(iw.block(i_w), conv, out_shape.w)

    return _exchange(dist, out_shape, needed, "error-signal halo", conv.halo)


# -- redistribution ------------------------------------------------------


@dataclass(frozen=True)
class ShufflePlan:
    """All-to-all movement between two distributions of one tensor.

    ``moves`` maps ``(src, dst)`` with ``src != dst`` to the box shipped;
    ``kept`` maps a rank to the box it retains locally.
    """

    shape: TensorShape
    src: LayerDistribution
    dst: LayerDistribution
    moves: dict[tuple[int, int], Box]
    kept: dict[int, Box]

    @property
    def moved_elements(self) -> int:
        return sum(box_size(b) for b in self.moves.values()) * self.shape.c

    @property
    def kept_elements(self) -> int:
        return sum(box_size(b) for b in self.kept.values()) * self.shape.c

    def is_empty(self) -> bool:
        return not self.moves

    def pair_volumes(self) -> dict[tuple[int, int], int]:
        """Elements (channels included) per ordered rank pair."""
        return {k: box_size(b) * self.shape.c for k, b in self.moves.items()}

    def iter_sends(self, rank: int) -> Iterator[tuple[int, Box]]:
        for (s, d), b in sorted(self.moves.items()):
            if s == rank:
                yield d, b

    def iter_recvs(self, rank: int) -> Iterator[tuple[int, Box]]:
        for (s, d), b in sorted(self.moves.items()):
            if d == rank:
                yield s, b


def shuffle_plan(src: LayerDistribution, dst: LayerDistribution, shape: TensorShape) -> ShufflePlan:
    if src.nranks != dst.nranks:
        raise DistributionError(f"rank count mismatch: {src.nranks} vs {dst.nranks}")
    check_covers(src, shape, "shuffle source")
    check_covers(dst, shape, "shuffle destination")
    moves: dict[tuple[int, int], Box] = {}
    kept: dict[int, Box] = {}
    if src == dst:
        for r in range(src.nranks):
            kept[r] = owned_indices(src, r, shape)
        return ShufflePlan(shape, src, dst, moves, kept)
    dst_boxes = [owned_indices(dst, r, shape) for r in range(dst.nranks)]
    for s in range(src.nranks):
        sb = owned_indices(src, s, shape)
        for d, db in enumerate(dst_boxes):
            inter = box_intersect(sb, db)
            if inter is None:
                continue
            if s == d:
                kept[s] = inter
            else:
                moves[(s, d)] = inter
    return ShufflePlan(shape, src, dst, moves, kept)


def grids(nranks: int) -> list[LayerDistribution]:
    """Every (p_N, p_H, p_W) with product ``nranks``."""
    out = []
    for pn in range(1, nranks + 1):
        if nranks % pn:
            continue
        rest = nranks // pn
        for ph in range(1, rest + 1):
            if rest % ph == 0:
                out.append(LayerDistribution(pn, ph, rest // ph))
    return out


def all_coords(dist: LayerDistribution):
    return itertools.product(range(dist.n_parts), range(dist.h_parts), range(dist.w_parts))
