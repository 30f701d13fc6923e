import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatialpar.dist import (
    BlockedDim,
    DistributionError,
    LayerDistribution,
    box_size,
    error_halo_spec,
    grids,
    halo_spec,
    owned_indices,
    shuffle_plan,
    strided_intersect,
    validate_windowed,
)
from spatialpar.netgraph import ConvParams, TensorShape

from oracles import blocks, box_elements, halo_sets


def test_even_and_uneven_blocks():
    assert [BlockedDim(8, 2).block(i) for i in range(2)] == [(0, 4), (4, 8)]
    assert [BlockedDim(7, 2).size(i) for i in range(2)] == [4, 3]
    assert BlockedDim(7, 2).owner(4) == 1


def test_single_rank_owns_everything():
    shape = TensorShape(3, 2, 5, 7)
    assert owned_indices(LayerDistribution(), 0, shape) == ((0, 3), (0, 5), (0, 7))


def test_rank_order_is_row_major():
    d = LayerDistribution(2, 3, 2)
    coords = [d.coords(r) for r in range(d.nranks)]
    assert coords == list(itertools.product(range(2), range(3), range(2)))
    assert all(d.rank_of(*c) == r for r, c in enumerate(coords))
    with pytest.raises(DistributionError):
        d.coords(12)


def test_distribution_literal_round_trip():
    d = LayerDistribution(2, 1, 4)
    assert LayerDistribution.from_dict(d.to_dict()) == d
    assert LayerDistribution.from_dict({"n_parts": 4}) == LayerDistribution(4, 1, 1)
    with pytest.raises(DistributionError):
        LayerDistribution.from_dict({"h_parts": 2})
    with pytest.raises(DistributionError):
        LayerDistribution(0, 1, 1)


def test_grids_enumerates_factorizations():
    assert sorted(d.grid for d in grids(4)) == sorted(
        [(4, 1, 1), (2, 2, 1), (2, 1, 2), (1, 2, 2), (1, 4, 1), (1, 1, 4)]
    )
    for p in range(1, 17):
        got = {d.grid for d in grids(p)}
        want = {(a, b, c) for a in range(1, p + 1) for b in range(1, p + 1) for c in range(1, p + 1) if a * b * c == p}
        assert got == want


@settings(max_examples=200, deadline=None)
@given(extent=st.integers(1, 100), parts=st.integers(1, 12))
def test_blocks_match_reference_cut_rule(extent, parts):
    bd = BlockedDim(extent, parts)
    assert [range(*bd.block(i)) for i in range(parts)] == blocks(extent, parts)
    sizes = [bd.size(i) for i in range(parts)]
    assert max(sizes) - min(sizes) <= 1 and sum(sizes) == extent


@settings(max_examples=60, deadline=None)
@given(
    shape=st.tuples(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9)),
    grid=st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3)),
)
def test_ownership_partitions_the_tensor(shape, grid):
    n, h, w = shape
    d = LayerDistribution(*grid)
    if grid[0] > n or grid[1] > h or grid[2] > w:
        return
    ts = TensorShape(n, 2, h, w)
    seen = []
    for r in range(d.nranks):
        seen.extend(box_elements(owned_indices(d, r, ts)))
    assert len(seen) == len(set(seen)) == n * h * w


def test_halo_examples():
    conv = ConvParams(1, 3, 1, 1)
    specs = halo_spec(LayerDistribution(1, 2, 2), conv, TensorShape(1, 1, 8, 8))
    got = {m.direction: m.recv_count for m in specs[0].messages}
    assert got == {"south": 4, "east": 4, "SE": 1}  # one row, one column, one corner
    # stride 2: outputs 0..1 read rows 0..3 (all local), outputs 2..3 read rows 3..7
    conv = ConvParams(1, 3, 2, 1)
    specs = halo_spec(LayerDistribution(1, 2, 1), conv, TensorShape(1, 1, 8, 8))
    assert specs[0].recv_count == 0 and specs[0].send_count == 8
    assert [m.recv[1] for m in specs[1].messages] == [(3, 4)]


@pytest.mark.parametrize("grid", [(1, 2, 2), (2, 4, 1), (1, 3, 3)])
def test_k1_needs_no_halo(grid):
    d = LayerDistribution(*grid)
    for s in (1, 2):
        # extents divisible by stride x parts keep stride-2 blocks aligned
        shape = TensorShape(2, 3, 24, 24)
        specs = halo_spec(d, ConvParams(4, 1, s, 0), shape)
        assert all(not sp.messages for sp in specs)


def test_k1_stride2_misaligned_blocks_fetch_only_read_rows():
    specs = halo_spec(LayerDistribution(1, 1, 4), ConvParams(1, 1, 2, 0), TensorShape(1, 1, 5, 20))
    (msg,) = specs[1].messages
    assert msg.step == (2, 2)
    assert box_elements(msg.recv, msg.step) == {(0, h, 10) for h in (0, 2, 4)}


def test_thin_partitions_rejected():
    conv = ConvParams(1, 5, 1, 2)
    with pytest.raises(DistributionError, match="thinner than halo"):
        halo_spec(LayerDistribution(1, 4, 1), conv, TensorShape(1, 1, 6, 8))
    # kernel as large as the extent: no spatial split survives
    conv = ConvParams(1, 7, 1, 0)
    shape = TensorShape(4, 1, 7, 7)
    out = TensorShape(4, 1, 1, 1)
    with pytest.raises(DistributionError):
        validate_windowed(LayerDistribution(1, 2, 1), conv, shape, out)
    validate_windowed(LayerDistribution(4, 1, 1), conv, shape, out)


@settings(max_examples=150, deadline=None)
@given(
    k=st.sampled_from([1, 3, 5, 7]),
    s=st.integers(1, 3),
    h=st.integers(7, 20),
    w=st.integers(7, 20),
    grid=st.tuples(st.integers(1, 2), st.integers(1, 4), st.integers(1, 4)),
    data=st.data(),
)
def test_halo_matches_oracle_randomized(k, s, h, w, grid, data):
    pad = data.draw(st.integers(0, k // 2))
    conv = ConvParams(2, k, s, pad)
    ins = TensorShape(2, 2, h, w)
    if conv.out_extent(h) < 1 or conv.out_extent(w) < 1:
        return
    outs = TensorShape(2, 2, conv.out_extent(h), conv.out_extent(w))
    d = LayerDistribution(*grid)
    for phase, fn in (("fp", halo_spec), ("bp-data", error_halo_spec)):
        try:
            specs = fn(d, conv, ins, outs)
        except DistributionError:
            return
        want = halo_sets(grid, (2, h, w), k, s, pad, phase)
        if phase == "fp" and 1 < k < s:
            # contiguous hull: a superset of the rows actually read
            for sp in specs:
                got = set().union(*[box_elements(m.recv, m.step) for m in sp.messages])
                assert set().union(*want[sp.rank].values()) <= got
            continue
        for sp in specs:
            got = {m.peer: box_elements(m.recv, m.step) for m in sp.messages if m.recv_count}
            assert got == want[sp.rank]
            for m in sp.messages:
                assert m.recv_count == len(box_elements(m.recv, m.step))
                # receive ranges avoid owned data; send ranges lie inside it
                assert not box_elements(m.recv, m.step) & box_elements(sp.owned)
                assert box_elements(m.send, m.step) <= box_elements(sp.owned)


def test_strided_intersect():
    assert strided_intersect((0, 17), 2, (5, 11)) == (6, 11)
    assert strided_intersect((0, 17), 2, (5, 6)) is None
    assert strided_intersect((3, 4), 5, (0, 10)) == (3, 4)


# -- shuffles ------------------------------------------------------------------


def test_identity_shuffle_is_empty():
    shape = TensorShape(4, 3, 8, 8)
    d = LayerDistribution(2, 2, 1)
    assert shuffle_plan(d, d, shape).is_empty()
    assert shuffle_plan(LayerDistribution(), LayerDistribution(), shape).is_empty()


def test_sample_to_hybrid_shuffle():
    shape = TensorShape(4, 1, 8, 8)
    plan = shuffle_plan(LayerDistribution(4, 1, 1), LayerDistribution(2, 2, 1), shape)
    for r in range(4):
        kept = plan.kept[r]
        assert box_size(kept) == 32  # half of one sample
        recvs = list(plan.iter_recvs(r))
        assert len(recvs) == 1 and box_size(recvs[0][1]) == 32


def test_shuffle_rejects_mismatched_rank_counts():
    with pytest.raises(DistributionError):
        shuffle_plan(LayerDistribution(2, 1, 1), LayerDistribution(4, 1, 1), TensorShape(4, 1, 4, 4))


@settings(max_examples=80, deadline=None)
@given(
    p=st.sampled_from([1, 2, 4, 6, 8]),
    shape=st.tuples(st.integers(1, 8), st.integers(8, 12), st.integers(8, 12)),
    data=st.data(),
)
def test_shuffle_is_set_difference_and_round_trips(p, shape, data):
    n, h, w = shape
    ts = TensorShape(n, 2, h, w)
    valid = [d for d in grids(p) if d.n_parts <= n]
    if not valid:
        return
    a = data.draw(st.sampled_from(valid))
    b = data.draw(st.sampled_from(valid))
    plan = shuffle_plan(a, b, ts)
    for r in range(p):
        old, new = box_elements(owned_indices(a, r, ts)), box_elements(owned_indices(b, r, ts))
        sent = set().union(*[box_elements(bx) for _, bx in plan.iter_sends(r)])
        got = set().union(*[box_elements(bx) for _, bx in plan.iter_recvs(r)])
        assert sent == old - new
        assert got == new - old
    assert plan.moved_elements + plan.kept_elements == n * 2 * h * w
    back = shuffle_plan(b, a, ts)
    assert {(d, s): bx for (s, d), bx in plan.moves.items()} == back.moves
