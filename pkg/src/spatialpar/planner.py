"""Strategy search: candidate distributions per layer and shortest-path selection."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .dist import DistributionError, LayerDistribution, check_covers, grids, validate_windowed
from .netgraph import NetworkGraph, longest_path_decomposition
from .perfmodel import (
    CostTable,
    LayerCost,
    MachineModel,
    conv_cost_key,
    edge_shuffle,
    fc_cost_key,
    layer_cost,
    layer_memory,
    memory_estimate,
    network_cost,
)

DEFAULT_MAX_CANDIDATES = 16


class PlanningError(ValueError):
    pass


def provenance(d: LayerDistribution) -> str:
    return {"sample": "sample-only"}.get(d.kind, d.kind)


def candidate_order(d: LayerDistribution):
    """Sample-heavy first, then the squarest spatial split, then wider-than-tall."""
    return (-d.n_parts, max(d.h_parts, d.w_parts), -d.h_parts)


@dataclass
class CandidateSet:
    candidates: dict[str, list[LayerDistribution]]
    pruned: dict[str, dict[str, str]] = field(default_factory=dict)  # layer -> grid -> reason

    def __getitem__(self, lid: str) -> list[LayerDistribution]:
        return self.candidates[lid]

    def __contains__(self, lid) -> bool:
        return lid in self.candidates

    def tagged(self, lid: str) -> list[tuple[LayerDistribution, str]]:
        return [(d, provenance(d)) for d in self.candidates[lid]]

    @property
    def nranks(self) -> int:
        return next(iter(self.candidates.values()))[0].nranks


def _check(g: NetworkGraph, lid: str, d: LayerDistribution) -> None:
    l = g.layer(lid)
    if l.windowed:
        validate_windowed(d, l.conv, g.in_shapes[lid], g.out_shapes[lid])
    else:
        check_covers(d, g.out_shapes[lid], "output")
        if g.in_shapes[lid] is not None:
            check_covers(d, g.in_shapes[lid], "input")


def _mean_layer_bytes(g: NetworkGraph, lid: str, d: LayerDistribution, word_bytes: int) -> float:
    rows = layer_memory(g, lid, d, word_bytes)
    return sum(sum(r.values()) for r in rows) / len(rows)


def generate_candidates(
    g: NetworkGraph,
    m: MachineModel,
    mem_cap_bytes: int | None = None,
    max_candidates: int = DEFAULT_MAX_CANDIDATES,
) -> CandidateSet:
    """Valid grids per layer, sample-first, capped and memory-pruned.

    Input, conv and pool layers enumerate every factorization of the rank
    count; other layers inherit their parents' candidates.  A candidate is
    dropped under a memory cap when even the cheapest choices for all other
    layers cannot bring the rank-average footprint under the cap, which
    is a necessary condition for any feasible strategy.
    """
    if max_candidates < 1:
        raise PlanningError("max_candidates must be >= 1")
    all_grids = sorted(grids(m.ranks), key=candidate_order)
    cands: dict[str, list[LayerDistribution]] = {}
    pruned: dict[str, dict[str, str]] = {}
    for l in g.layers:
        if l.kind in ("input", "conv", "pool") or not l.parents:
            pool = all_grids
        else:
            pool = list(dict.fromkeys(d for p in l.parents for d in cands[p]))
        keep, why = [], {}
        for d in pool:
            try:
                _check(g, l.id, d)
            except DistributionError as e:
                why[str(d)] = str(e)
                continue
            keep.append(d)
        if not keep:
            raise PlanningError(f"layer {l.id!r}: no valid distribution over {m.ranks} ranks; " + "; ".join(why.values()))
        cands[l.id] = keep[:max_candidates]
        pruned[l.id] = why
    if mem_cap_bytes is not None:
        mean = {lid: {d: _mean_layer_bytes(g, lid, d, m.word_bytes) for d in ds} for lid, ds in cands.items()}
        floor = {lid: min(v.values()) for lid, v in mean.items()}
        base = sum(floor.values())
        if base > mem_cap_bytes:
            raise PlanningError(
                f"memory cap {mem_cap_bytes} B is below what any strategy needs: the lightest candidates "
                f"still average {base:.0f} B per rank over {m.ranks} ranks"
            )
        for lid, ds in cands.items():
            keep = []
            for d in ds:
                need = base - floor[lid] + mean[lid][d]
                if need > mem_cap_bytes:
                    pruned[lid][str(d)] = f"memory: at least {need:.0f} B per rank exceeds cap {mem_cap_bytes} B"
                else:
                    keep.append(d)
            if not keep:
                raise PlanningError(
                    f"layer {lid!r}: memory cap {mem_cap_bytes} B excludes every candidate "
                    f"(smallest footprint needs {base:.0f} B per rank on average)"
                )
            cands[lid] = keep
    return CandidateSet(cands, pruned)


def cost_keys(g: NetworkGraph, cands: CandidateSet) -> list[tuple]:
    """Every cost-table key that pricing these candidates will look up."""
    keys = []
    for l in g.layers:
        if l.kind == "conv":
            for d in cands[l.id]:
                keys += [conv_cost_key(op, d, l.conv, g.in_shapes[l.id]) for op in ("fp", "bp-data", "bp-filter")]
        elif l.kind == "fc":
            keys.append(fc_cost_key(g, l.id))
    return list(dict.fromkeys(keys))


# -- strategies -----------------------------------------------------------------


@dataclass
class Strategy:
    assignment: dict[str, LayerDistribution]
    predicted: float = 0.0
    layer_costs: dict[str, LayerCost] = field(default_factory=dict)
    memory: list[int] = field(default_factory=list)
    path_cost: float = 0.0
    breakdown: dict = field(default_factory=dict)

    @property
    def nranks(self) -> int:
        return next(iter(self.assignment.values())).nranks

    def to_dict(self) -> dict:
        return {
            "ranks": self.nranks,
            "layers": {lid: d.to_dict() for lid, d in self.assignment.items()},
            "predicted": {
                "total": self.predicted,
                "path_cost": self.path_cost,
                "memory_per_rank": list(self.memory),
                **{k: v for k, v in self.breakdown.items() if k != "total"},
            },
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Strategy":
        try:
            layers = doc["layers"]
            assign = {lid: LayerDistribution.from_dict(v) for lid, v in layers.items()}
        except (KeyError, TypeError, AttributeError) as e:
            raise ValueError(f"malformed strategy document: {e}") from None
        ranks = doc.get("ranks")
        bad = [lid for lid, d in assign.items() if ranks is not None and d.nranks != ranks]
        if bad:
            raise ValueError(f"strategy layers {bad} do not use {ranks} ranks")
        pred = doc.get("predicted", {}) or {}
        return cls(assign, float(pred.get("total", 0.0)), memory=list(pred.get("memory_per_rank", [])))


def load_strategy(path) -> Strategy:
    with open(path) as f:
        return Strategy.from_dict(json.load(f))


def uniform_strategy(g: NetworkGraph, d: LayerDistribution) -> dict[str, LayerDistribution]:
    return {l.id: d for l in g.layers}


def evaluate(g: NetworkGraph, assignment: Mapping[str, LayerDistribution], m: MachineModel, t: CostTable | None,
             interpolate: bool = False, path_cost: float = 0.0) -> Strategy:
    nc = network_cost(g, assignment, m, t, interpolate)
    mem = memory_estimate(g, assignment, m.word_bytes)
    return Strategy(dict(assignment), nc.total, nc.layers, mem.per_rank, path_cost, nc.breakdown())


# -- shortest path over a layered DAG ---------------------------------------------


LayerCostFn = Callable[[str, LayerDistribution], float]
ShuffleFn = Callable[[str, str, LayerDistribution, LayerDistribution], float]


def model_costs(g: NetworkGraph, m: MachineModel, t: CostTable | None, interpolate: bool = False):
    """Additive planning weights: per-layer exposed cost and per-edge two-way shuffle."""
    lcache: dict = {}
    scache: dict = {}

    def lc(lid, d):
        if (lid, d) not in lcache:
            lcache[(lid, d)] = layer_cost(g, lid, d, m, t, interpolate).exposed_total
        return lcache[(lid, d)]

    def sc(p, c, dp, dc):
        key = (p, c, dp, dc)
        if key not in scache:
            scache[key] = edge_shuffle(g, p, c, dp, dc, m).total
        return scache[key]

    return lc, sc


def _grid_key(d: LayerDistribution):
    return candidate_order(d)


def shortest_path(
    layers: Sequence[str],
    options: Mapping[str, Sequence[LayerDistribution]],
    cost: LayerCostFn,
    shuffle: ShuffleFn,
) -> tuple[float, list[LayerDistribution]]:
    """Min-cost candidate sequence along a chain of layers.

    Vertices are (layer, candidate); an edge from layer i's candidate a to
    layer i+1's candidate b weighs cost(i, a) + shuffle(a -> b), and the
    sink edge carries the last layer's cost.  Sums accumulate left to right
    along the path; equal totals resolve to the sequence that comes first
    in candidate order, layer by layer.
    """
    if not layers:
        return 0.0, []
    for lid in layers:
        if not options.get(lid):
            raise PlanningError(f"layer {lid!r} has no candidates")
    first = layers[0]
    # per candidate: (accumulated cost including this layer, grid sequence, choice)
    best = [(cost(first, d), (_grid_key(d),), [d]) for d in options[first]]
    for prev, lid in zip(layers, layers[1:]):
        nxt = []
        for d in options[lid]:
            pick = None
            for acc, keys, seq in best:
                total = acc + shuffle(prev, lid, seq[-1], d) + cost(lid, d)
                cand = (total, keys + (_grid_key(d),), seq)
                if pick is None or cand[:2] < pick[:2]:
                    pick = cand
            nxt.append((pick[0], pick[1], pick[2] + [d]))
        best = nxt
    total, _, seq = min(best, key=lambda b: b[:2])
    return total, seq


def plan_line(
    g: NetworkGraph,
    cands: CandidateSet,
    m: MachineModel,
    t: CostTable | None,
    *,
    interpolate: bool = False,
    cost: LayerCostFn | None = None,
    shuffle: ShuffleFn | None = None,
    mem_cap_bytes: int | None = None,
) -> Strategy:
    """Optimal strategy for a network without branches."""
    if not g.is_line():
        raise PlanningError("plan_line needs a network without branches; use plan_dag")
    lc, sc = model_costs(g, m, t, interpolate)
    cost, shuffle = cost or lc, shuffle or sc
    total, seq = shortest_path(g.ids, cands.candidates, cost, shuffle)
    return _finish(g, dict(zip(g.ids, seq)), total, cands, m, t, interpolate, cost, shuffle, mem_cap_bytes)


def _objective(g: NetworkGraph, assign, cost: LayerCostFn, shuffle: ShuffleFn) -> float:
    return sum(cost(l, d) for l, d in assign.items()) + sum(shuffle(p, c, assign[p], assign[c]) for p, c in g.edges())


def plan_dag(
    g: NetworkGraph,
    cands: CandidateSet,
    m: MachineModel,
    t: CostTable | None,
    *,
    interpolate: bool = False,
    cost: LayerCostFn | None = None,
    shuffle: ShuffleFn | None = None,
    mem_cap_bytes: int | None = None,
) -> Strategy:
    """Plan path by path, heaviest first, around already fixed layers.

    Path weights are each layer's cheapest candidate cost.  On later paths
    the layers fixed by earlier rounds become single-candidate vertices
    that add nothing but their shuffle edges; shuffles between a new layer
    and a fixed neighbour off the path are charged to the new layer.
    """
    lc, sc = model_costs(g, m, t, interpolate)
    cost, shuffle = cost or lc, shuffle or sc
    weight = {lid: min(cost(lid, d) for d in cands[lid]) for lid in g.ids}
    paths = longest_path_decomposition(g, weight)
    fixed: dict[str, LayerDistribution] = {}
    neighbours = {lid: [] for lid in g.ids}
    for p, c in g.edges():
        neighbours[p].append((p, c))
        neighbours[c].append((p, c))

    for path in paths:
        links = set(zip(path, path[1:]))
        opts = {lid: [fixed[lid]] if lid in fixed else list(cands[lid]) for lid in path}

        def path_cost(lid, d, links=links):
            if lid in fixed:
                return 0.0
            extra = 0.0
            for p, c in neighbours[lid]:
                if (p, c) in links:
                    continue
                if p == lid and c in fixed:
                    extra += shuffle(p, c, d, fixed[c])
                elif c == lid and p in fixed:
                    extra += shuffle(p, c, fixed[p], d)
            return cost(lid, d) + extra

        _, seq = shortest_path(path, opts, path_cost, shuffle)
        for lid, d in zip(path, seq):
            fixed.setdefault(lid, d)

    assign = {lid: fixed[lid] for lid in g.ids}
    total = _objective(g, assign, cost, shuffle)
    return _finish(g, assign, total, cands, m, t, interpolate, cost, shuffle, mem_cap_bytes)


def plan(g: NetworkGraph, m: MachineModel, t: CostTable | None, *, mem_cap_bytes: int | None = None,
         max_candidates: int = DEFAULT_MAX_CANDIDATES, interpolate: bool = False) -> Strategy:
    cands = generate_candidates(g, m, mem_cap_bytes, max_candidates)
    fn = plan_line if g.is_line() else plan_dag
    return fn(g, cands, m, t, interpolate=interpolate, mem_cap_bytes=mem_cap_bytes)


def _finish(g, assign, total, cands, m, t, interpolate, cost, shuffle, cap) -> Strategy:
    if t is None:
        # custom weights without a cost table: report the path objective only
        mem = memory_estimate(g, assign, m.word_bytes).per_rank
        return Strategy(assign, total, memory=mem, path_cost=total)
    s = evaluate(g, assign, m, t, interpolate, total)
    if cap is not None:
        s = _repair_memory(g, s, cands, m, t, interpolate, cost, shuffle, cap)
    return s


def _repair_memory(g, s: Strategy, cands: CandidateSet, m, t, interpolate, cost, shuffle, cap: int) -> Strategy:
    """Swap single layers to lighter candidates until every rank fits the cap."""
    assign = dict(s.assignment)
    current = max(s.memory)
    while current > cap:
        best = None
        for lid in g.ids:
            for d in cands[lid]:
                if d == assign[lid]:
                    continue
                trial = {**assign, lid: d}
                mem = memory_estimate(g, trial, m.word_bytes).max_rank_bytes
                if mem >= current:
                    continue
                key = (_objective(g, trial, cost, shuffle), mem, g.ids.index(lid), candidate_order(d))
                if best is None or key < best[0]:
                    best = (key, trial, mem)
        if best is None:
            raise PlanningError(f"no strategy found within memory cap {cap} B (best reaches {current} B per rank)")
        _, assign, current = best
    if assign == s.assignment:
        return s
    return evaluate(g, assign, m, t, interpolate, _objective(g, assign, cost, shuffle))
