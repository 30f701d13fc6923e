"""Command-line front end: verify, plan, estimate, benchgen, simulate."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import kernels
from .netgraph import NetworkError, NetworkGraph, parse_network
from .perfmodel import (
    ConvShape,
    CostTable,
    MachineModel,
    MissingCostError,
    benchgen,
    load_cost_table,
    load_machine,
    memory_estimate,
    network_cost,
    read_shapes,
    traffic_bytes,
)
from .planner import (
    DEFAULT_MAX_CANDIDATES,
    PlanningError,
    Strategy,
    cost_keys,
    generate_candidates,
    plan_dag,
    plan_line,
)
from .simexec import SimulationError, compare_to_reference, reference_step, run_step
from .synth import random_tensors, verification_strategies

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
DEFAULT_TOLERANCE = 1e-9


class UsageError(Exception):
    pass


# -- loading ---------------------------------------------------------------------


def _read_json(path: str, what: str):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise UsageError(f"cannot read {what} {path!r}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} {path!r} is not valid JSON: {e}") from None


def _load_net(path: str, batch: int | None = None) -> NetworkGraph:
    doc = _read_json(path, "network spec")
    if batch is not None:
        doc = dict(doc)
        doc["layers"] = [dict(l, n=batch) if l.get("kind") == "input" else l for l in doc.get("layers", [])]
    try:
        return parse_network(doc)
    except (NetworkError, KeyError, TypeError) as e:
        raise UsageError(f"network spec {path!r}: {e}") from None


def _load_machine(path: str, ranks: int | None) -> MachineModel:
    try:
        m = load_machine(path)
    except OSError as e:
        raise UsageError(f"cannot read machine model {path!r}: {e.strerror}") from None
    except (ValueError, TypeError) as e:
        raise UsageError(f"machine model {path!r}: {e}") from None
    return m.with_ranks(ranks) if ranks else m


def _load_costs(path: str | None) -> CostTable | None:
    if path is None:
        return None
    try:
        return load_cost_table(path)
    except OSError as e:
        raise UsageError(f"cannot read cost table {path!r}: {e.strerror}") from None
    except ValueError as e:
        raise UsageError(f"cost table {path!r}: {e}") from None


def _load_strategy(path: str, g: NetworkGraph) -> Strategy:
    try:
        s = Strategy.from_dict(_read_json(path, "strategy"))
    except ValueError as e:
        raise UsageError(f"strategy {path!r}: {e}") from None
    missing = [lid for lid in g.ids if lid not in s.assignment]
    extra = [lid for lid in s.assignment if lid not in g.ids]
    if missing or extra:
        raise UsageError(f"strategy {path!r} does not match the network (missing {missing}, unknown {extra})")
    return s


def _single_ranks(a) -> int | None:
    if a.ranks is None:
        return None
    if len(a.ranks) != 1:
        raise UsageError("this command takes a single --ranks value")
    return a.ranks[0]


def _fmt_s(x: float) -> str:
    return f"{x * 1e3:10.4f}"


def _fmt_b(x: float) -> str:
    for unit in ("B", "KiB", "MiB", "GiB"):
        if abs(x) < 1024 or unit == "GiB":
            return f"{x:8.1f} {unit}" if unit != "B" else f"{int(x):8d} B  "
        x /= 1024
    return str(x)


# -- verify ----------------------------------------------------------------------


def cmd_verify(a) -> int:
    g = _load_net(a.net, a.batch)
    print(f"verify {a.net} seed={a.seed} tolerance={a.tolerance:g} kernels={kernels.BACKEND}")
    inputs, weights, seeds = random_tensors(g, a.seed)
    if a.strategy:
        runs = [(None, _load_strategy(a.strategy, g).assignment)]
    else:
        runs = []
        for p in a.ranks or [1]:
            strategies = verification_strategies(g, p, a.mixed, a.seed)
            if not strategies:
                print(f"P={p}: no valid distribution for some layer")
                return EXIT_FAIL
            runs += [(p, s) for s in strategies[: a.max_candidates * (1 + a.mixed)]]
    failed = 0
    for _, assign in runs:
        try:
            res = run_step(g, assign, inputs, weights, seeds, debug_corrupt_halo=a.debug_corrupt_halo)
        except SimulationError as e:
            print(f"FAIL {_describe(g, assign)}: {e}")
            failed += 1
            continue
        ref = reference_step(g, inputs, weights, seeds, assign)
        errs = compare_to_reference(res, ref)
        worst = {k: max((e.rel_error for e in errs if e.tensor == k), default=0.0) for k in ("y", "dx", "dw")}
        ok = all(v <= a.tolerance for v in worst.values())
        failed += not ok
        print(f"{'pass' if ok else 'FAIL'} {_describe(g, assign)}  "
              + "  ".join(f"{k}={v:.2e}" for k, v in worst.items()))
        if not ok:
            for e in sorted(errs, key=lambda e: -e.rel_error)[:5]:
                if e.rel_error > a.tolerance:
                    print(f"     {e.tensor} of {e.layer}: rel. error {e.rel_error:.3e} at index {e.worst_index}")
    print(f"{len(runs) - failed}/{len(runs)} strategies match the serial reference")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def _describe(g: NetworkGraph, assign) -> str:
    grids = [str(assign[lid]) for lid in g.ids]
    if len(set(grids)) == 1:
        return f"P={assign[g.ids[0]].nranks} uniform {grids[0]}"
    return f"P={assign[g.ids[0]].nranks} mixed " + ",".join(grids)


# -- plan / estimate ---------------------------------------------------------------


def _layer_table(g: NetworkGraph, s: Strategy, nc, mem) -> list[str]:
    shuffle_in = {lid: 0.0 for lid in g.ids}
    for e in nc.shuffles:
        shuffle_in[e.dst] += e.total
    head = f"{'layer':<22}{'kind':<18}{'dist':<9}{'FP ms':>10}{'BPx ms':>10}{'BPw ms':>10}{'BPa ms':>10}{'shuffle ms':>11}{'memory':>14}"
    rows = [head, "-" * len(head)]
    for l in g.layers:
        c = nc.layers[l.id]
        rows.append(
            f"{l.id[:21]:<22}{l.kind:<18}{str(s.assignment[l.id]):<9}{_fmt_s(c.fp)}{_fmt_s(c.bp_data)}"
            f"{_fmt_s(c.bp_weights)}{_fmt_s(c.bp_allreduce)}{_fmt_s(shuffle_in[l.id]):>11}{_fmt_b(mem.layer_bytes(l.id)):>14}"
        )
    return rows


def _summary(nc, mem) -> list[str]:
    return [
        f"compute (exposed)    {_fmt_s(nc.compute)} ms",
        f"shuffles             {_fmt_s(nc.shuffle)} ms",
        f"allreduce (exposed)  {_fmt_s(nc.allreduce_exposed)} ms",
        f"total                {_fmt_s(nc.total)} ms",
        f"peak memory per rank {_fmt_b(mem.max_rank_bytes)}",
    ]


def cmd_plan(a) -> int:
    g = _load_net(a.net, a.batch)
    m = _load_machine(a.machine, _single_ranks(a))
    t = _load_costs(a.costs)
    cands = generate_candidates(g, m, a.mem_cap_bytes, a.max_candidates)
    fn = plan_line if g.is_line() else plan_dag
    s = fn(g, cands, m, t, interpolate=a.interpolate_costs, mem_cap_bytes=a.mem_cap_bytes)
    nc = network_cost(g, s.assignment, m, t, a.interpolate_costs)
    mem = memory_estimate(g, s.assignment, m.word_bytes)
    print(f"plan {a.net} P={m.ranks} seed={a.seed}" + (f" cap={a.mem_cap_bytes} B" if a.mem_cap_bytes else ""))
    print("\n".join(_layer_table(g, s, nc, mem)))
    print("\n".join(_summary(nc, mem)))
    with open(a.out, "w") as f:
        f.write(s.dumps() + "\n")
    print(f"strategy written to {a.out}")
    return EXIT_OK


def cmd_estimate(a) -> int:
    g = _load_net(a.net, a.batch)
    s = _load_strategy(a.strategy, g)
    m = _load_machine(a.machine, s.nranks)
    t = _load_costs(a.costs)
    nc = network_cost(g, s.assignment, m, t, a.interpolate_costs)
    mem = memory_estimate(g, s.assignment, m.word_bytes)
    print(f"estimate {a.net} with {a.strategy} P={m.ranks}")
    print("\n".join(_layer_table(g, s, nc, mem)))
    print("\n".join(_summary(nc, mem)))
    cats = nc.category_bytes()
    if cats:
        print(f"communicated bytes ({m.word_bytes}-byte words)")
        for lid in g.ids:
            if lid in cats:
                print(f"  {lid:<22}" + "  ".join(f"{k}={v}" for k, v in sorted(cats[lid].items())))
    if a.out:
        with open(a.out, "w") as f:
            json.dump({**nc.breakdown(), "memory_per_rank": mem.per_rank, "bytes": cats}, f, indent=2)
    return EXIT_OK


# -- benchgen / simulate -----------------------------------------------------------


def cmd_benchgen(a) -> int:
    shapes: list[ConvShape] = []
    if a.shapes:
        try:
            with open(a.shapes) as f:
                shapes = read_shapes(f.read())
        except OSError as e:
            raise UsageError(f"cannot read shapes file {a.shapes!r}: {e.strerror}") from None
        except ValueError as e:
            raise UsageError(f"shapes file {a.shapes!r}: {e}") from None
    if a.net:
        g = _load_net(a.net, a.batch)
        if not a.ranks:
            raise UsageError("--net needs --ranks to know which local shapes to time")
        for p in a.ranks:
            m = MachineModel(p)
            cands = generate_candidates(g, m, None, a.max_candidates)
            shapes += [ConvShape(*k[1:]) for k in cost_keys(g, cands) if k[0] != "fc"]
    if not shapes:
        raise UsageError("benchgen needs --shapes and/or --net with --ranks")
    shapes = sorted(set(shapes))
    print(f"benchgen: {len(shapes)} shapes x 3 ops, {a.warmup} warmup + {a.repetitions} timed runs, "
          f"kernels={kernels.BACKEND}")
    t = benchgen(shapes, a.repetitions, a.warmup, a.seed)
    t.write_csv(a.out)
    print(f"cost table with {len(t)} entries written to {a.out}")
    return EXIT_OK


def cmd_simulate(a) -> int:
    g = _load_net(a.net, a.batch)
    s = _load_strategy(a.strategy, g)
    inputs, weights, seeds = random_tensors(g, a.seed)
    res = run_step(g, s.assignment, inputs, weights, seeds, debug_corrupt_halo=a.debug_corrupt_halo)
    res.log.write_csv(a.log)
    print(f"simulate {a.net} with {a.strategy} P={s.nranks} seed={a.seed}: {len(res.log)} events -> {a.log}")
    if a.dump:
        arrays = {}
        for lid in g.ids:
            arrays[f"y/{lid}"] = res.gathered("y", lid)
            arrays[f"dx/{lid}"] = res.gathered("dx", lid)
            if lid in res.dw:
                arrays[f"dw/{lid}"] = res.dw[lid]
        np.savez(a.dump, **arrays)
        print(f"gathered tensors written to {a.dump}")
    # compare the logged halo/shuffle traffic with the model, in 8-byte words
    got = {lid: {k: v for k, v in row.items() if k != "collective"} for lid, row in res.log.category_bytes().items()}
    got = {lid: row for lid, row in got.items() if row}
    expected = traffic_bytes(g, s.assignment, 8)
    print(f"{'layer':<22}{'category':<12}{'logged':>14}{'model':>14}")
    mismatch = 0
    for lid in g.ids:
        for cat in sorted(set(got.get(lid, {})) | set(expected.get(lid, {}))):
            lv, mv = got.get(lid, {}).get(cat, 0), expected.get(lid, {}).get(cat, 0)
            mismatch += lv != mv
            print(f"{lid[:21]:<22}{cat:<12}{lv:>14}{mv:>14}{'' if lv == mv else '  MISMATCH'}")
    coll = sum(row.get("collective", 0) for row in res.log.category_bytes().values())
    print(f"collective traffic: {coll} B")
    return EXIT_OK if mismatch == 0 else EXIT_FAIL


# -- argument parsing ------------------------------------------------------------------


def _ranks(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--ranks expects integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("--ranks values must be positive")
    return vals


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spatialpar", description="Spatial/sample parallel CNN training: verification, modelling and planning.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, net=True):
        if net:
            sp.add_argument("--net", required=True, help="network spec (JSON)")
            sp.add_argument("--batch", type=int, help="override the input mini-batch size N")
        sp.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("verify", help="compare the distributed step with the serial reference")
    common(v)
    v.add_argument("--ranks", type=_ranks, help="rank counts, comma separated (default 1)")
    v.add_argument("--strategy", help="check only this strategy file")
    v.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    v.add_argument("--mixed", type=int, default=0, help="extra random per-layer strategies per rank count")
    v.add_argument("--max-candidates", type=int, default=DEFAULT_MAX_CANDIDATES)
    v.add_argument("--debug-corrupt-halo", action="store_true", help="drop one halo row to exercise failure reporting")

    pl = sub.add_parser("plan", help="choose a distribution per layer")
    common(pl)
    pl.add_argument("--machine", required=True)
    pl.add_argument("--costs", required=True)
    pl.add_argument("--ranks", type=_ranks, help="override the machine's rank count")
    pl.add_argument("--mem-cap-bytes", type=int)
    pl.add_argument("--max-candidates", type=int, default=DEFAULT_MAX_CANDIDATES)
    pl.add_argument("--interpolate-costs", action="store_true", help="log-linear estimates for unmeasured shapes")
    pl.add_argument("--out", default="strategy.json")

    e = sub.add_parser("estimate", help="price a given strategy")
    common(e)
    e.add_argument("--strategy", required=True)
    e.add_argument("--machine", required=True)
    e.add_argument("--costs", required=True)
    e.add_argument("--interpolate-costs", action="store_true")
    e.add_argument("--out", help="write the breakdown as JSON")

    b = sub.add_parser("benchgen", help="time the local kernels into a cost table")
    b.add_argument("--shapes", help="CSV with header n,c,h,w,f,k,s,pad")
    b.add_argument("--net", help="also time every local shape this network needs")
    b.add_argument("--batch", type=int)
    b.add_argument("--ranks", type=_ranks)
    b.add_argument("--max-candidates", type=int, default=DEFAULT_MAX_CANDIDATES)
    b.add_argument("--repetitions", type=int, default=10)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True)

    s = sub.add_parser("simulate", help="run one step and export the event log")
    common(s)
    s.add_argument("--strategy", required=True)
    s.add_argument("--log", default="events.csv")
    s.add_argument("--dump", help="write gathered tensors to this .npz file")
    s.add_argument("--debug-corrupt-halo", action="store_true")
    return p


COMMANDS = {
    "verify": cmd_verify,
    "plan": cmd_plan,
    "estimate": cmd_estimate,
    "benchgen": cmd_benchgen,
    "simulate": cmd_simulate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except MissingCostError as e:
        print(f"error: {e} (run benchgen for this shape or pass --interpolate-costs)", file=sys.stderr)
        return EXIT_USAGE
    except PlanningError as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_FAIL
    except SimulationError as e:
        print(f"simulation failed: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
