import json

import numpy as np
import pytest

from spatialpar.cli import main
from spatialpar.netgraph import load_network
from spatialpar.perfmodel import load_cost_table, load_machine, network_cost, synthetic_cost_table
from spatialpar.planner import cost_keys, generate_candidates, load_strategy

from conftest import CONFIGS

TINY = str(CONFIGS / "tiny.json")
LASSEN4 = str(CONFIGS / "lassen4.json")


@pytest.fixture
def tiny_costs(tmp_path):
    g = load_network(TINY)
    keys = []
    for p in (1, 2, 4):
        keys += cost_keys(g, generate_candidates(g, load_machine(LASSEN4).with_ranks(p)))
    path = tmp_path / "costs.csv"
    synthetic_cost_table(keys, 1e-11, 1e-5).write_csv(path)
    return str(path)


def _strategy(tmp_path, grid, net=TINY):
    g = load_network(net)
    n, h, w = grid
    doc = {"ranks": n * h * w, "layers": {lid: {"n_parts": n, "h_parts": h, "w_parts": w} for lid in g.ids}}
    path = tmp_path / f"s{n}{h}{w}.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_verify_passes(capsys):
    assert main(["verify", "--net", TINY, "--ranks", "1,4", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "seed=3" in out and "FAIL" not in out
    assert "P=4 uniform 1x2x2" in out


def test_verify_given_strategy(tmp_path, capsys):
    assert main(["verify", "--net", TINY, "--strategy", _strategy(tmp_path, (2, 2, 1))]) == 0
    assert "1/1 strategies match" in capsys.readouterr().out


def test_verify_reports_corrupted_halo(tmp_path, capsys):
    code = main(["verify", "--net", TINY, "--strategy", _strategy(tmp_path, (1, 2, 2)), "--debug-corrupt-halo"])
    assert code == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "at index (" in out


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["verify", "--net", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert main(["verify", "--net", str(bad)]) == 2
    with pytest.raises(SystemExit) as e:
        main(["verify"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["verify", "--net", TINY, "--ranks", "two"])
    assert e.value.code == 2
    wrong = tmp_path / "wrong.json"
    wrong.write_text(json.dumps({"ranks": 1, "layers": {"input": {"n_parts": 1}}}))
    assert main(["verify", "--net", TINY, "--strategy", str(wrong)]) == 2
    assert "does not match the network" in capsys.readouterr().err


def test_plan_writes_strategy(tmp_path, tiny_costs, capsys):
    out = tmp_path / "plan.json"
    code = main(["plan", "--net", TINY, "--machine", LASSEN4, "--costs", tiny_costs, "--out", str(out)])
    assert code == 0
    text = capsys.readouterr().out
    assert "conv1" in text and "total" in text
    s = load_strategy(out)
    g = load_network(TINY)
    assert set(s.assignment) == set(g.ids) and s.nranks == 4
    nc = network_cost(g, s.assignment, load_machine(LASSEN4), load_cost_table(tiny_costs))
    assert s.predicted == nc.total


def test_plan_missing_cost_and_infeasible_cap(tmp_path, tiny_costs, capsys):
    empty = tmp_path / "empty.csv"
    empty.write_text("op,n,c,h,w,f,k,s,pad,seconds\n")
    assert main(["plan", "--net", TINY, "--machine", LASSEN4, "--costs", str(empty),
                 "--out", str(tmp_path / "p.json")]) == 2
    assert "no cost-table entry for op=" in capsys.readouterr().err
    assert main(["plan", "--net", TINY, "--machine", LASSEN4, "--costs", tiny_costs, "--mem-cap-bytes", "100",
                 "--out", str(tmp_path / "p.json")]) == 1
    assert "memory cap" in capsys.readouterr().err


def test_plan_with_memory_cap_rejects_pure_sample(tmp_path, capsys):
    mesh = str(CONFIGS / "mesh2k.json")
    g = load_network(mesh)
    m = load_machine(LASSEN4)
    keys = cost_keys(g, generate_candidates(g, m))
    costs = tmp_path / "mesh.csv"
    synthetic_cost_table(keys, 1e-13, 1e-5).write_csv(costs)
    out = tmp_path / "mesh_plan.json"
    cap = str(16 * 2**30)
    assert main(["plan", "--net", mesh, "--machine", LASSEN4, "--costs", str(costs), "--ranks", "2",
                 "--mem-cap-bytes", cap, "--out", str(out)]) == 1
    assert main(["plan", "--net", mesh, "--machine", LASSEN4, "--costs", str(costs),
                 "--mem-cap-bytes", cap, "--out", str(out)]) == 0
    s = load_strategy(out)
    assert all(d.h_parts * d.w_parts > 1 for d in s.assignment.values())
    assert max(s.memory) <= 16 * 2**30


def test_estimate_matches_network_cost(tmp_path, tiny_costs, capsys):
    strat = _strategy(tmp_path, (2, 1, 2))
    out = tmp_path / "est.json"
    assert main(["estimate", "--net", TINY, "--strategy", strat, "--machine", LASSEN4, "--costs", tiny_costs,
                 "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    g = load_network(TINY)
    nc = network_cost(g, load_strategy(strat).assignment, load_machine(LASSEN4), load_cost_table(tiny_costs))
    assert doc["total"] == nc.total
    assert doc["total"] == pytest.approx(doc["compute"] + doc["shuffle"] + doc["allreduce_exposed"], rel=1e-12)


def test_single_rank_estimate_is_kernel_time_sum(tmp_path, tiny_costs):
    out = tmp_path / "est.json"
    assert main(["estimate", "--net", TINY, "--strategy", _strategy(tmp_path, (1, 1, 1)), "--machine", LASSEN4,
                 "--costs", tiny_costs, "--out", str(out)]) == 0
    t = load_cost_table(tiny_costs)
    g = load_network(TINY)
    want = 0.0
    for lid in ("conv1", "conv2"):
        l, s = g.layer(lid), g.in_shapes[lid]
        for op in ("fp", "bp-data", "bp-filter"):
            want += t.lookup((op, s.n, s.c, s.h, s.w, l.conv.filters, l.conv.kernel, l.conv.stride, l.conv.padding))
    assert json.loads(out.read_text())["total"] == pytest.approx(want, rel=1e-12)


def test_benchgen_writes_table(tmp_path, capsys):
    shapes = tmp_path / "shapes.csv"
    shapes.write_text("n,c,h,w,f,k,s,pad\n1,2,8,8,2,3,1,1\n")
    out = tmp_path / "t.csv"
    assert main(["benchgen", "--shapes", str(shapes), "--repetitions", "2", "--out", str(out)]) == 0
    assert len(load_cost_table(out)) == 3
    assert main(["benchgen", "--out", str(out)]) == 2
    assert main(["benchgen", "--net", TINY, "--out", str(out)]) == 2


def test_simulate_log_and_bytes(tmp_path, capsys):
    strat = _strategy(tmp_path, (1, 2, 2))
    log1, log2, dump = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "t.npz"
    assert main(["simulate", "--net", TINY, "--strategy", strat, "--log", str(log1), "--dump", str(dump)]) == 0
    assert "MISMATCH" not in capsys.readouterr().out
    assert main(["simulate", "--net", TINY, "--strategy", strat, "--log", str(log2)]) == 0
    assert log1.read_text() == log2.read_text()
    with np.load(dump) as arrays:
        assert arrays["y/conv2"].shape == load_network(TINY).out_shapes["conv2"].as_tuple()


def test_sample_strategy_logs_no_halo(tmp_path):
    log = tmp_path / "e.csv"
    assert main(["simulate", "--net", TINY, "--strategy", _strategy(tmp_path, (2, 1, 1)), "--log", str(log)]) == 0
    assert ":halo:" not in log.read_text()
    assert main(["simulate", "--net", TINY, "--strategy", _strategy(tmp_path, (1, 2, 2)), "--log", str(log)]) == 0
    assert ":halo:" in log.read_text()
