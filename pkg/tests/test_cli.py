import csv
import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import ecstore
from ecstore import simulator
from ecstore.bound import homogeneous_closed_form
from ecstore.cli import EXIT_BOUND_VIOLATION, CliError, SweepSpec, main
from ecstore.model import FileClass, JlcmParams, Scenario, ShiftedExponential, StorageNode
from ecstore.queueing import mg1_waiting_moments

from conftest import exp_node

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def write_scenario(tmp_path, sc, name="sc.json"):
    p = tmp_path / name
    p.write_text(json.dumps(sc.to_dict()))
    return p


def run(tmp_path, *argv, name="out.json"):
    out = tmp_path / name
    code = main([*map(str, argv), "--out", str(out)])
    doc = json.loads(out.read_text()) if out.exists() else None
    return code, doc


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def small(theta=0.5, **opt):
    nodes = [exp_node(1, 1.0, 1.0), exp_node(2, 1.3, 0.8),
             StorageNode.from_dist(3, ShiftedExponential(0.2, 2.0), cost=1.2), exp_node(4, 0.9, 1.0)]
    files = [FileClass(1, 2, 0.3), FileClass(2, 1, 0.4), FileClass(3, 3, 0.15)]
    return Scenario(nodes, files, JlcmParams(theta=theta, **opt))


class TestValidate:
    def test_ok(self, tmp_path):
        code, doc = run(tmp_path, "validate", write_scenario(tmp_path, small()))
        assert code == 0
        assert doc["result"]["valid"] and doc["result"]["nodes"] == 4 and doc["result"]["files"] == 3

    def test_bad_document(self, tmp_path):
        bad = small().to_dict()
        bad["files"][0]["k"] = 9
        p = tmp_path / "bad.json"
        p.write_text(json.dumps(bad))
        code, doc = run(tmp_path, "validate", p)
        assert code == 2 and doc is None

    def test_unreadable(self, tmp_path):
        assert run(tmp_path, "validate", tmp_path / "missing.json")[0] == 2
        p = tmp_path / "broken.json"
        p.write_text("{not json")
        assert run(tmp_path, "validate", p)[0] == 2

    def test_shipped_configs(self, tmp_path):
        for name in ("small.json", "testbed.json"):
            assert run(tmp_path, "validate", CONFIGS / name)[0] == 0


class TestBound:
    def test_uniform_symmetric_matches_closed_form(self, tmp_path):
        k, m, lam = 3, 6, 0.9
        nodes = [exp_node(j, 1.0) for j in range(1, m + 1)]
        sc = Scenario(nodes, [FileClass(1, k, lam)])
        code, doc = run(tmp_path, "bound", write_scenario(tmp_path, sc), "--uniform")
        assert code == 0
        w = mg1_waiting_moments(nodes[0], lam * k / m)
        expected = homogeneous_closed_form(k, w.mean, w.variance)
        assert doc["result"]["files"][0]["bound"] == pytest.approx(expected, rel=1e-6)
        assert doc["params"]["pi"] == "uniform"

    def test_single_node_is_mg1_sojourn(self, tmp_path):
        n = StorageNode.from_dist(1, ShiftedExponential(0.3, 2.0))
        sc = Scenario([n], [FileClass(1, 1, 0.7)])
        pi = tmp_path / "pi.json"
        pi.write_text("[[1.0]]")
        code, doc = run(tmp_path, "bound", write_scenario(tmp_path, sc), "--pi", pi)
        assert code == 0
        assert doc["result"]["files"][0]["bound"] == pytest.approx(mg1_waiting_moments(n, 0.7).mean, rel=1e-12)

    def test_unstable_names_node(self, tmp_path, capsys):
        sc = Scenario([exp_node(1, 2.0), exp_node(7, 1.0)], [FileClass(1, 2, 1.2)])
        code, _ = run(tmp_path, "bound", write_scenario(tmp_path, sc), "--uniform")
        assert code == 3
        assert "7" in capsys.readouterr().err

    def test_infeasible_pi(self, tmp_path):
        pi = tmp_path / "pi.json"
        pi.write_text(json.dumps([[0.5, 0.5, 0.5, 0.0], [1, 0, 0, 0], [1, 1, 0, 0]]))
        assert run(tmp_path, "bound", write_scenario(tmp_path, small()), "--pi", pi)[0] == 2

    def test_needs_pi_source(self, tmp_path):
        assert run(tmp_path, "bound", write_scenario(tmp_path, small()))[0] == 2


class TestOptimize:
    def test_solution_and_trace(self, tmp_path):
        trace = tmp_path / "trace.csv"
        code, doc = run(tmp_path, "optimize", write_scenario(tmp_path, small()), "--trace", trace)
        assert code == 0
        res = doc["result"]
        assert set(res) >= {"pi", "z", "n", "placement", "objective", "converged"}
        sc = small()
        pi = np.array(res["pi"])
        np.testing.assert_allclose(pi.sum(axis=1), sc.k, atol=1e-9)
        assert all(k <= n <= sc.m for k, n in zip(sc.k, res["n"]))
        rows = read_csv(trace)
        assert list(rows[0]) == ["iter", "objective", "modified_objective", "max_rho"]
        mod = [float(r["modified_objective"]) for r in rows]
        assert all(b <= a + 1e-9 for a, b in zip(mod, mod[1:]))

    def test_theta_zero_spreads(self, tmp_path):
        code, doc = run(tmp_path, "optimize", write_scenario(tmp_path, small()), "--theta", "0")
        assert code == 0
        sc = small()
        assert doc["result"]["n"] == [sc.m] * sc.r
        assert doc["result"]["objective"]["cost_term"] == pytest.approx(sc.r * sc.cost.sum())

    def test_flags_resolved_in_params(self, tmp_path):
        code, doc = run(tmp_path, "optimize", write_scenario(tmp_path, small()),
                        "--theta", "3", "--beta", "50", "--epsilon", "0.001")
        assert code == 0
        assert doc["params"]["optimizer"] | {"theta": 3.0, "beta": 50.0, "epsilon": 0.001} == doc["params"]["optimizer"]

    def test_non_convergence(self, tmp_path):
        trace = tmp_path / "trace.csv"
        sc = small(theta=0.5, epsilon=1e-300, max_outer_iters=1)
        code, doc = run(tmp_path, "optimize", write_scenario(tmp_path, sc), "--trace", trace)
        assert code == 4
        assert doc["result"]["converged"] is False
        assert len(read_csv(trace)) == 2

    def test_bad_flag_value(self, tmp_path):
        assert run(tmp_path, "optimize", write_scenario(tmp_path, small()), "--beta", "0.5")[0] == 2

    def test_infeasible_workload(self, tmp_path):
        sc = Scenario([exp_node(1, 1.0), exp_node(2, 1.0)], [FileClass(1, 1, 2.5)])
        assert run(tmp_path, "optimize", write_scenario(tmp_path, sc))[0] == 3

    def test_init_from_solution(self, tmp_path):
        scp = write_scenario(tmp_path, small())
        run(tmp_path, "optimize", scp, name="first.json")
        code, doc = run(tmp_path, "optimize", scp, "--init", tmp_path / "first.json")
        assert code == 0 and doc["result"]["converged"]


class TestSweep:
    def test_monotone_tradeoff(self, tmp_path):
        table = tmp_path / "sweep.csv"
        code, doc = run(tmp_path, "sweep", write_scenario(tmp_path, small()),
                        "--thetas", "0.1,1,5,50", "--csv", table)
        assert code == 0
        rows = read_csv(table)
        assert list(rows[0]) == ["theta", "latency_term", "cost_term", "total", "mean_n", "status"]
        assert [r["status"] for r in rows] == ["ok"] * 4
        cost = [float(r["cost_term"]) for r in rows]
        lat = [float(r["latency_term"]) for r in rows]
        eps = small().optimizer.epsilon
        assert all(b <= a + eps for a, b in zip(cost, cost[1:]))
        assert all(b >= a - eps for a, b in zip(lat, lat[1:]))
        assert cost[0] >= cost[-1]
        assert doc["params"]["warm_start"] is True

    def test_single_theta_matches_optimize(self, tmp_path):
        scp = write_scenario(tmp_path, small())
        _, opt = run(tmp_path, "optimize", scp, "--theta", "2", name="opt.json")
        _, sw = run(tmp_path, "sweep", scp, "--thetas", "2", "--csv", tmp_path / "s.csv", name="sw.json")
        row = sw["result"]["rows"][0]
        assert row["total"] == opt["result"]["objective"]["total"]
        assert row["n"] == opt["result"]["n"]

    def test_parallel_matches_sequential(self, tmp_path):
        scp = write_scenario(tmp_path, small())
        _, a = run(tmp_path, "sweep", scp, "--thetas", "0.5,5", "--csv", tmp_path / "a.csv",
                   "--no-warm-start", name="a.json")
        _, b = run(tmp_path, "sweep", scp, "--thetas", "0.5,5", "--csv", tmp_path / "b.csv",
                   "--no-warm-start", "--jobs", "2", name="b.json")
        assert a["result"] == b["result"]

    def test_row_level_failure(self, tmp_path):
        sc = Scenario([exp_node(1, 1.0), exp_node(2, 1.0)], [FileClass(1, 1, 2.5)])
        table = tmp_path / "s.csv"
        code, doc = run(tmp_path, "sweep", write_scenario(tmp_path, sc), "--thetas", "1,2", "--csv", table)
        assert code == 0
        assert all(r["status"].startswith("error") for r in read_csv(table))

    @pytest.mark.parametrize("thetas", [(), (1.0, 1.0), (2.0, 1.0), (-1.0, 2.0)])
    def test_spec_validation(self, thetas):
        with pytest.raises(CliError):
            SweepSpec(thetas, Path("x.csv"))

    def test_unordered_cli(self, tmp_path):
        code, _ = run(tmp_path, "sweep", write_scenario(tmp_path, small()), "--thetas", "5,1",
                      "--csv", tmp_path / "s.csv")
        assert code == 2


class TestDecompose:
    def test_round_trip(self, tmp_path):
        scp = write_scenario(tmp_path, small())
        run(tmp_path, "optimize", scp, name="sol.json")
        code, doc = run(tmp_path, "decompose", scp, "--pi", tmp_path / "sol.json")
        assert code == 0
        pi = np.array(json.loads((tmp_path / "sol.json").read_text())["result"]["pi"])
        sc = small()
        for i, f in enumerate(doc["result"]["files"]):
            marg = np.zeros(sc.m)
            for atom in f["atoms"]:
                assert len(atom["nodes"]) == f["k"]
                for nid in atom["nodes"]:
                    marg[nid - 1] += atom["prob"]
            np.testing.assert_allclose(marg, pi[i], atol=1e-9)
            assert f["max_marginal_error"] <= 1e-9


class TestSimulate:
    def args(self, tmp_path):
        return ["simulate", CONFIGS / "small.json", "--uniform", "--horizon", "3000", "--warmup", "100",
                "--replications", "1"]

    def test_byte_identical(self, tmp_path):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        assert main([*map(str, self.args(tmp_path)), "--out", str(a)]) == 0
        assert main([*map(str, self.args(tmp_path)), "--out", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_seed_changes_output(self, tmp_path):
        _, a = run(tmp_path, *self.args(tmp_path), "--seed", "1", name="a.json")
        _, b = run(tmp_path, *self.args(tmp_path), "--seed", "2", name="b.json")
        assert a["result"] != b["result"] and a["params"]["simulator"]["seed"] == 1

    def test_latency_csv(self, tmp_path):
        lat = tmp_path / "lat.csv"
        code, doc = run(tmp_path, *self.args(tmp_path), "--latency-csv", lat)
        rows = read_csv(lat)
        assert code == 0 and len(rows) == doc["result"]["report"]["completed"]
        assert list(rows[0]) == ["file_id", "arrival_time", "latency"]

    def test_check_bound_on_optimized(self, tmp_path):
        scp = CONFIGS / "small.json"
        run(tmp_path, "optimize", scp, name="sol.json")
        code, doc = run(tmp_path, "simulate", scp, "--pi", tmp_path / "sol.json", "--check-bound",
                        "--horizon", "20000", "--warmup", "500")
        assert code == 0
        assert doc["result"]["bound_check"]["violations"] == 0

    def test_violation_exit_code(self, tmp_path, monkeypatch):
        real = simulator.file_bounds

        def shrunk(pi, sc):
            return [replace(b, bound=0.0) for b in real(pi, sc)]

        monkeypatch.setattr(simulator, "file_bounds", shrunk)
        code, doc = run(tmp_path, *self.args(tmp_path), "--check-bound")
        assert code == EXIT_BOUND_VIOLATION
        assert doc["result"]["bound_check"]["violations"] > 0

    def test_central_queue(self, tmp_path):
        code, doc = run(tmp_path, *self.args(tmp_path), "--policy", "central_queue")
        assert code == 0 and doc["result"]["report"]["policy"] == "central_queue"
        assert run(tmp_path, *self.args(tmp_path), "--policy", "central_queue", "--check-bound")[0] == 2

    def test_moments_only_node(self, tmp_path):
        raw = json.loads((CONFIGS / "small.json").read_text())
        raw["nodes"][0]["service"] = {"moments": {"mean": 1.0, "variance": 1.0, "m3": 6.0}}
        p = tmp_path / "m.json"
        p.write_text(json.dumps(raw))
        assert run(tmp_path, "simulate", p, "--uniform", "--horizon", "100")[0] == 2

    def test_bad_window(self, tmp_path):
        assert run(tmp_path, "simulate", CONFIGS / "small.json", "--uniform",
                   "--horizon", "10", "--warmup", "20")[0] == 2


def test_documents_carry_version(tmp_path):
    scp = write_scenario(tmp_path, small())
    docs = [
        run(tmp_path, "validate", scp, name="1.json")[1],
        run(tmp_path, "bound", scp, "--uniform", name="2.json")[1],
        run(tmp_path, "optimize", scp, name="3.json")[1],
        run(tmp_path, "sweep", scp, "--thetas", "1", "--csv", tmp_path / "s.csv", name="4.json")[1],
        run(tmp_path, "decompose", scp, "--uniform", name="5.json")[1],
    ]
    for doc in docs:
        assert doc["schema_version"] == 1 and doc["version"] == ecstore.__version__
        assert doc["tool"] == "ecstore" and "scenario" in doc["params"]


def test_non_finite_floats_serialized(tmp_path):
    # k = 1 files have z = -inf; the document must remain valid JSON
    sc = Scenario([exp_node(1, 1.0), exp_node(2, 1.5)], [FileClass(1, 1, 0.4)])
    code, doc = run(tmp_path, "bound", write_scenario(tmp_path, sc), "--uniform")
    assert code == 0
    assert doc["result"]["files"][0]["z"] == "-inf"
    assert math.isfinite(doc["result"]["files"][0]["bound"])


def test_stdout_default(capsys):
    assert main(["validate", str(CONFIGS / "small.json")]) == 0
    assert json.loads(capsys.readouterr().out)["command"] == "validate"
