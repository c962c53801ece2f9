import json
from pathlib import Path

import numpy as np
import pytest

from pilot.bench import (ROW_FIELDS, RunConfig, evaluate_problem, evaluate_problems, main, problem_rows,
                         read_tsv, record_satisfaction, resolve_config, run_constraint_satisfaction,
                         save_problem_set, table1, table2, write_tsv, CliError, EmptyProblemSet)
from pilot.costcon import cost, pack
from pilot.nlp import solve
from pilot.problem import EgoState
from pilot.sim import generate_problem_set
from pilot.warmstart import heuristic_init

from conftest import static_agent, straight_scene

DATA = Path(__file__).parent / "data"


def row(p, planner, status, cost_, total, winner=""):
    return {"problem": p, "planner": planner, "status": status, "iterations": 3, "final_cost": cost_,
            "max_violation": 0.0, "init_time": 0.0, "nlp_time": total, "total_time": total, "winner": winner}


def three_problem_rows():
    # problem 0: both converge; 1: only the expert; 2: only the network
    return [
        row(0, "constvel", "Converged", 2.0, 0.5), row(0, "expert", "Converged", 2.0, 1.0, "constvel"),
        row(0, "network", "Converged", 2.2, 0.2),
        row(1, "constvel", "Converged", 5.0, 0.5), row(1, "expert", "Converged", 5.0, 1.0, "constvel"),
        row(1, "network", "MaxIters", 9.0, 0.9),
        row(2, "constvel", "MaxIters", 7.0, 0.5), row(2, "expert", "MaxIters", 7.0, 1.0, "constvel"),
        row(2, "network", "Converged", 1.0, 0.1),
    ]


def test_table1_co_convergence_fixture():
    t = table1(three_problem_rows())
    assert t.problems == 3 and t.co_converged == 1
    pilot, expert = t.rows
    assert pilot["planner"] == "PILOT" and pilot["n"] == 1
    assert pilot["mean_final_cost"] == 2.2 and expert["mean_final_cost"] == 2.0
    assert pilot["std_total_time"] == 0.0 and expert["std_final_cost"] == 0.0
    assert t.faster_share_time == 1.0
    assert t.cost_ratio == pytest.approx(1.1)


def test_table2_fixture():
    t = {r["init"]: r for r in table2(three_problem_rows(), n_boot=20, seed=0)}
    assert t["network"]["solved_by_expert"] == 2
    assert t["network"]["converged"] == 1 and t["network"]["converged_pct"] == 50.0
    assert t["constvel"]["converged_pct"] == 100.0
    assert t["constvel"]["delta_nlp_time"] == 0.0 and t["constvel"]["delta_cost_pct"] == 0.0
    assert t["network"]["delta_nlp_time"] == pytest.approx(-0.3)
    assert t["network"]["delta_cost_pct"] == pytest.approx(10.0)
    # resamples drawn only from problem 1 leave the network without a converged solve
    assert t["network"]["fastest_share_time"] + t["constvel"]["fastest_share_time"] == 1.0
    assert t["network"]["fastest_share_time"] > 0.5


def test_tables_recomputable_from_file(tmp_path):
    rows = three_problem_rows()
    write_tsv(rows, tmp_path / "p.tsv", ROW_FIELDS)
    back = read_tsv(tmp_path / "p.tsv")
    typed = [{**r, "problem": int(r["problem"]), "iterations": int(r["iterations"]),
              **{k: float(r[k]) for k in ("final_cost", "max_violation", "init_time", "nlp_time", "total_time")}}
             for r in back]
    assert table1(typed).__dict__ == table1(rows).__dict__
    assert table2(typed, 10) == table2(rows, 10)


def test_evaluated_records(cfg):
    scenes = generate_problem_set(3, 50, "mixed", 20, 0.4, cfg)
    recs = evaluate_problems(scenes, cfg)
    rows = problem_rows(recs)
    for rec in recs:
        for rep in list(rec.members.values()) + [rec.expert]:
            assert cost(pack(rep.trajectory), rec.scene, cfg) == pytest.approx(rep.final_cost, rel=1e-9, abs=1e-12)
    exp = [r for r in rows if r["planner"] == "expert"]
    assert len(exp) == 3 and all(r["winner"] in recs[0].members or r["winner"] for r in exp)
    sat = record_satisfaction(recs, cfg)
    expert_row = next(r for r in sat if r["planner"] == "expert")
    assert all(expert_row[f] == 100.0 for f in ("kinematic", "speed", "border", "collision"))
    t = table1(rows)
    assert t.co_converged == 0 and t.problems == 3
    t1 = table1([r for r in rows if r["problem"] == 0] + [{**r, "planner": "network"} for r in rows
                                                          if r["problem"] == 0 and r["planner"] == "expert"])
    assert t1.rows[0]["std_final_cost"] == 0.0


def test_init_equal_to_expert_solution_has_zero_delta_cost(cfg):
    N = 20
    s = straight_scene(N=N, ego=EgoState(0, 0.5, 0, 6.0), agents=[static_agent(45.0, 5.5, N)])
    rec = evaluate_problem(0, s, cfg)
    assert rec.expert.converged
    again = solve(s, rec.expert.trajectory, cfg)
    rows = problem_rows([rec])
    rows.append({**rows[-1], "planner": "network", "status": again.status.value, "final_cost": again.final_cost,
                 "nlp_time": again.wall_time, "winner": ""})
    t = {r["init"]: r for r in table2(rows, n_boot=0)}
    assert abs(t["network"]["delta_cost_pct"]) < 1e-6


def test_constraint_satisfaction_runner(cfg):
    scenes = [straight_scene(N=10, ego=EgoState(0, 0, 0, 5.0))]
    out = run_constraint_satisfaction(scenes, {"cv": lambda s: heuristic_init("constvel", s, cfg),
                                               "skip": lambda s: None}, cfg)
    cv = next(r for r in out if r["planner"] == "cv")
    assert cv["n"] == 1 and cv["kinematic"] == 100.0
    with pytest.raises(EmptyProblemSet):
        run_constraint_satisfaction([], {}, cfg)


def test_resolve_config(tmp_path):
    conf = resolve_config(None, ["nlp.max_iters=12", "run.problems=4", "train.lr=0.01"])
    assert conf["nlp"]["max_iters"] == 12 and conf["run"]["problems"] == 4 and conf["train"]["lr"] == 0.01
    (tmp_path / "c.json").write_text(json.dumps({"run": {"N": 10}}))
    assert resolve_config(tmp_path / "c.json")["run"]["N"] == 10
    for bad in (["nlp.nope=1"], ["bogus.x=1"], ["noequals"]):
        with pytest.raises(CliError):
            resolve_config(None, bad)
    assert RunConfig().N == 20


def test_cli_empty_set(tmp_path, capsys):
    save_problem_set([], tmp_path / "empty.json")
    code = main(["bench", "--set", str(tmp_path / "empty.json"), "--out", str(tmp_path / "o")])
    assert code != 0
    assert "empty problem set" in capsys.readouterr().err


def test_cli_malformed_input(tmp_path, capsys):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["solve", "--set", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) != 0
    assert "cannot read" in capsys.readouterr().err


def test_cli_manifest_determinism(tmp_path):
    out = tmp_path / "gen"
    argv = ["generate", "--seed", "3", "--param", "run.problems=2", "--scenarios", "--out", str(out)]
    assert main(argv) == 0
    first = {p.name: p.read_bytes() for p in out.rglob("*.json")}
    assert main(argv) == 0
    second = {p.name: p.read_bytes() for p in out.rglob("*.json")}
    assert first == second
    m = json.loads(first["manifest.json"])
    assert m["schema"] == "pilot-manifest-v1" and m["seed"] == 3
    assert "problems.json" in m["outputs"] and len(m["config_hash"]) == 64


def strip_time(obj):
    if isinstance(obj, dict):
        return {k: strip_time(v) for k, v in obj.items() if not k.endswith("_time")}
    if isinstance(obj, list):
        return [strip_time(v) for v in obj]
    return obj


def close(a, b, path="$"):
    if isinstance(a, dict):
        assert a.keys() == b.keys(), path
        for k in a:
            close(a[k], b[k], f"{path}.{k}")
    elif isinstance(a, list):
        assert len(a) == len(b), path
        for i, (x, y) in enumerate(zip(a, b)):
            close(x, y, f"{path}[{i}]")
    elif isinstance(a, float):
        assert b == pytest.approx(a, rel=1e-9, abs=1e-9), path
    else:
        assert a == b, path


def test_cli_solve_matches_golden(tmp_path):
    out = tmp_path / "s"
    assert main(["solve", "--set", str(DATA / "golden_problems.json"), "--index", "2", "--init", "constvel",
                 "--out", str(out)]) == 0
    got = json.loads((out / "solve.json").read_text())
    want = json.loads((DATA / "golden_solve.json").read_text())
    assert got["report"]["status"] == want["report"]["status"] == "Converged"
    assert got["report"]["iterations"] == want["report"]["iterations"]
    close(strip_time(want), strip_time(got))


def test_cli_bench_small(tmp_path):
    gen = tmp_path / "gen"
    assert main(["generate", "--seed", "1", "--param", "run.problems=2", "--out", str(gen)]) == 0
    out = tmp_path / "b"
    argv = ["bench", "--set", str(gen / "problems.json"), "--param", "run.bootstrap=20", "--out", str(out)]
    assert main(argv) == 0
    names = json.loads((out / "manifest.json").read_text())["outputs"]
    assert {"problems.tsv", "table2.tsv", "constraints.tsv"} <= set(names)
    rows = read_tsv(out / "problems.tsv")
    assert len([r for r in rows if r["planner"] == "expert"]) == 2
    assert np.isfinite(float(rows[0]["final_cost"]))
