"""Benchmark harness and command-line interface.

Every problem is solved once per planner and recorded as a flat row; the
tables are pure functions of those rows, so any aggregate can be recomputed
from the emitted per-problem file. Fields ending in `_time` carry wall-clock
measurements and are the only values that differ between identical runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .costcon import ConstraintReport, trajectory_report
from .imitation import (RasterConfig, TrainConfig, collect_expert_samples, cpn_descriptor, cpn_train,
                        cpn_trajectory, dagger_train, default_descriptor, init_model, load_model, pilot_plan,
                        pretrain, raw_network_trajectory, save_model)
from .nlp import SolveReport, SolverOptions, select_best, solve
from .problem import NlpConfig, SchemaError, Scene, dump_json, load_json, scene_from_dict, scene_to_dict
from .sim import EpisodeResult, Simulator, Status, generate_problem_set, generate_scenario, pick_difficulty, run_episode
from .warmstart import Heuristic, ensemble_inits, expert_from_members, heuristic_init

MANIFEST_SCHEMA = "pilot-manifest-v1"
PROBLEM_SET_SCHEMA = "pilot-problem-set-v1"
INITS = ("none", "constvel", "constaccel", "constdecel", "network", "expert")
TABLE2_INITS = ("none", "constvel", "constaccel", "constdecel", "network")
FAMILIES = tuple(f.name for f in fields(ConstraintReport))
ROW_FIELDS = ("problem", "planner", "status", "iterations", "final_cost", "max_violation",
              "init_time", "nlp_time", "total_time", "winner")


class EmptyProblemSet(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Desk-scale workload settings shared by the CLI and the acceptance suite."""

    N: int = 20
    dt: float = 0.4
    replan_every: int = 4
    difficulty: str = "mixed"
    problems: int = 200
    samples: int = 500
    dagger_steps: int = 300
    retrain_every: int = 50
    suite: int = 50
    bootstrap: int = 1000
    cpn_scenes: int = 100
    cpn_epochs: int = 20


# -- problem sets ---------------------------------------------------------------

def save_problem_set(scenes, path, meta: dict | None = None) -> None:
    d = {"schema": PROBLEM_SET_SCHEMA, **(meta or {}), "problems": [scene_to_dict(s) for s in scenes]}
    dump_json(d, path)


def load_problem_set(path) -> list:
    """A problem-set file, or a single scene file read as a one-problem set."""
    d = load_json(path)
    if d.get("schema") == PROBLEM_SET_SCHEMA:
        if not isinstance(d.get("problems"), list):
            raise SchemaError("problem set without a 'problems' list")
        return [scene_from_dict(p) for p in d["problems"]]
    return [scene_from_dict(d)]


# -- per-problem evaluation ----------------------------------------------------

@dataclass
class ProblemRecord:
    index: int
    scene: Scene
    members: dict                     # expert ensemble: name -> SolveReport
    expert: SolveReport
    expert_init_time: float
    network: SolveReport | None = None
    network_init_time: float = 0.0
    raw_network: object = None        # Trajectory straight from the network


def evaluate_problem(index: int, scene: Scene, cfg: NlpConfig, model=None,
                     options: SolverOptions | None = None) -> ProblemRecord:
    t0 = time.perf_counter()
    inits = ensemble_inits(scene, cfg)
    t_init = time.perf_counter() - t0
    members = {name: solve(scene, init, cfg, options) for name, init in inits.items()}
    rec = ProblemRecord(index, scene, members, expert_from_members(members), t_init)
    if model is not None:
        _, rec.network_init_time, rec.network = pilot_plan(model, scene, cfg, options)
        rec.raw_network = raw_network_trajectory(model, scene, cfg)
    return rec


def _evaluate_job(job):
    return evaluate_problem(*job)


def evaluate_problems(scenes, cfg: NlpConfig, model=None, options: SolverOptions | None = None,
                      workers: int = 1) -> list:
    scenes = list(scenes)
    if not scenes:
        raise EmptyProblemSet("empty problem set")
    jobs = [(i, s, cfg, model, options) for i, s in enumerate(scenes)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_evaluate_job, jobs))
    return [_evaluate_job(j) for j in jobs]


def _row(index: int, planner: str, rep: SolveReport, init_time: float, nlp_time: float, winner: str = "") -> dict:
    return {"problem": index, "planner": planner, "status": rep.status.value, "iterations": rep.iterations,
            "final_cost": rep.final_cost, "max_violation": rep.max_violation, "init_time": init_time,
            "nlp_time": nlp_time, "total_time": init_time + nlp_time, "winner": winner}


def problem_rows(records) -> list:
    """Flat per-problem rows: one per ensemble member, the expert and (when
    present) the network."""
    rows = []
    for rec in records:
        for name, rep in rec.members.items():
            rows.append(_row(rec.index, name, rep, 0.0, rep.wall_time))
        winner = list(rec.members)[select_best(rec.members.values())]
        rows.append(_row(rec.index, "expert", rec.expert, rec.expert_init_time, rec.expert.wall_time, winner))
        if rec.network is not None:
            rows.append(_row(rec.index, "network", rec.network, rec.network_init_time, rec.network.wall_time))
    return rows


def _by_problem(rows, planner: str) -> dict:
    return {r["problem"]: r for r in rows if r["planner"] == planner}


def _converged(r) -> bool:
    return r is not None and r["status"] == "Converged"


def _stats(xs) -> tuple[float, float]:
    xs = np.asarray(list(xs), dtype=float)
    if len(xs) == 0:
        return math.nan, math.nan
    return float(xs.mean()), float(xs.std())


# -- PILOT vs expert --------------------------------------------------------------------

@dataclass
class Table1:
    rows: list                 # per planner: mean/std of times and cost
    co_converged: int
    problems: int
    faster_share_time: float   # share of co-converged problems where PILOT is faster
    cost_ratio: float          # mean PILOT cost / mean expert cost


def table1(rows) -> Table1:
    """PILOT (network init) against the expert, on problems both solve."""
    net, exp = _by_problem(rows, "network"), _by_problem(rows, "expert")
    both = sorted(p for p in exp if _converged(exp[p]) and _converged(net.get(p)))
    out = []
    for name, src in (("PILOT", net), ("Expert", exp)):
        row = {"planner": name, "n": len(both)}
        for key in ("init_time", "nlp_time", "total_time", "final_cost"):
            m, s = _stats(src[p][key] for p in both)
            row[f"mean_{key}"], row[f"std_{key}"] = m, s
        out.append(row)
    faster = sum(net[p]["total_time"] < exp[p]["total_time"] for p in both)
    ce = sum(exp[p]["final_cost"] for p in both)
    cn = sum(net[p]["final_cost"] for p in both)
    return Table1(out, len(both), len(exp), faster / len(both) if both else math.nan,
                  cn / ce if ce > 0 else math.nan)


def run_table1(problem_set, model, cfg: NlpConfig, options: SolverOptions | None = None, workers: int = 1) -> Table1:
    return table1(problem_rows(evaluate_problems(problem_set, cfg, model, options, workers)))


# -- initialization ablation --------------------------------------------------------------------

def _delta_time(init_rows: dict, win_rows: dict, problems) -> float:
    """Mean NLP time of the init minus that of the expert's winning member,
    over the given problems where the init converged."""
    d = [init_rows[p]["nlp_time"] - win_rows[p]["nlp_time"] for p in problems if _converged(init_rows.get(p))]
    return float(np.mean(d)) if d else math.nan


def table2(rows, n_boot: int = 1000, seed: int = 0, inits=TABLE2_INITS) -> list:
    """Each init against the expert on the problems the expert solved.

    delta_nlp_time compares against the solve time of the member the expert
    picked; delta_cost_pct is the relative difference of summed costs over
    problems both solved; fastest_share_time is the share of bootstrap
    resamples of the solved problems in which the init has the lowest mean
    delta_nlp_time among `inits`.
    """
    exp = _by_problem(rows, "expert")
    solved = sorted(p for p, r in exp.items() if _converged(r))
    by_planner = {name: _by_problem(rows, name) for name in set(r["planner"] for r in rows)}
    win = {p: by_planner[exp[p]["winner"]][p] for p in solved}
    present = [name for name in inits if name in by_planner]
    wins = dict.fromkeys(present, 0)
    if solved and n_boot > 0:
        rng = np.random.default_rng(seed)
        arr = np.array(solved)
        for _ in range(n_boot):
            sample = arr[rng.integers(0, len(arr), len(arr))]
            deltas = {name: _delta_time(by_planner[name], win, sample) for name in present}
            finite = {k: v for k, v in deltas.items() if math.isfinite(v)}
            if finite:
                wins[min(finite, key=lambda k: (finite[k], present.index(k)))] += 1
    out = []
    for name in present:
        r = by_planner[name]
        conv = [p for p in solved if _converged(r.get(p))]
        ce = sum(exp[p]["final_cost"] for p in conv)
        ci = sum(r[p]["final_cost"] for p in conv)
        out.append({
            "init": name,
            "solved_by_expert": len(solved),
            "converged": len(conv),
            "converged_pct": 100.0 * len(conv) / len(solved) if solved else math.nan,
            "delta_nlp_time": _delta_time(r, win, solved),
            "delta_cost_pct": 100.0 * (ci - ce) / ce if ce > 0 else math.nan,
            "fastest_share_time": wins[name] / n_boot if n_boot > 0 else math.nan,
        })
    return out


def run_table2(problem_set, model, cfg: NlpConfig, options: SolverOptions | None = None, workers: int = 1,
               n_boot: int = 1000, seed: int = 0) -> list:
    return table2(problem_rows(evaluate_problems(problem_set, cfg, model, options, workers)), n_boot, seed)


# -- constraint satisfaction ----------------------------------------------------

def satisfaction_table(results: dict, cfg: NlpConfig) -> list:
    """results: planner -> list of (scene, Trajectory). Per family, the share
    (in %) of trajectories whose worst violation is within constraint_tol."""
    out = []
    for name, items in results.items():
        reports = [trajectory_report(traj, scene, cfg) for scene, traj in items]
        row = {"planner": name, "n": len(reports)}
        for fam in FAMILIES:
            ok = sum(getattr(r, fam) <= cfg.constraint_tol for r in reports)
            row[fam] = 100.0 * ok / len(reports) if reports else math.nan
        out.append(row)
    return out


def run_constraint_satisfaction(problem_set, planners: dict, cfg: NlpConfig) -> list:
    """planners: name -> f(scene) returning a Trajectory, or None to leave the
    problem out of that planner's row (e.g. a solver that did not converge)."""
    scenes = list(problem_set)
    if not scenes:
        raise EmptyProblemSet("empty problem set")
    results = {}
    for name, f in planners.items():
        items = []
        for s in scenes:
            traj = f(s)
            if traj is not None:
                items.append((s, traj))
        results[name] = items
    return satisfaction_table(results, cfg)


def record_satisfaction(records, cfg: NlpConfig, cpn_model=None) -> list:
    """Constraint report from evaluated records: raw network, PILOT and expert
    restricted to converged solves, and optionally the CPN network."""
    res = {}
    if records and records[0].raw_network is not None:
        res["raw_network"] = [(r.scene, r.raw_network) for r in records]
        res["PILOT"] = [(r.scene, r.network.trajectory) for r in records if r.network.converged]
    res["expert"] = [(r.scene, r.expert.trajectory) for r in records if r.expert.converged]
    if cpn_model is not None:
        res["CPN"] = [(r.scene, cpn_trajectory(cpn_model, r.scene)) for r in records]
    return satisfaction_table(res, cfg)


# -- closed loop -----------------------------------------------------------------

def run_suite(planner, seeds, run: RunConfig, cfg: NlpConfig) -> list[EpisodeResult]:
    """Closed-loop episodes on the scenarios of the given seeds."""
    return [run_episode(generate_scenario(s, pick_difficulty(run.difficulty, s)), planner, run.N, run.dt,
                        run.replan_every, cfg) for s in seeds]


def collision_count(results) -> int:
    return sum(r.status is Status.COLLIDED for r in results)


# -- output helpers ----------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_tsv(rows, path, columns=None) -> None:
    rows = list(rows)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w") as f:
        f.write("\t".join(columns) + "\n")
        for r in rows:
            f.write("\t".join(_fmt(r[c]) for c in columns) + "\n")


def read_tsv(path) -> list:
    with open(path) as f:
        lines = f.read().splitlines()
    cols = lines[0].split("\t")
    return [dict(zip(cols, line.split("\t"))) for line in lines[1:]]


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_manifest(out: Path, command: str, args: dict, seed: int, config: dict, inputs, outputs) -> None:
    m = {
        "schema": MANIFEST_SCHEMA,
        "command": command,
        "args": args,
        "seed": seed,
        "config": config,
        "config_hash": hashlib.sha256(_canonical(config).encode()).hexdigest(),
        "inputs": {str(p): _sha256(p) for p in inputs if p},
        "outputs": sorted(outputs),
    }
    dump_json(m, out / "manifest.json")


# -- CLI ---------------------------------------------------------------------------

class CliError(Exception):
    pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_path=None, params=()) -> dict:
    """Sections nlp / raster / train / run, from defaults, then the --config
    file, then --param section.key=value overrides."""
    conf = {"nlp": NlpConfig().to_dict(), "raster": asdict(RasterConfig()), "train": asdict(TrainConfig()),
            "run": asdict(RunConfig())}
    layers = []
    if config_path:
        try:
            layers.append(load_json(config_path))
        except (OSError, ValueError) as e:
            raise CliError(f"cannot read config {config_path}: {e}") from e
    over = {}
    for p in params:
        key, sep, val = p.partition("=")
        section, dot, name = key.partition(".")
        if not (sep and dot):
            raise CliError(f"--param expects section.key=value, got {p!r}")
        over.setdefault(section, {})[name] = _parse_value(val)
    layers.append(over)
    for layer in layers:
        if not isinstance(layer, dict):
            raise CliError("config must be a JSON object")
        for section, values in layer.items():
            if section not in conf or not isinstance(values, dict):
                raise CliError(f"unknown config section {section!r}")
            unknown = set(values) - set(conf[section])
            if unknown:
                raise CliError(f"unknown {section} keys: {sorted(unknown)}")
            conf[section].update(values)
    return conf


def _objects(conf: dict):
    try:
        return (NlpConfig.from_dict(conf["nlp"]), RasterConfig(**conf["raster"]), TrainConfig(**conf["train"]),
                RunConfig(**conf["run"]))
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid configuration: {e}") from e


def _load_set(path) -> list:
    if not path:
        raise CliError("--set is required")
    try:
        return load_problem_set(path)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise CliError(f"cannot read problem set {path}: {e}") from e


def _load_model(path):
    try:
        return load_model(path)
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise CliError(f"cannot read model {path}: {e}") from e


def _cmd_generate(a, conf, out: Path) -> tuple[list, list]:
    nlp, _, _, run = _objects(conf)
    scenes = generate_problem_set(run.problems, a.seed, run.difficulty, run.N, run.dt, nlp)
    save_problem_set(scenes, out / "problems.json", {"seed": a.seed, "difficulty": run.difficulty})
    files = ["problems.json"]
    if a.scenarios:
        from .sim import save_scenario
        (out / "scenarios").mkdir(exist_ok=True)
        for i in range(run.problems):
            seed = a.seed + i
            name = f"scenarios/scenario_{seed}.json"
            save_scenario(generate_scenario(seed, pick_difficulty(run.difficulty, seed)), out / name)
            files.append(name)
    return files, []


def _cmd_solve(a, conf, out: Path) -> tuple[list, list]:
    nlp, _, _, _ = _objects(conf)
    scenes = _load_set(a.set)
    if not scenes:
        raise EmptyProblemSet("empty problem set")
    if not 0 <= a.index < len(scenes):
        raise CliError(f"--index {a.index} outside the set of {len(scenes)} problems")
    scene = scenes[a.index]
    init_kind = a.init or "constvel"
    t0 = time.perf_counter()
    if init_kind == "network":
        if not a.model:
            raise CliError("--init network needs --model")
        init, t_init, rep = pilot_plan(_load_model(a.model), scene, nlp)
    elif init_kind == "expert":
        inits = ensemble_inits(scene, nlp)
        t_init = time.perf_counter() - t0
        rep = expert_from_members({k: solve(scene, v, nlp) for k, v in inits.items()})
    else:
        init = heuristic_init(Heuristic(init_kind), scene, nlp)
        t_init = time.perf_counter() - t0
        rep = solve(scene, init, nlp)
    dump_json({"problem": a.index, "init": init_kind, "init_time": t_init, "report": rep.to_dict()},
              out / "solve.json")
    return ["solve.json"], [a.set, a.model]


def _cmd_train(a, conf, out: Path) -> tuple[list, list]:
    nlp, raster, train, run = _objects(conf)
    files = []
    log = []
    if a.cpn:
        scenes = generate_problem_set(run.cpn_scenes, a.seed, run.difficulty, run.N, run.dt, nlp)
        model = init_model(cpn_descriptor(run.N, raster), seed=a.seed)
        model, curve = cpn_train(model, scenes, nlp, epochs=run.cpn_epochs, seed=a.seed)
        save_model(model, out / "cpn_model.json")
        log += [{"phase": "cpn", "epoch": i, "loss": v} for i, v in enumerate(curve)]
        files.append("cpn_model.json")
    else:
        sim = Simulator(a.seed, run.difficulty, run.N, run.dt, run.replan_every, nlp)
        D0, skipped = collect_expert_samples(sim, run.samples, nlp)
        model = init_model(default_descriptor(run.N, raster), seed=a.seed)
        model, curve = pretrain(model, D0, seed=a.seed, config=train)
        save_model(model, out / "model_pretrained.json")
        files.append("model_pretrained.json")
        log += [{"phase": "pretrain", "epoch": i, "loss": v} for i, v in enumerate(curve)]
        if run.dagger_steps > 0:
            dsim = Simulator(a.seed + 1_000_000, run.difficulty, run.N, run.dt, run.replan_every, nlp)
            res = dagger_train(model, D0, dsim, len(D0) + run.dagger_steps, run.retrain_every, seed=a.seed,
                               cfg=nlp, train=train, pretrain_first=False)
            model = res.model
            for r, c in enumerate(res.loss_curves):
                log += [{"phase": f"dagger{r + 1}", "epoch": i, "loss": v} for i, v in enumerate(c)]
        save_model(model, out / "model.json")
        files.append("model.json")
    write_tsv(log, out / "train_log.tsv", ["phase", "epoch", "loss"])
    files.append("train_log.tsv")
    return files, []


def _cmd_bench(a, conf, out: Path, table2_only: bool = False) -> tuple[list, list]:
    nlp, _, _, run = _objects(conf)
    scenes = _load_set(a.set)
    if not scenes:
        raise EmptyProblemSet("empty problem set")
    model = _load_model(a.model) if a.model else None
    records = evaluate_problems(scenes, nlp, model, workers=a.workers)
    rows = problem_rows(records)
    write_tsv(rows, out / "problems.tsv", ROW_FIELDS)
    files = ["problems.tsv"]
    t2 = table2(rows, run.bootstrap, a.seed)
    write_tsv(t2, out / "table2.tsv")
    files.append("table2.tsv")
    if not table2_only:
        if model is not None:
            t1 = table1(rows)
            write_tsv(t1.rows, out / "table1.tsv")
            write_tsv([{"problems": t1.problems, "co_converged": t1.co_converged,
                        "faster_share_time": t1.faster_share_time, "cost_ratio": t1.cost_ratio}],
                      out / "table1_summary.tsv")
            files += ["table1.tsv", "table1_summary.tsv"]
        cpn = _load_model(a.cpn_model) if a.cpn_model else None
        write_tsv(record_satisfaction(records, nlp, cpn), out / "constraints.tsv")
        files.append("constraints.tsv")
        (out / "series").mkdir(exist_ok=True)
        for planner in sorted(set(r["planner"] for r in rows)):
            sel = [{"problem": r["problem"], "status": r["status"], "total_time": r["total_time"],
                    "final_cost": r["final_cost"]} for r in rows if r["planner"] == planner]
            write_tsv(sel, out / "series" / f"{planner}.tsv")
            files.append(f"series/{planner}.tsv")
    return files, [a.set, a.model, a.cpn_model]


COMMANDS = {
    "generate": _cmd_generate,
    "solve": _cmd_solve,
    "train": _cmd_train,
    "bench": _cmd_bench,
    "ablate": lambda a, conf, out: _cmd_bench(a, conf, out, table2_only=True),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pilot", description="PILOT planning toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("generate", "write a problem set (and optionally scenario files)"),
                        ("solve", "solve one problem with a chosen initialization"),
                        ("train", "collect expert data, pretrain and run DAgger (or train the CPN)"),
                        ("bench", "PILOT vs expert, initialization ablation and constraint report"),
                        ("ablate", "initialization ablation only")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", help="JSON file with nlp/raster/train/run sections")
        s.add_argument("--param", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--set", help="problem-set or scene file")
        s.add_argument("--init", choices=INITS)
        s.add_argument("--model", help="trained model file")
        s.add_argument("--out", required=True, help="output directory")
        if name == "solve":
            s.add_argument("--index", type=int, default=0, help="problem index within --set")
        if name == "generate":
            s.add_argument("--scenarios", action="store_true", help="also write the scenario files")
        if name == "train":
            s.add_argument("--cpn", action="store_true", help="train the constraint-penalty network instead")
        if name in ("bench", "ablate"):
            s.add_argument("--cpn-model", help="CPN model for the constraint report")
    return p


def main(argv=None) -> int:
    a = build_parser().parse_args(argv)
    try:
        conf = resolve_config(a.config, a.param)
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        files, inputs = COMMANDS[a.command](a, conf, out)
        args = dict(sorted(vars(a).items()))
        write_manifest(out, a.command, args, a.seed, conf, [a.config, *inputs], files)
    except (CliError, EmptyProblemSet, SchemaError) as e:
        print(f"pilot {a.command}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
