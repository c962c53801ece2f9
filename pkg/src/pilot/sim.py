"""Deterministic 2D closed-loop simulator and scenario generator.

The road is a world-frame polyline with straight lane borders in its path
frame. Agents follow scripts written in path coordinates (arc length s,
lateral d). The ego is integrated with the planner's bicycle model in path
coordinates, so the simulated ego and the planned ego obey the same dynamics;
world poses are derived for collision checks and logs.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import step
from .frenet import ReferencePath, poses_from_frame, to_reference_frame
from .problem import (AgentPrediction, Borders, Control, EgoState, NlpConfig, SchemaError, Scene, Trajectory,
                      default_target_x, dump_json, load_json)

SCENARIO_SCHEMA = "pilot-scenario-v1"
DIFFICULTIES = ("small", "large")

LANE_WIDTH = 5.5
N_LANES = 2
ROUTE_LENGTH = 150.0      # m driven from the spawn to complete an episode
EPISODE_SECONDS = 30.0
EGO_SPAWN_S = 10.0
AGENT_HALF_LENGTH = 2.25
AGENT_HALF_WIDTH = 0.95


class Status(str, enum.Enum):
    RUNNING = "Running"
    COMPLETED = "Completed"
    COLLIDED = "Collided"
    TIMED_OUT = "TimedOut"


# -- scenarios ---------------------------------------------------------------

@dataclass(frozen=True)
class AgentSpec:
    """kind: "static", "constvel" (speed along s) or "scripted" (piecewise
    linear through (t, s, d) knots, constant velocity after the last one)."""

    id: str
    kind: str
    s0: float
    d0: float
    speed: float = 0.0
    half_length: float = AGENT_HALF_LENGTH
    half_width: float = AGENT_HALF_WIDTH
    script: tuple = ()

    def frame_pose(self, t: float) -> tuple[float, float, float]:
        """(s, d, heading relative to the path) at time t."""
        if self.kind == "static":
            return self.s0, self.d0, 0.0
        if self.kind == "constvel":
            return self.s0 + self.speed * t, self.d0, 0.0
        knots = np.asarray(self.script, dtype=float)
        ts = knots[:, 0]
        if t >= ts[-1]:
            (ta, sa, _), (tb, sb, db) = knots[-2], knots[-1]
            return sb + (sb - sa) / (tb - ta) * (t - tb), db, 0.0
        t = max(t, ts[0])
        i = int(np.searchsorted(ts, t, side="right") - 1)
        (t0, s0, d0), (t1, s1, d1) = knots[i], knots[i + 1]
        vs, vd = (s1 - s0) / (t1 - t0), (d1 - d0) / (t1 - t0)
        return s0 + vs * (t - t0), d0 + vd * (t - t0), math.atan2(vd, vs)


@dataclass(frozen=True, eq=False)
class Scenario:
    seed: int
    difficulty: str
    path: np.ndarray                # world polyline (M, 2)
    lane_width: float
    n_lanes: int
    ego_spawn: EgoState             # path frame
    agents: tuple[AgentSpec, ...]
    horizon: float = EPISODE_SECONDS
    route_end: float = EGO_SPAWN_S + ROUTE_LENGTH
    v_max: float = 10.0
    _ref: ReferencePath = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "path", np.asarray(self.path, dtype=float))
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "_ref", ReferencePath(self.path))

    @property
    def reference(self) -> ReferencePath:
        return self._ref

    @property
    def borders(self) -> Borders:
        lo = -self.lane_width / 2
        up = self.lane_width * (self.n_lanes - 0.5)
        return Borders.straight(lo, up, -100.0, self._ref.length + 500.0)

    def agent_frame_poses(self, t: float) -> np.ndarray:
        """(w, 3) path-frame poses, arc length clamped to the path."""
        if not self.agents:
            return np.zeros((0, 3))
        p = np.array([a.frame_pose(t) for a in self.agents], dtype=float)
        p[:, 0] = np.clip(p[:, 0], 0.0, self._ref.length)
        return p

    def agent_world_poses(self, t: float) -> np.ndarray:
        p = self.agent_frame_poses(t)
        return poses_from_frame(self._ref, p) if len(p) else p

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return scenario_to_dict(self) == scenario_to_dict(other)


def _arc_path(rng, length: float, curved: bool) -> np.ndarray:
    """Polyline with 1 m spacing: straight, or straight-arc-straight."""
    s = np.arange(0.0, length + 1.0, 1.0)
    if curved:
        radius = rng.uniform(120.0, 400.0)
        sign = rng.choice([-1.0, 1.0])
        start = rng.uniform(30.0, 80.0)
        arc = min(rng.uniform(40.0, 0.5 * math.pi * radius), length - start)
        heading = sign * np.clip(s - start, 0.0, arc) / radius
    else:
        heading = np.zeros_like(s)
    # exact integration of piecewise-constant curvature via midpoint headings
    mid = 0.5 * (heading[:-1] + heading[1:])
    steps = np.column_stack([np.cos(mid), np.sin(mid)]) * np.diff(s)[:, None]
    return np.vstack([[0.0, 0.0], np.cumsum(steps, axis=0)])


def braking_distance(v: float, cfg: NlpConfig | None = None, dt: float = 0.5) -> float:
    """Distance to stop from v with the jerk-limited maximal braking profile."""
    cfg = cfg or NlpConfig()
    a, dist = 0.0, 0.0
    while v > 0:
        a = max(cfg.a_min, a - cfg.jerk_max)
        dist += v * dt
        v = v + a * dt
    return dist


def generate_scenario(seed: int, difficulty: str = "small") -> Scenario:
    """Deterministic per (seed, difficulty). small: straight road, 0-3 static
    agents. large: straight or curved road, 0-8 static, constant-velocity and
    lane-changing agents. Every agent spawns beyond the ego's braking distance
    and at least 27.5 m behind the previous one."""
    if difficulty not in DIFFICULTIES:
        raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
    rng = np.random.default_rng([int(seed), DIFFICULTIES.index(difficulty)])
    large = difficulty == "large"
    path_len = EGO_SPAWN_S + ROUTE_LENGTH + 450.0
    path = _arc_path(rng, path_len, curved=large and rng.random() < 0.5)
    lanes = [LANE_WIDTH * i for i in range(N_LANES)]
    v0 = float(rng.uniform(0.0, 10.0))
    ego = EgoState(EGO_SPAWN_S, float(rng.choice(lanes) + rng.uniform(-0.5, 0.5)),
                   float(rng.uniform(-0.05, 0.05)), v0)
    n = int(rng.integers(0, 4 if not large else 9))
    guard = EGO_SPAWN_S + braking_distance(v0) + 20.0
    agents = []
    s = guard + rng.uniform(0.0, 10.0)
    for i in range(n):
        lane = float(rng.choice(lanes))
        d = lane + float(rng.uniform(-0.4, 0.4))
        kind = "static"
        if large:
            kind = str(rng.choice(["static", "constvel", "scripted"], p=[0.4, 0.4, 0.2]))
        if kind == "static":
            agents.append(AgentSpec(f"a{i}", kind, s, d))
        elif kind == "constvel":
            agents.append(AgentSpec(f"a{i}", kind, s, d, float(rng.uniform(4.0, 9.0))))
        else:
            v = float(rng.uniform(4.0, 9.0))
            other = lanes[1] if lane == lanes[0] else lanes[0]
            t1 = float(rng.uniform(1.0, 8.0))
            t2 = t1 + float(rng.uniform(2.0, 3.0))
            script = ((0.0, s, d), (t1, s + v * t1, d), (t2, s + v * t2, other))
            agents.append(AgentSpec(f"a{i}", kind, s, d, v, script=script))
        s += float(rng.uniform(20.0, 45.0)) + 7.5
    return Scenario(int(seed), difficulty, path, LANE_WIDTH, N_LANES, ego, tuple(agents))


def scenario_to_dict(sc: Scenario) -> dict:
    e = sc.ego_spawn
    return {
        "schema": SCENARIO_SCHEMA,
        "seed": sc.seed,
        "difficulty": sc.difficulty,
        "path": sc.path.tolist(),
        "lane_width": sc.lane_width,
        "n_lanes": sc.n_lanes,
        "ego_spawn": {"x": e.x, "y": e.y, "heading": e.heading, "speed": e.speed},
        "agents": [
            {"id": a.id, "kind": a.kind, "s0": a.s0, "d0": a.d0, "speed": a.speed,
             "half_length": a.half_length, "half_width": a.half_width,
             "script": [list(k) for k in a.script]}
            for a in sc.agents
        ],
        "horizon": sc.horizon,
        "route_end": sc.route_end,
        "v_max": sc.v_max,
    }


def scenario_from_dict(d: dict) -> Scenario:
    if d.get("schema") != SCENARIO_SCHEMA:
        raise SchemaError(f"expected schema {SCENARIO_SCHEMA!r}, got {d.get('schema')!r}")
    try:
        agents = tuple(AgentSpec(a["id"], a["kind"], a["s0"], a["d0"], a["speed"], a["half_length"],
                                 a["half_width"], tuple(tuple(k) for k in a["script"]))
                       for a in d["agents"])
        return Scenario(d["seed"], d["difficulty"], np.array(d["path"], dtype=float), d["lane_width"],
                        d["n_lanes"], EgoState(**d["ego_spawn"]), agents, d["horizon"], d["route_end"],
                        d["v_max"])
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"malformed scenario record: {e}") from e


def save_scenario(sc: Scenario, path) -> None:
    dump_json(scenario_to_dict(sc), path)


def load_scenario(path) -> Scenario:
    return scenario_from_dict(load_json(path))


# -- geometry ----------------------------------------------------------------

def rectangle(x: float, y: float, heading: float, half_length: float, half_width: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    ax, ay = np.array([c, s]) * half_length, np.array([-s, c]) * half_width
    p = np.array([x, y])
    return np.array([p + ax + ay, p + ax - ay, p - ax - ay, p - ax + ay])


def rectangles_overlap(r1: np.ndarray, r2: np.ndarray) -> bool:
    """Separating-axis test for two convex quadrilaterals (touching counts)."""
    for r in (r1, r2):
        for i in range(4):
            edge = r[(i + 1) % 4] - r[i]
            axis = np.array([-edge[1], edge[0]])
            p1, p2 = r1 @ axis, r2 @ axis
            if p1.max() < p2.min() or p2.max() < p1.min():
                return False
    return True


# -- closed loop ---------------------------------------------------------------

@dataclass(frozen=True)
class SimState:
    scenario: Scenario
    steps: int                   # elapsed simulation steps of length dt
    dt: float
    ego: EgoState                # path frame
    status: Status = Status.RUNNING

    @property
    def clock(self) -> float:
        return self.steps * self.dt

    @property
    def agent_poses(self) -> np.ndarray:
        return self.scenario.agent_world_poses(self.clock)

    def ego_world(self) -> np.ndarray:
        e = self.ego
        return poses_from_frame(self.scenario.reference, [[e.x, e.y, e.heading]])[0]


def _classify(sc: Scenario, ego: EgoState, clock: float, cfg: NlpConfig) -> Status:
    e = poses_from_frame(sc.reference, [[min(max(ego.x, 0.0), sc.reference.length), ego.y, ego.heading]])[0]
    ego_rect = rectangle(e[0], e[1], e[2], cfg.ego_length / 2, cfg.ego_width / 2)
    for a, pose in zip(sc.agents, sc.agent_world_poses(clock)):
        if rectangles_overlap(ego_rect, rectangle(*pose, a.half_length, a.half_width)):
            return Status.COLLIDED
    if ego.x >= sc.route_end:
        return Status.COMPLETED
    if clock >= sc.horizon - 1e-9:
        return Status.TIMED_OUT
    return Status.RUNNING


def initial_state(sc: Scenario, dt: float = 0.2, cfg: NlpConfig | None = None) -> SimState:
    cfg = cfg or NlpConfig()
    return SimState(sc, 0, dt, sc.ego_spawn, _classify(sc, sc.ego_spawn, 0.0, cfg))


def step_closed_loop(state: SimState, plan: Trajectory, replan_every: int = 1,
                     cfg: NlpConfig | None = None) -> SimState:
    """Execute the first `replan_every` controls of `plan`, stopping early when
    the episode ends."""
    cfg = cfg or NlpConfig()
    if plan.horizon < replan_every:
        raise ValueError(f"plan horizon {plan.horizon} < replan_every {replan_every}")
    if abs(plan.dt - state.dt) > 1e-12:
        raise ValueError(f"plan dt {plan.dt} != simulation dt {state.dt}")
    if state.status is not Status.RUNNING:
        return state
    for k in range(replan_every):
        a, d = plan.controls[k]
        ego = step(state.ego, Control(float(a), float(d)), state.dt, cfg.wheelbase)
        state = replace(state, steps=state.steps + 1, ego=ego)
        status = _classify(state.scenario, ego, state.clock, cfg)
        if status is not Status.RUNNING:
            return replace(state, status=status)
    return state


def extract_scene(state: SimState, scenario: Scenario | None = None, N: int = 40, dt: float | None = None) -> Scene:
    """Planning problem at the current state, in the path frame, with agents
    predicted perfectly from their scripts."""
    sc = scenario or state.scenario
    dt = state.dt if dt is None else dt
    path = sc.reference
    e = state.ego
    w = poses_from_frame(path, [[e.x, e.y, e.heading]])[0]
    ts = state.clock + dt * np.arange(N + 1)
    preds = []
    if sc.agents:
        per_t = np.stack([sc.agent_world_poses(t) for t in ts], axis=1)     # (w, N+1, 3)
        preds = [AgentPrediction(a.id, per_t[i], a.half_length, a.half_width) for i, a in enumerate(sc.agents)]
    world = Scene(EgoState(w[0], w[1], w[2], e.speed), sc.path, sc.borders, tuple(preds), 0.0, sc.v_max,
                  N, dt, 0.0)
    ref = to_reference_frame(world)
    return replace(ref, target_x=default_target_x(ref.ego.x, sc.v_max, N, dt)).with_clamped_speed()


# -- episodes ----------------------------------------------------------------

LOG_COLUMNS = ("step", "clock", "s", "d", "heading", "speed", "world_x", "world_y", "world_heading", "status")


@dataclass
class EpisodeResult:
    status: Status
    steps: int
    clock: float
    trace: list                  # rows in LOG_COLUMNS order
    plans: int = 0
    planner_failures: int = 0


def _log_row(state: SimState) -> list:
    e = state.ego
    w = state.ego_world()
    return [state.steps, state.clock, e.x, e.y, e.heading, e.speed, w[0], w[1], w[2], state.status.value]


def run_episode(scenario: Scenario, planner, N: int = 40, dt: float = 0.2, replan_every: int = 1,
                cfg: NlpConfig | None = None) -> EpisodeResult:
    """Closed loop: `planner(scene)` returns a SolveReport-like object with
    `.trajectory` and `.converged`, or a bare Trajectory."""
    cfg = cfg or NlpConfig()
    state = initial_state(scenario, dt, cfg)
    res = EpisodeResult(state.status, 0, 0.0, [_log_row(state)])
    while state.status is Status.RUNNING:
        out = planner(extract_scene(state, scenario, N, dt))
        plan = getattr(out, "trajectory", out)
        res.plans += 1
        if hasattr(out, "converged") and not out.converged:
            res.planner_failures += 1
        if plan.horizon < replan_every:
            raise ValueError(f"plan horizon {plan.horizon} < replan_every {replan_every}")
        # one control at a time so the trace has a row per simulation step
        for k in range(replan_every):
            if state.status is not Status.RUNNING:
                break
            state = step_closed_loop(state, Trajectory(plan.dt, plan.states[k:], plan.controls[k:]), 1, cfg)
            res.trace.append(_log_row(state))
    res.status, res.steps, res.clock = state.status, state.steps, state.clock
    return res


def write_episode_log(result: EpisodeResult, path) -> None:
    """Whitespace-separated text, one row per simulation step after a header."""
    lines = [" ".join(LOG_COLUMNS)]
    for row in result.trace:
        lines.append(" ".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


class Simulator:
    """Episode driver used by DAgger: a stream of scenarios from consecutive
    seeds, replanning every `replan_every` steps."""

    def __init__(self, base_seed: int = 0, difficulty: str = "large", N: int = 40, dt: float = 0.2,
                 replan_every: int = 1, cfg: NlpConfig | None = None):
        self.base_seed, self.difficulty = base_seed, difficulty
        self.N, self.dt, self.replan_every = N, dt, replan_every
        self.cfg = cfg or NlpConfig()
        self.episode = -1
        self.state = None

    def reset(self) -> None:
        while True:
            self.episode += 1
            seed = self.base_seed + self.episode
            sc = generate_scenario(seed, pick_difficulty(self.difficulty, seed))
            self.state = initial_state(sc, self.dt, self.cfg)
            if self.state.status is Status.RUNNING:
                return

    def scene(self) -> Scene:
        return extract_scene(self.state, None, self.N, self.dt)

    def advance(self, plan: Trajectory) -> bool:
        self.state = step_closed_loop(self.state, plan, self.replan_every, self.cfg)
        return self.state.status is Status.RUNNING


# -- problem sets --------------------------------------------------------------

def pick_difficulty(difficulty: str, seed: int) -> str:
    """"mixed" alternates small (even seeds) and large (odd seeds)."""
    if difficulty == "mixed":
        return DIFFICULTIES[int(seed) % 2]
    return difficulty


def generate_problem(seed: int, difficulty: str = "mixed", N: int = 40, dt: float = 0.2,
                     cfg: NlpConfig | None = None, max_warmup: int = 10) -> Scene:
    """One planning problem: the ego at its spawn with the agents advanced by
    a seeded number of simulation steps, so moving agents are caught at
    different phases of their scripts."""
    cfg = cfg or NlpConfig()
    diff = pick_difficulty(difficulty, seed)
    sc = generate_scenario(seed, diff)
    rng = np.random.default_rng([int(seed), DIFFICULTIES.index(diff), 1])
    k = int(rng.integers(0, max_warmup + 1))
    status = _classify(sc, sc.ego_spawn, k * dt, cfg)
    if status is not Status.RUNNING:
        k, status = 0, _classify(sc, sc.ego_spawn, 0.0, cfg)
    return extract_scene(SimState(sc, k, dt, sc.ego_spawn, status), sc, N, dt)


def generate_problem_set(n: int, base_seed: int = 0, difficulty: str = "mixed", N: int = 40,
                         dt: float = 0.2, cfg: NlpConfig | None = None) -> list:
    return [generate_problem(base_seed + i, difficulty, N, dt, cfg) for i in range(n)]


def collision_rate(results) -> float:
    results = list(results)
    if not results:
        return 0.0
    return sum(r.status is Status.COLLIDED for r in results) / len(results)
