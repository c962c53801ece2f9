"""Core planning-problem records: ego state, controls, trajectories, scenes and
the NLP configuration, plus their plain-text (JSON) persistence."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

SCENE_SCHEMA = "pilot-scene-v1"
TRAJ_SCHEMA = "pilot-traj-v1"


class SchemaError(ValueError):
    pass


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    # leave in-range values untouched so wrapping is exactly idempotent
    w = np.where((a > -np.pi) & (a <= np.pi), a, w)
    if np.ndim(w) == 0:
        return float(w)
    return w


def _frozen_array(a, shape_tail=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if shape_tail is not None and (arr.ndim != len(shape_tail) + 1 or arr.shape[1:] != shape_tail):
        if arr.size == 0:
            arr = arr.reshape((0,) + shape_tail)
        else:
            raise ValueError(f"expected shape (n, {shape_tail}), got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float
    speed: float

    def __post_init__(self):
        if not math.isfinite(self.speed):
            raise ValueError("speed must be finite")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.heading, self.speed])


@dataclass(frozen=True)
class Control:
    accel: float
    steer: float

    def __post_init__(self):
        if not (math.isfinite(self.accel) and math.isfinite(self.steer)):
            raise ValueError("controls must be finite")


@dataclass(frozen=True, eq=False)
class Trajectory:
    """States (N+1, 4) as rows (x, y, heading, speed) and controls (N, 2) as
    rows (accel, steer). Control k acts over the interval [k, k+1]."""

    dt: float
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        states = np.array(self.states, dtype=float)
        states = states.reshape(-1, 4)
        states[:, 2] = wrap_angle(states[:, 2])
        object.__setattr__(self, "states", _frozen_array(states, (4,)))
        object.__setattr__(self, "controls", _frozen_array(np.reshape(self.controls, (-1, 2)), (2,)))
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if len(self.states) != len(self.controls) + 1:
            raise ValueError("states length must equal controls length + 1")

    @property
    def horizon(self) -> int:
        return len(self.controls)

    def state(self, k: int) -> EgoState:
        return EgoState(*self.states[k])

    def control(self, k: int) -> Control:
        return Control(*self.controls[k])

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (self.dt == other.dt and np.array_equal(self.states, other.states)
                and np.array_equal(self.controls, other.controls))


@dataclass(frozen=True, eq=False)
class AgentPrediction:
    """Predicted (x, y, heading) of a road user at each plan timestamp."""

    id: str
    center_states: np.ndarray
    half_length: float
    half_width: float

    def __post_init__(self):
        object.__setattr__(self, "center_states", _frozen_array(self.center_states, (3,)))

    def __eq__(self, other):
        if not isinstance(other, AgentPrediction):
            return NotImplemented
        return (self.id == other.id and np.array_equal(self.center_states, other.center_states)
                and self.half_length == other.half_length and self.half_width == other.half_width)


@dataclass(frozen=True, eq=False)
class Borders:
    """Drivable-region borders y_low(x), y_up(x) as natural cubic splines
    through knots (C2 everywhere). Outside the knot domain the end values are
    held constant."""

    knots_x: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        for name in ("knots_x", "lower", "upper"):
            arr = np.array(getattr(self, name), dtype=float).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.knots_x) == len(self.lower) == len(self.upper) >= 2):
            raise ValueError("borders need >= 2 matching knots")
        if np.any(np.diff(self.knots_x) <= 0):
            raise ValueError("border knots must be strictly increasing")

    @classmethod
    def straight(cls, y_low: float, y_up: float, x0: float = -1e3, x1: float = 1e4) -> "Borders":
        return cls([x0, x1], [y_low, y_low], [y_up, y_up])

    @property
    def domain(self) -> tuple[float, float]:
        return float(self.knots_x[0]), float(self.knots_x[-1])

    @cached_property
    def _splines(self):
        return (CubicSpline(self.knots_x, self.lower, bc_type="natural"),
                CubicSpline(self.knots_x, self.upper, bc_type="natural"))

    def _eval(self, which: int, x, nu: int):
        x = np.asarray(x, dtype=float)
        lo, hi = self.domain
        xc = np.clip(x, lo, hi)
        val = self._splines[which](xc, nu)
        if nu > 0:
            val = np.where((x < lo) | (x > hi), 0.0, val)
        return val

    def y_low(self, x, nu: int = 0):
        return self._eval(0, x, nu)

    def y_up(self, x, nu: int = 0):
        return self._eval(1, x, nu)

    def __eq__(self, other):
        if not isinstance(other, Borders):
            return NotImplemented
        return (np.array_equal(self.knots_x, other.knots_x) and np.array_equal(self.lower, other.lower)
                and np.array_equal(self.upper, other.upper))


@dataclass(frozen=True, eq=False)
class Scene:
    """One planning problem. Borders, agents and target_x are expressed in the
    reference-path frame; the ego and reference path may be in either frame
    (see `pilot.frenet`)."""

    ego: EgoState
    reference_path: np.ndarray
    borders: Borders
    agents: tuple[AgentPrediction, ...]
    v_min: float
    v_max: float
    horizon_steps: int
    dt: float
    target_x: float

    def __post_init__(self):
        object.__setattr__(self, "reference_path", _frozen_array(self.reference_path, (2,)))
        object.__setattr__(self, "agents", tuple(self.agents))

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f.name), getattr(other, f.name))
            if f.name == "reference_path" else getattr(self, f.name) == getattr(other, f.name)
            for f in fields(self)
        )

    def with_clamped_speed(self) -> "Scene":
        v = min(max(self.ego.speed, self.v_min), self.v_max)
        if v == self.ego.speed:
            return self
        return replace(self, ego=replace(self.ego, speed=v))


def default_target_x(ego_x: float, v_max: float, horizon_steps: int, dt: float) -> float:
    """Arc length reached by driving the reference path at v_max for the horizon."""
    return ego_x + v_max * horizon_steps * dt


@dataclass(frozen=True)
class NlpConfig:
    wheelbase: float = 4.8
    delta_max: float = 0.45
    a_min: float = -3.0
    a_max: float = 3.0
    jerk_max: float = 0.5
    steer_jerk_max: float = 0.18
    w_x: float = 0.1
    w_v: float = 2.5
    w_y: float = 0.05
    w_a: float = 1.0
    w_delta: float = 2.0
    constraint_tol: float = 1e-4
    max_iters: int = 30
    ellipse_margin: float = 0.2
    ego_length: float = 5.0
    ego_width: float = 2.0

    def __post_init__(self):
        problems = config_violations(self)
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "NlpConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SchemaError(f"unknown NlpConfig keys: {sorted(unknown)}")
        return cls(**d)


# speed limits used as scene defaults
DEFAULT_V_MIN = 0.0
DEFAULT_V_MAX = 10.0


def config_violations(cfg: NlpConfig) -> list[str]:
    out = []
    if not cfg.a_min < 0 < cfg.a_max:
        out.append("a_min < 0 < a_max required")
    for name in ("delta_max", "jerk_max", "steer_jerk_max", "wheelbase", "ego_length", "ego_width"):
        if not getattr(cfg, name) > 0:
            out.append(f"{name} must be > 0")
    for name in ("w_x", "w_v", "w_y", "w_a", "w_delta", "ellipse_margin"):
        if not getattr(cfg, name) >= 0:
            out.append(f"{name} must be >= 0")
    if not cfg.constraint_tol > 0:
        out.append("constraint_tol must be > 0")
    return out


@dataclass(frozen=True)
class Violation:
    field: str
    rule: str

    def __str__(self):
        return f"{self.field}: {self.rule}"


def validate_scene(scene: Scene) -> list[Violation]:
    """Report every broken Scene invariant; never raises."""
    out: list[Violation] = []
    N = scene.horizon_steps
    if not (isinstance(N, (int, np.integer)) and N >= 1):
        out.append(Violation("horizon_steps", "horizon-positive"))
    if not scene.dt > 0:
        out.append(Violation("dt", "timestep-positive"))
    if not scene.v_min >= 0:
        out.append(Violation("v_min", "speed-bound-nonnegative"))
    if not scene.v_min <= scene.v_max:
        out.append(Violation("v_min/v_max", "speed-bound-order"))
    elif not scene.v_min <= scene.ego.speed <= scene.v_max:
        out.append(Violation("ego.speed", "speed-within-bounds"))
    if not np.all(np.isfinite(scene.ego.as_array())):
        out.append(Violation("ego", "finite-state"))
    for i, ag in enumerate(scene.agents):
        if isinstance(N, (int, np.integer)) and len(ag.center_states) != N + 1:
            out.append(Violation(f"agents[{i}].center_states", "prediction-length"))
        if not (ag.half_length > 0 and ag.half_width > 0):
            out.append(Violation(f"agents[{i}]", "extent-positive"))
    xs = np.linspace(*scene.borders.domain, 257)
    if np.any(scene.borders.y_low(xs) >= scene.borders.y_up(xs)):
        out.append(Violation("borders", "lower-below-upper"))
    if len(scene.reference_path) < 2:
        out.append(Violation("reference_path", "min-two-points"))
    return out


# --- persistence -----------------------------------------------------------
# Files are JSON objects with a "schema" field. Floats are written with
# Python's shortest round-trip repr, so load(save(x)) is bit-identical.

def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def scene_to_dict(scene: Scene) -> dict:
    return {
        "schema": SCENE_SCHEMA,
        "ego": {"x": scene.ego.x, "y": scene.ego.y, "heading": scene.ego.heading, "speed": scene.ego.speed},
        "reference_path": _floats(scene.reference_path),
        "borders": {"knots_x": _floats(scene.borders.knots_x), "lower": _floats(scene.borders.lower),
                    "upper": _floats(scene.borders.upper)},
        "agents": [
            {"id": a.id, "center_states": _floats(a.center_states),
             "half_length": a.half_length, "half_width": a.half_width}
            for a in scene.agents
        ],
        "v_min": scene.v_min,
        "v_max": scene.v_max,
        "horizon_steps": int(scene.horizon_steps),
        "dt": scene.dt,
        "target_x": scene.target_x,
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("schema") != SCENE_SCHEMA:
        raise SchemaError(f"expected schema {SCENE_SCHEMA!r}, got {d.get('schema')!r}")
    try:
        return Scene(
            ego=EgoState(**d["ego"]),
            reference_path=np.array(d["reference_path"], dtype=float),
            borders=Borders(**d["borders"]),
            agents=tuple(
                AgentPrediction(a["id"], np.array(a["center_states"], dtype=float),
                                a["half_length"], a["half_width"])
                for a in d["agents"]
            ),
            v_min=d["v_min"], v_max=d["v_max"], horizon_steps=int(d["horizon_steps"]),
            dt=d["dt"], target_x=d["target_x"],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"malformed scene record: {e}") from e


def trajectory_to_dict(traj: Trajectory) -> dict:
    return {"schema": TRAJ_SCHEMA, "dt": traj.dt, "states": _floats(traj.states),
            "controls": _floats(traj.controls)}


def trajectory_from_dict(d: dict) -> Trajectory:
    if d.get("schema") != TRAJ_SCHEMA:
        raise SchemaError(f"expected schema {TRAJ_SCHEMA!r}, got {d.get('schema')!r}")
    try:
        return Trajectory(d["dt"], np.array(d["states"], dtype=float), np.array(d["controls"], dtype=float))
    except (KeyError, TypeError, ValueError) as e:
        raise SchemaError(f"malformed trajectory record: {e}") from e


def dump_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: not valid JSON ({e})") from e


def save_scene(scene: Scene, path) -> None:
    dump_json(scene_to_dict(scene), path)


def load_scene(path) -> Scene:
    """Load a scene; the ego speed is clamped into [v_min, v_max] on ingestion."""
    return scene_from_dict(load_json(path)).with_clamped_speed()


def save_trajectory(traj: Trajectory, path) -> None:
    dump_json(trajectory_to_dict(traj), path)


def load_trajectory(path) -> Trajectory:
    return trajectory_from_dict(load_json(path))
