"""Initializations for the solver: the heuristic baselines, the clean-up applied
to raw network waypoints, and the multi-start expert."""

from __future__ import annotations

import enum
import math
from dataclasses import replace

import numpy as np

from .dynamics import inverse_dynamics, rollout
from .nlp import SolveReport, SolverOptions, select_best, solve
from .problem import NlpConfig, Scene, Trajectory, wrap_angle


class Heuristic(str, enum.Enum):
    NONE = "none"
    CONST_VEL = "constvel"
    CONST_ACCEL = "constaccel"
    CONST_DECEL = "constdecel"


def _straight_positions(scene: Scene, speeds) -> np.ndarray:
    """Positions driven along the ego heading with speed v_k on step k."""
    e = scene.ego
    steps = np.concatenate([[0.0], np.cumsum(np.asarray(speeds[:-1]) * scene.dt)])
    return np.column_stack([e.x + steps * math.cos(e.heading), e.y + steps * math.sin(e.heading)])


def heuristic_init(kind, scene: Scene, cfg: NlpConfig | None = None) -> Trajectory:
    """One of the four baseline initializations; controls come from inverse
    dynamics of the generated positions."""
    cfg = cfg or NlpConfig()
    kind = Heuristic(kind)
    N, dt, L = scene.horizon_steps, scene.dt, cfg.wheelbase
    e = scene.ego
    if kind is Heuristic.NONE:
        return inverse_dynamics(np.zeros((N + 1, 2)), 0.0, dt, L, heading0=0.0)
    v = np.empty(N + 1)
    v[0] = e.speed
    for k in range(N):
        if kind is Heuristic.CONST_VEL:
            v[k + 1] = v[k]
        elif kind is Heuristic.CONST_ACCEL:
            v[k + 1] = min(v[k] + cfg.a_max * dt, scene.v_max)
        else:
            v[k + 1] = max(v[k] + cfg.a_min * dt, scene.v_min)
    return inverse_dynamics(_straight_positions(scene, v), e.speed, dt, L, heading0=e.heading)


def lane_centered_init(scene: Scene, cfg: NlpConfig | None = None, center: float = 0.0,
                       accelerate: bool = False) -> Trajectory:
    """Constant speed (or the ConstAccel profile) while easing the lateral
    offset to `center` (the reference line y = 0 by default) over the first
    half of the horizon."""
    cfg = cfg or NlpConfig()
    N, dt = scene.horizon_steps, scene.dt
    e = scene.ego
    k = np.arange(N + 1)
    v = np.full(N + 1, e.speed)
    if accelerate:
        v = np.minimum(e.speed + cfg.a_max * dt * k, max(e.speed, scene.v_max))
    x = e.x + np.concatenate([[0.0], np.cumsum(v[:-1] * dt)])
    blend = 0.5 * (1.0 + np.cos(np.pi * np.minimum(1.0, k / max(1, N // 2))))
    y = center + (e.y - center) * blend
    return inverse_dynamics(np.column_stack([x, y]), e.speed, dt, cfg.wheelbase, heading0=e.heading)


# -- sanitising raw waypoints ----------------------------------------------

# Controls recovered from stored positions carry rounding noise. Free values
# are rounded to a power-of-two grid a few times coarser than that noise, and
# values within one grid step of a clamp edge snap onto it, so a second pass
# lands on exactly the same controls. The noise model assumes |p| < 1024 m.
_POS_EPS = float(np.spacing(1024.0))
# shortest step (m) whose heading is trusted for steering recovery
_MIN_STEER_STEP = 1e-2
# keeps speeds this far inside their bounds against rounding in the recursion
_SPEED_MARGIN = 1e-12


def _grid(noise: float) -> float:
    return 2.0 ** math.ceil(math.log2(4.0 * noise))


def _ramp_limit(c: float, jerk: float, steps: int) -> float:
    """Largest a >= 0 with sum_{j < min(steps, m)} (a - j*jerk) <= c, where m
    counts the positive terms: the steepest accel whose jerk-limited ramp back
    to zero adds at most c to the speed within `steps` steps."""
    if c <= 0.0:
        return 0.0
    for M in range(1, steps + 1):
        a = (c + jerk * M * (M - 1) / 2) / M
        if a <= M * jerk or M == steps:
            return a
    return math.inf


def _nudge(a: float, ok, direction: float) -> float:
    for _ in range(64):
        if ok(a):
            break
        a = float(np.nextafter(a, direction * math.inf))
    return a


def _settle(x: float, lo: float, hi: float, q: float) -> float:
    """Round to the grid q, then clamp into [lo, hi] with edges within q
    treated as hit. A window too narrow to tell its edges apart gives the
    point closest to zero."""
    if hi - lo <= 2.0 * q:
        return min(max(0.0, lo), hi)
    x = round(x / q) * q
    if x >= hi - q:
        return hi
    if x <= lo + q:
        return lo
    return x


def _sanitize_accel(v0: float, desired, dt: float, cfg: NlpConfig, v_min: float, v_max: float) -> np.ndarray:
    N = len(desired)
    J = cfg.jerk_max
    q = _grid(8.0 * _POS_EPS / dt ** 2)
    acc = np.empty(N)
    v = v0
    prev = None
    for k in range(N):
        lo, hi = cfg.a_min, cfg.a_max
        if prev is not None:
            lo, hi = max(lo, prev - J), min(hi, prev + J)
        left = N - k
        lo = max(lo, -_ramp_limit((v - v_min - _SPEED_MARGIN) / dt, J, left))
        hi = min(hi, _ramp_limit((v_max - v - _SPEED_MARGIN) / dt, J, left))
        if lo > hi:
            # fall back to easing toward zero acceleration
            base = 0.0 if prev is None else min(max(0.0, prev - J), prev + J)
            lo = hi = base
        a = _settle(float(desired[k]), lo, hi, q)

        def too_high(x, v=v, prev=prev):
            return v + x * dt > v_max or x > cfg.a_max or (prev is not None and x - prev > J)

        def fits(x, v=v, prev=prev):
            return (not too_high(x) and v + x * dt >= v_min and x >= cfg.a_min
                    and (prev is None or x - prev >= -J))

        if not fits(a):
            a = _nudge(a, fits, -1.0 if too_high(a) else 1.0)
        acc[k] = a
        v = v + a * dt
        prev = a
    return acc


HEADING_CORRECTION = 0.6     # rad of heading error the steering pass may win back per step


def _sanitize_steer(headings, heading0: float, speeds, dt: float, cfg: NlpConfig) -> np.ndarray:
    """Follow the raw heading increments at the clamped speeds, plus a
    bounded pull back toward the raw heading so that clamping does not leave
    a lasting heading offset."""
    N = len(headings) - 1
    L, dmax, J = cfg.wheelbase, cfg.delta_max, cfg.steer_jerk_max
    s = np.asarray(speeds, dtype=float) * dt
    out = np.empty(N)
    prev = None
    th = heading0
    for k in range(N):
        lo, hi = -dmax, dmax
        if prev is not None:
            lo, hi = max(lo, prev - J), min(hi, prev + J)
        shortest = min(s[k], s[k + 1])
        if shortest < _MIN_STEER_STEP:
            # stopped, or heading into a step too short to reveal its heading
            d = min(max(0.0, lo), hi)
        else:
            q = _grid(4.0 * cfg.wheelbase * _POS_EPS / (s[k] * shortest))
            step = wrap_angle(headings[k + 1] - headings[k])
            # the last steer only sets a heading no position reveals; leave it uncorrected
            err = 0.0 if k == N - 1 else float(np.clip(wrap_angle(headings[k] - th),
                                                       -HEADING_CORRECTION, HEADING_CORRECTION))
            d = _settle(math.atan(L * (step + err) / s[k]), lo, hi, q)

        def fits(x, prev=prev):
            return abs(x) <= dmax and (prev is None or abs(x - prev) <= J)

        if not fits(d):
            d = _nudge(d, fits, -1.0 if d > 0 else 1.0)
        out[k] = d
        prev = d
        th = wrap_angle(th + speeds[k] * math.tan(d) / L * dt)
    return out


def sanitize_network_output(positions, scene: Scene, cfg: NlpConfig | None = None) -> Trajectory:
    """Turn raw waypoints into a dynamically consistent trajectory whose
    speed, steering, acceleration, jerk and steering-jerk bounds hold exactly.

    `positions` holds N or N+1 points; with N+1 the first is replaced by the
    ego position. Speeds are clipped to the scene limits, accelerations are
    recomputed from them and clamped (bounds, then a forward jerk pass that
    also keeps every later speed reachable within bounds), steering follows
    the raw headings and is clamped (bound, then a forward steering-jerk
    pass), and the result is
    rolled out from the ego state. Recovered controls are rounded to a fine
    grid so that the map is idempotent.
    """
    cfg = cfg or NlpConfig()
    N, dt, L = scene.horizon_steps, scene.dt, cfg.wheelbase
    e = scene.ego
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(p) == N:
        p = np.vstack([[e.x, e.y], p])
    elif len(p) == N + 1:
        p = p.copy()
        p[0] = (e.x, e.y)
    else:
        raise ValueError(f"expected {N} or {N + 1} positions, got {len(p)}")
    raw = inverse_dynamics(p, e.speed, dt, L, heading0=e.heading)
    v = np.clip(raw.states[:, 3], scene.v_min, scene.v_max)
    v[0] = e.speed
    acc = _sanitize_accel(e.speed, np.diff(v) / dt, dt, cfg, scene.v_min, scene.v_max)
    speeds = np.empty(N + 1)
    speeds[0] = e.speed
    for k in range(N):
        speeds[k + 1] = speeds[k] + acc[k] * dt
    steer = _sanitize_steer(raw.states[:, 2], e.heading, speeds, dt, cfg)
    return rollout(e, np.column_stack([acc, steer]), dt, L)


# -- the expert ---------------------------------------------------------------

ENSEMBLE = ("none", "constvel", "constaccel", "constdecel", "lanecentered", "laneleft", "laneright")
LANE_WIDTH = 5.5


def lane_change_centers(scene: Scene, cfg: NlpConfig | None = None, lane_width: float = LANE_WIDTH) -> dict:
    """Lateral targets one lane width either side of the ego's lane (lanes are
    centred on multiples of lane_width), kept when the ego fits between the
    borders there over the horizon."""
    cfg = cfg or NlpConfig()
    e = scene.ego
    xs = e.x + e.speed * scene.dt * np.arange(scene.horizon_steps + 1)
    lo = float(np.max(scene.borders.y_low(xs)))
    hi = float(np.min(scene.borders.y_up(xs)))
    own = round(e.y / lane_width) * lane_width
    half = 0.5 * cfg.ego_width
    out = {}
    for name, c in (("laneleft", own + lane_width), ("laneright", own - lane_width)):
        if lo + half <= c <= hi - half:
            out[name] = c
    return out


def ensemble_inits(scene: Scene, cfg: NlpConfig | None = None, lane_width: float = LANE_WIDTH) -> dict:
    """Initial trajectories of the expert members, in ENSEMBLE order. The lane
    change members are present only where the neighbouring lane exists."""
    inits = {h.value: heuristic_init(h, scene, cfg) for h in Heuristic}
    inits["lanecentered"] = lane_centered_init(scene, cfg)
    for name, c in lane_change_centers(scene, cfg, lane_width).items():
        inits[name] = lane_centered_init(scene, cfg, center=c, accelerate=True)
    return {name: inits[name] for name in ENSEMBLE if name in inits}


def expert_members(scene: Scene, cfg: NlpConfig, options: SolverOptions | None = None) -> dict:
    """Solve from every ensemble member; name -> SolveReport in ensemble order."""
    return {name: solve(scene, init, cfg, options) for name, init in ensemble_inits(scene, cfg).items()}


def expert_from_members(members: dict) -> SolveReport:
    """Best member (least cost among converged, ties by order) with the
    ensemble's total wall time."""
    reports = list(members.values())
    best = reports[select_best(reports)]
    return replace(best, wall_time=sum(r.wall_time for r in reports))


def expert_plan(scene: Scene, cfg: NlpConfig, options: SolverOptions | None = None) -> SolveReport:
    return expert_from_members(expert_members(scene, cfg, options))
