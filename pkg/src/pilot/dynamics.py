"""Discrete kinematic bicycle model (explicit Euler) and helpers."""

from __future__ import annotations

import math

import numpy as np

from .problem import Control, EgoState, Trajectory, wrap_angle

# Below this speed steering has no kinematic effect; inverse dynamics reports 0.
STEER_SPEED_EPS = 1e-6


class DegenerateInput(ValueError):
    pass


def _euler(x, y, th, v, a, d, dt, L):
    # heading left unwrapped; callers wrap
    return (x + v * math.cos(th) * dt, y + v * math.sin(th) * dt,
            th + v * math.tan(d) / L * dt, v + a * dt)


def step(s: EgoState, u: Control, dt: float, L: float) -> EgoState:
    return EgoState(*_euler(s.x, s.y, s.heading, s.speed, u.accel, u.steer, dt, L))


def rollout_array(s0, controls, dt: float, L: float) -> np.ndarray:
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    out = np.empty((len(controls) + 1, 4))
    out[0] = s0
    x, y, th, v = (float(c) for c in s0)
    for k, (a, d) in enumerate(controls.tolist()):
        x, y, th, v = _euler(x, y, th, v, a, d, dt, L)
        th = wrap_angle(th)
        out[k + 1] = (x, y, th, v)
    return out


def rollout(s0: EgoState, controls, dt: float, L: float) -> Trajectory:
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    if len(controls) == 0:
        raise ValueError("rollout needs at least one control")
    return Trajectory(dt, rollout_array(s0.as_array(), controls, dt, L), controls)


def inverse_dynamics(positions, v0: float, dt: float, L: float, heading0: float | None = None) -> Trajectory:
    """Rebuild headings, speeds and controls from N+1 positions.

    Heading k points from p_k to p_{k+1}; the last heading is repeated. Speeds
    are segment lengths over dt with v_0 replaced by `v0`, and the last speed
    repeats the previous one, so the final control is always (0, 0) before any
    later adjustment. A zero-length segment inherits the previous heading (or
    `heading0` / the next valid heading at the start).
    """
    p = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(p) < 3:
        raise DegenerateInput("inverse dynamics needs at least 3 positions")
    if not np.all(np.isfinite(p)) or not math.isfinite(v0):
        raise DegenerateInput("non-finite positions or speed")
    if not dt > 0:
        raise ValueError("dt must be positive")
    diff = np.diff(p, axis=0)
    seg = np.hypot(diff[:, 0], diff[:, 1])
    n = len(diff)
    moving = seg > 0
    head = np.arctan2(diff[:, 1], diff[:, 0])
    if not moving.all():
        if not moving.any():
            if heading0 is None:
                raise DegenerateInput("all positions coincide and no heading given")
            head[:] = heading0
        else:
            first = heading0 if heading0 is not None else head[np.argmax(moving)]
            prev = first
            for k in range(n):
                if moving[k]:
                    prev = head[k]
                else:
                    head[k] = prev
    headings = np.append(head, head[-1])
    speeds = np.append(seg / dt, seg[-1] / dt)
    speeds[0] = v0
    if n == 1:
        speeds[-1] = v0
    accel = np.diff(speeds) / dt
    dth = wrap_angle(np.diff(headings))
    vk = speeds[:-1]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        steer = np.where(np.abs(vk) < STEER_SPEED_EPS, 0.0, np.arctan(L * dth / (vk * dt)))
    states = np.column_stack([p, headings, speeds])
    return Trajectory(dt, states, np.column_stack([accel, steer]))


def defect_vector(states: np.ndarray, controls: np.ndarray, dt: float, L: float) -> np.ndarray:
    """Per-step residual states[k+1] - f(states[k], controls[k]) (heading wrapped)."""
    s = np.asarray(states, dtype=float)
    u = np.asarray(controls, dtype=float)
    x, y, th, v = s[:-1].T
    a, d = u.T
    pred = np.column_stack([
        x + v * np.cos(th) * dt,
        y + v * np.sin(th) * dt,
        th + v * np.tan(d) / L * dt,
        v + a * dt,
    ])
    r = s[1:] - pred
    r[:, 2] = wrap_angle(r[:, 2])
    return r


def defect(traj: Trajectory, L: float) -> float:
    """Max component-wise dynamics violation over the trajectory.

    Evaluated with the same scalar arithmetic as `rollout`, so a rolled-out
    trajectory has a defect of exactly zero.
    """
    worst = 0.0
    st = traj.states.tolist()
    for k, (a, d) in enumerate(traj.controls.tolist()):
        pred = _euler(*st[k], a, d, traj.dt, L)
        nxt = st[k + 1]
        r = (nxt[0] - pred[0], nxt[1] - pred[1], wrap_angle(nxt[2] - wrap_angle(pred[2])), nxt[3] - pred[3])
        worst = max(worst, max(abs(c) for c in r))
    return worst
