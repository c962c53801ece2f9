"""World frame <-> reference-path frame transforms.

Two notions of "where is this point relative to the path" live here:

* `project_point` is the exact nearest-point projection onto the polyline.
* The frame transform (`ReferencePath.to_frame` / `from_frame`) sweeps a
  normal that is linearly blended between vertex normals along each segment.
  That makes (s, d) -> world a continuous bijection near the path, so the
  round trip is exact to rounding. On straight stretches and on the path
  itself both notions coincide.

No curvature correction is applied to speeds (pure projection).
"""

from __future__ import annotations

from dataclasses import replace
from typing import NamedTuple

import numpy as np

from .problem import EgoState, Scene, Trajectory, wrap_angle


class ProjectionOutOfDomain(ValueError):
    pass


class Projection(NamedTuple):
    arclength: float
    lateral: float
    at_boundary: bool


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


class ReferencePath:
    """World-frame polyline with per-vertex cumulative arc length."""

    def __init__(self, points):
        pts = np.array(points, dtype=float).reshape(-1, 2)
        if len(pts) < 2:
            raise ValueError("reference path needs at least 2 points")
        seg = np.diff(pts, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths <= 0):
            raise ValueError("consecutive path points must be distinct")
        self.points = pts
        self.seg_vec = seg
        self.seg_len = lengths
        self.cumulative_arclength = np.concatenate([[0.0], np.cumsum(lengths)])
        tang = seg / lengths[:, None]
        seg_normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
        vn = np.empty_like(pts)
        vn[0] = seg_normal[0]
        vn[-1] = seg_normal[-1]
        if len(pts) > 2:
            mid = seg_normal[:-1] + seg_normal[1:]
            norm = np.hypot(mid[:, 0], mid[:, 1])
            if np.any(norm < 1e-9):
                raise ValueError("reference path reverses direction")
            vn[1:-1] = mid / norm[:, None]
        self.vertex_normals = vn
        for arr in (self.points, self.seg_vec, self.seg_len, self.cumulative_arclength, self.vertex_normals):
            arr.setflags(write=False)

    @property
    def length(self) -> float:
        return float(self.cumulative_arclength[-1])

    # -- frame transform -------------------------------------------------
    def _locate(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < -1e-9) or np.any(s > self.length + 1e-9):
            raise ProjectionOutOfDomain(f"arc length outside [0, {self.length:.3f}]")
        i = np.clip(np.searchsorted(self.cumulative_arclength, s, side="right") - 1, 0, len(self.seg_len) - 1)
        t = (s - self.cumulative_arclength[i]) / self.seg_len[i]
        return i, t

    def _normal_at(self, i, t):
        m = (1.0 - t)[..., None] * self.vertex_normals[i] + t[..., None] * self.vertex_normals[i + 1]
        return m / np.hypot(m[..., 0], m[..., 1])[..., None]

    def tangent_angle(self, s):
        i, t = self._locate(s)
        n = self._normal_at(i, t)
        return np.arctan2(-n[..., 0], n[..., 1])

    def from_frame(self, s, d):
        """(arc length, lateral) -> world (x, y)."""
        s = np.asarray(s, dtype=float)
        d = np.asarray(d, dtype=float)
        i, t = self._locate(s)
        base = self.points[i] + t[..., None] * self.seg_vec[i]
        return base + d[..., None] * self._normal_at(i, t)

    def to_frame(self, xy):
        """World (x, y) -> (arc length, lateral) arrays; inverse of from_frame."""
        p = np.asarray(xy, dtype=float).reshape(-1, 2)
        A = self.points[:-1]
        e = self.seg_vec
        nA = self.vertex_normals[:-1]
        dn = self.vertex_normals[1:] - nA
        r = p[:, None, :] - A[None, :, :]                  # (P, S, 2)
        qa = -_cross(e, dn)[None, :] * np.ones(len(p))[:, None]
        qb = _cross(r, dn[None]) - _cross(e, nA)[None, :]
        qc = _cross(r, nA[None])
        ts = np.full(qa.shape + (2,), np.nan)
        lin = np.abs(qa) < 1e-12 * (np.abs(qb) + 1e-300)
        with np.errstate(divide="ignore", invalid="ignore"):
            ts[..., 0] = np.where(lin, -qc / qb, np.nan)
            disc = qb * qb - 4 * qa * qc
            sq = np.sqrt(np.where(disc >= 0, disc, np.nan))
            # numerically stable quadratic roots
            qq = -0.5 * (qb + np.copysign(sq, qb))
            r1 = qq / qa
            r2 = qc / qq
            ts[..., 0] = np.where(lin, ts[..., 0], r1)
            ts[..., 1] = np.where(lin, np.nan, r2)
        tol = 1e-12
        valid = (ts >= -tol) & (ts <= 1 + tol)
        tcl = np.clip(np.nan_to_num(ts, nan=0.0), 0.0, 1.0)
        seg_idx = np.broadcast_to(np.arange(len(e))[None, :, None], ts.shape)
        base = A[seg_idx] + tcl[..., None] * e[seg_idx]
        m = (1 - tcl)[..., None] * nA[seg_idx] + tcl[..., None] * self.vertex_normals[1:][seg_idx]
        m = m / np.hypot(m[..., 0], m[..., 1])[..., None]
        d = np.sum((p[:, None, None, :] - base) * m, axis=-1)
        s = self.cumulative_arclength[:-1][seg_idx] + tcl * self.seg_len[seg_idx]
        absd = np.where(valid, np.abs(d), np.inf)
        P = len(p)
        absd = absd.reshape(P, -1)
        s_flat = s.reshape(P, -1)
        d_flat = d.reshape(P, -1)
        best = np.min(absd, axis=1)
        if np.any(~np.isfinite(best)):
            raise ProjectionOutOfDomain("point projects beyond the path ends")
        # ties (within rounding) resolve toward the smaller arc length
        near = absd <= best[:, None] + 1e-12
        s_masked = np.where(near, s_flat, np.inf)
        k = np.argmin(s_masked, axis=1)
        rows = np.arange(P)
        return s_flat[rows, k], d_flat[rows, k]


def project_point(path: ReferencePath, p) -> Projection:
    """Nearest point on the polyline: (arc length, signed lateral offset).

    Lateral offset is positive to the left of the travel direction. Points past
    either end clamp to that end with `at_boundary` set.
    """
    p = np.asarray(p, dtype=float)
    A = path.points[:-1]
    e = path.seg_vec
    t = np.clip(np.sum((p - A) * e, axis=1) / path.seg_len ** 2, 0.0, 1.0)
    foot = A + t[:, None] * e
    dist = np.hypot(*(p - foot).T)
    best = dist.min()
    cand = np.flatnonzero(dist <= best + 1e-12)
    s_cand = path.cumulative_arclength[cand] + t[cand] * path.seg_len[cand]
    j = cand[np.argmin(s_cand)]
    s = float(path.cumulative_arclength[j] + t[j] * path.seg_len[j])
    side = _cross(e[j], p - foot[j])
    if dist[j] == 0.0:
        lateral = 0.0
    else:
        lateral = float(np.copysign(dist[j], side)) if side != 0 else float(dist[j])
    at_boundary = (j == 0 and t[j] == 0.0 and np.dot(p - A[0], e[0]) < 0) or (
        j == len(e) - 1 and t[j] == 1.0 and np.dot(p - path.points[-1], e[-1]) > 0)
    return Projection(s, lateral, bool(at_boundary))


def poses_to_frame(path: ReferencePath, poses) -> np.ndarray:
    """World (x, y, heading) rows -> reference-frame (s, d, relative heading)."""
    poses = np.asarray(poses, dtype=float).reshape(-1, 3)
    s, d = path.to_frame(poses[:, :2])
    rel = wrap_angle(poses[:, 2] - path.tangent_angle(s))
    return np.column_stack([s, d, np.atleast_1d(rel)])


def poses_from_frame(path: ReferencePath, poses) -> np.ndarray:
    poses = np.asarray(poses, dtype=float).reshape(-1, 3)
    xy = path.from_frame(poses[:, 0], poses[:, 1])
    head = wrap_angle(poses[:, 2] + path.tangent_angle(poses[:, 0]))
    return np.column_stack([xy, np.atleast_1d(head)])


def straight_path_points(length: float) -> np.ndarray:
    return np.array([[0.0, 0.0], [float(length), 0.0]])


def to_reference_frame(scene_world: Scene) -> Scene:
    """Express ego and agent predictions in the path frame; the returned scene's
    reference path is the x-axis over the same arc-length domain. Agent extents
    are kept unchanged."""
    path = ReferencePath(scene_world.reference_path)
    e = scene_world.ego
    ex = poses_to_frame(path, [[e.x, e.y, e.heading]])[0]
    ego = EgoState(ex[0], ex[1], ex[2], e.speed)
    agents = tuple(
        replace(a, center_states=poses_to_frame(path, a.center_states)) for a in scene_world.agents
    )
    return replace(scene_world, ego=ego, agents=agents, reference_path=straight_path_points(path.length))


def from_reference_frame(traj_ref: Trajectory, path: ReferencePath) -> Trajectory:
    """Map a reference-frame trajectory back to the world frame. Speeds and
    controls are unchanged."""
    st = np.array(traj_ref.states)
    st[:, :3] = poses_from_frame(path, st[:, :3])
    return Trajectory(traj_ref.dt, st, traj_ref.controls)
