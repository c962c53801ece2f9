"""Planning cost, hard-constraint residuals, their derivatives, and the CPN
penalty loss.

Decision vector layout (length 6N)::

    z = [x_1, y_1, th_1, v_1, ..., x_N, y_N, th_N, v_N, a_0, d_0, ..., a_{N-1}, d_{N-1}]

The initial state s_0 is fixed by the scene and is not part of z.
Equalities h(z) = 0 are the dynamics defects (4 per step, step-major).
Inequalities g(z) <= 0 are stacked family by family in the order of
`FAMILIES[1:]`; `Evaluator.family_slices` gives each family's rows.
All Jacobians are scipy CSR matrices; every row touches at most two
consecutive time steps (banded in time).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import scipy.sparse as sp

from .problem import NlpConfig, Scene, Trajectory, wrap_angle

FAMILIES = ("kinematic", "speed", "steer_bound", "accel_bound", "jerk", "steer_jerk", "border", "collision")

# corner offsets in the ego body frame, as multiples of (half length, half width)
_CORNER_SIGNS = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0], [-1.0, 1.0]])


@dataclass(frozen=True)
class ConstraintReport:
    kinematic: float
    speed: float
    steer_bound: float
    accel_bound: float
    jerk: float
    steer_jerk: float
    border: float
    collision: float

    @property
    def max_violation(self) -> float:
        return max(getattr(self, f.name) for f in fields(self))

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def satisfied(self, tol: float) -> dict:
        return {k: v <= tol for k, v in self.as_dict().items()}


@dataclass(frozen=True)
class EgoFootprint:
    length: float
    width: float

    @property
    def half_diagonal(self) -> float:
        return math.hypot(self.length / 2, self.width / 2)

    @property
    def offsets(self) -> np.ndarray:
        return _CORNER_SIGNS * np.array([self.length / 2, self.width / 2])

    def corners(self, x, y, heading) -> np.ndarray:
        """World corners, shape (..., 4, 2)."""
        off = self.offsets
        c, s = np.cos(heading)[..., None], np.sin(heading)[..., None]
        cx = np.asarray(x)[..., None] + c * off[:, 0] - s * off[:, 1]
        cy = np.asarray(y)[..., None] + s * off[:, 0] + c * off[:, 1]
        return np.stack([cx, cy], axis=-1)


@dataclass(frozen=True)
class ObstacleEllipse:
    centers: np.ndarray      # (N+1, 3) x, y, heading
    semi_axes: tuple[float, float]


def decision_size(N: int) -> int:
    return 6 * N


def pack(traj: Trajectory) -> np.ndarray:
    """Trajectory -> decision vector (drops the fixed initial state).

    Headings are unwrapped along the horizon so the vector is smooth."""
    st = np.array(traj.states)
    st[:, 2] = np.unwrap(st[:, 2])
    return np.concatenate([st[1:].ravel(), traj.controls.ravel()])


def unpack(z: np.ndarray, N: int) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=float)
    if z.shape != (6 * N,):
        raise ValueError(f"decision vector must have length {6 * N}, got {z.shape}")
    return z[:4 * N].reshape(N, 4), z[4 * N:].reshape(N, 2)


def to_trajectory(z: np.ndarray, scene: Scene) -> Trajectory:
    X, U = unpack(z, scene.horizon_steps)
    states = np.vstack([scene.ego.as_array(), X])
    return Trajectory(scene.dt, states, U)


def ellipses(scene: Scene, cfg: NlpConfig) -> list[ObstacleEllipse]:
    hd = EgoFootprint(cfg.ego_length, cfg.ego_width).half_diagonal
    return [ObstacleEllipse(a.center_states, (a.half_length + hd + cfg.ellipse_margin,
                                              a.half_width + hd + cfg.ellipse_margin))
            for a in scene.agents]


class Evaluator:
    """Cost / constraint evaluation for one (scene, config) pair."""

    def __init__(self, scene: Scene, cfg: NlpConfig):
        self.scene = scene
        self.cfg = cfg
        N = self.N = int(scene.horizon_steps)
        self.n = 6 * N
        self.dt = float(scene.dt)
        self.s0 = scene.ego.as_array()
        self.footprint = EgoFootprint(cfg.ego_length, cfg.ego_width)
        ells = ellipses(scene, cfg)
        self.w = len(ells)
        if self.w:
            self.agent_states = np.stack([np.asarray(e.centers)[1:N + 1] for e in ells])   # (w, N, 3)
            self.semi = np.array([e.semi_axes for e in ells])                             # (w, 2)
        else:
            self.agent_states = np.zeros((0, N, 3))
            self.semi = np.zeros((0, 2))

        sizes = [4 * N, 2 * N, 2 * N, 2 * N, 2 * (N - 1), 2 * (N - 1), 8 * N, 4 * self.w * N]
        self.family_slices = {}
        start = 0
        for name, size in zip(FAMILIES[1:], sizes[1:]):
            self.family_slices[name] = slice(start, start + size)
            start += size
        self.m_ineq = start
        self.m_eq = 4 * N

        # cost Hessian is constant and diagonal
        hd = np.zeros(self.n)
        hd[3:4 * N:4] = 2 * cfg.w_v
        hd[1:4 * N:4] = 2 * cfg.w_y
        hd[4 * (N - 1)] += 2 * cfg.w_x
        hd[4 * N::2] = 2 * cfg.w_a
        hd[4 * N + 1::2] = 2 * cfg.w_delta
        self.cost_hess_diag = hd
        self._linear_rows = self._build_linear_ineq()

        # simple bounds on z (speed, steering, acceleration)
        lb = np.full(self.n, -np.inf)
        ub = np.full(self.n, np.inf)
        lb[3:4 * N:4], ub[3:4 * N:4] = scene.v_min, scene.v_max
        lb[4 * N::2], ub[4 * N::2] = cfg.a_min, cfg.a_max
        lb[4 * N + 1::2], ub[4 * N + 1::2] = -cfg.delta_max, cfg.delta_max
        self.lower_bounds, self.upper_bounds = lb, ub

    # -- indexing helpers ------------------------------------------------
    def sidx(self, k, c):
        """Index of state k (1..N) component c."""
        return 4 * (np.asarray(k) - 1) + c

    def uidx(self, k, c):
        return 4 * self.N + 2 * np.asarray(k) + c

    def full_states(self, z) -> np.ndarray:
        X, _ = unpack(z, self.N)
        return np.vstack([self.s0, X])

    # -- cost --------------------------------------------------------------
    def cost(self, z) -> float:
        cfg, sc = self.cfg, self.scene
        S = self.full_states(z)
        _, U = unpack(z, self.N)
        return float(
            cfg.w_v * np.sum((S[:, 3] - sc.v_max) ** 2)
            + cfg.w_y * np.sum(S[:, 1] ** 2)
            + cfg.w_x * (S[-1, 0] - sc.target_x) ** 2
            + cfg.w_a * np.sum(U[:, 0] ** 2)
            + cfg.w_delta * np.sum(U[:, 1] ** 2)
        )

    def cost_gradient(self, z) -> np.ndarray:
        cfg, sc, N = self.cfg, self.scene, self.N
        X, U = unpack(z, N)
        g = np.zeros(self.n)
        G = g[:4 * N].reshape(N, 4)
        G[:, 3] = 2 * cfg.w_v * (X[:, 3] - sc.v_max)
        G[:, 1] = 2 * cfg.w_y * X[:, 1]
        G[-1, 0] += 2 * cfg.w_x * (X[-1, 0] - sc.target_x)
        GU = g[4 * N:].reshape(N, 2)
        GU[:, 0] = 2 * cfg.w_a * U[:, 0]
        GU[:, 1] = 2 * cfg.w_delta * U[:, 1]
        return g

    # -- equalities --------------------------------------------------------
    def equalities(self, z) -> np.ndarray:
        return self._eq(z, jac=False)[0]

    def _eq(self, z, jac: bool):
        N, dt, L = self.N, self.dt, self.cfg.wheelbase
        S = self.full_states(z)
        _, U = unpack(z, N)
        x, y, th, v = S[:-1].T
        a, d = U.T
        c, s, t = np.cos(th), np.sin(th), np.tan(d)
        nxt = S[1:]
        h = np.empty((N, 4))
        h[:, 0] = nxt[:, 0] - x - v * c * dt
        h[:, 1] = nxt[:, 1] - y - v * s * dt
        h[:, 2] = wrap_angle(nxt[:, 2] - th - v * t * dt / L)
        h[:, 3] = nxt[:, 3] - v - a * dt
        h = h.ravel()
        if not jac:
            return h, None
        k = np.arange(N)
        rows, cols, vals = [], [], []

        def add(r, cidx, val):
            r, cidx, val = np.broadcast_arrays(r, cidx, val)
            rows.append(r.ravel()); cols.append(cidx.ravel()); vals.append(val.ravel())

        for comp in range(4):
            add(4 * k + comp, self.sidx(k + 1, comp), 1.0)
        kp = k[1:]             # previous state is a variable only for k >= 1
        cp, sp_, tp, vp = c[1:], s[1:], t[1:], v[1:]
        add(4 * kp + 0, self.sidx(kp, 0), -1.0)
        add(4 * kp + 0, self.sidx(kp, 2), vp * sp_ * dt)
        add(4 * kp + 0, self.sidx(kp, 3), -cp * dt)
        add(4 * kp + 1, self.sidx(kp, 1), -1.0)
        add(4 * kp + 1, self.sidx(kp, 2), -vp * cp * dt)
        add(4 * kp + 1, self.sidx(kp, 3), -sp_ * dt)
        add(4 * kp + 2, self.sidx(kp, 2), -1.0)
        add(4 * kp + 2, self.sidx(kp, 3), -tp * dt / L)
        add(4 * kp + 3, self.sidx(kp, 3), -1.0)
        add(4 * k + 2, self.uidx(k, 1), -v * (1 + t * t) * dt / L)
        add(4 * k + 3, self.uidx(k, 0), -dt)
        J = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.m_eq, self.n))
        return h, J

    # -- inequalities ------------------------------------------------------
    def _build_linear_ineq(self):
        """Constant Jacobian rows and offsets for the bound/jerk families:
        g_lin = A z + b."""
        N, cfg, sc = self.N, self.cfg, self.scene
        rows, cols, vals, b = [], [], [], []
        r = 0

        def bound(idx, lo, hi):
            nonlocal r
            m = len(idx)
            rows.extend(range(r, r + m)); cols.extend(idx); vals.extend([-1.0] * m); b.extend([lo] * m)
            r += m
            rows.extend(range(r, r + m)); cols.extend(idx); vals.extend([1.0] * m); b.extend([-hi] * m)
            r += m

        k1 = np.arange(1, N + 1)
        k0 = np.arange(N)
        bound(self.sidx(k1, 3).tolist(), sc.v_min, sc.v_max)
        bound(self.uidx(k0, 1).tolist(), -cfg.delta_max, cfg.delta_max)
        bound(self.uidx(k0, 0).tolist(), cfg.a_min, cfg.a_max)
        for comp, lim in ((0, cfg.jerk_max), (1, cfg.steer_jerk_max)):
            kk = np.arange(N - 1)
            for sign in (1.0, -1.0):
                for j in kk:
                    rows.extend([r, r]); cols.extend([self.uidx(j + 1, comp), self.uidx(j, comp)])
                    vals.extend([sign, -sign]); b.append(-lim)
                    r += 1
        A = sp.csr_matrix((vals, (rows, cols)), shape=(r, self.n))
        return A, np.array(b, dtype=float)

    def inequalities(self, z) -> np.ndarray:
        return self._ineq(z, jac=False)[0]

    def _ineq(self, z, jac: bool):
        N = self.N
        A, b = self._linear_rows
        g_lin = A @ z + b
        X, _ = unpack(z, N)
        x, y, th = X[:, 0], X[:, 1], X[:, 2]
        off = self.footprint.offsets                       # (4, 2)
        c, s = np.cos(th)[:, None], np.sin(th)[:, None]
        cx = x[:, None] + c * off[:, 0] - s * off[:, 1]    # (N, 4)
        cy = y[:, None] + s * off[:, 0] + c * off[:, 1]
        dcx_dth = -s * off[:, 0] - c * off[:, 1]
        dcy_dth = c * off[:, 0] - s * off[:, 1]
        bd = self.scene.borders
        ylo, yup = bd.y_low(cx), bd.y_up(cx)
        g_border = np.concatenate([(ylo - cy).ravel(), (cy - yup).ravel()])

        w = self.w
        if w:
            ag = self.agent_states                          # (w, N, 3)
            ax, ay, phi = ag[..., 0][..., None], ag[..., 1][..., None], ag[..., 2][..., None]
            cphi, sphi = np.cos(phi), np.sin(phi)
            dx, dy = cx[None] - ax, cy[None] - ay          # (w, N, 4)
            rx = cphi * dx + sphi * dy
            ry = -sphi * dx + cphi * dy
            Ax = self.semi[:, 0][:, None, None]
            Ay = self.semi[:, 1][:, None, None]
            g_coll = (1.0 - (rx / Ax) ** 2 - (ry / Ay) ** 2).ravel()
        else:
            g_coll = np.zeros(0)
        g = np.concatenate([g_lin, g_border, g_coll])
        if not jac:
            return g, None

        k = np.arange(1, N + 1)[:, None] * np.ones((1, 4), dtype=int)   # (N, 4)
        ix, iy, ith = self.sidx(k, 0), self.sidx(k, 1), self.sidx(k, 2)
        nb = 4 * N
        r0 = A.shape[0]
        rows_lo = r0 + np.arange(nb).reshape(N, 4)
        rows_up = rows_lo + nb
        dlo, dup = bd.y_low(cx, 1), bd.y_up(cx, 1)
        R = [rows_lo, rows_lo, rows_lo, rows_up, rows_up, rows_up]
        C = [ix, iy, ith, ix, iy, ith]
        V = [dlo, -np.ones_like(cx), dlo * dcx_dth - dcy_dth,
             -dup, np.ones_like(cx), dcy_dth - dup * dcx_dth]
        if w:
            rc = r0 + 2 * nb + np.arange(w * N * 4).reshape(w, N, 4)
            gx = -2 * rx / Ax ** 2
            gy = -2 * ry / Ay ** 2
            dg_dcx = gx * cphi - gy * sphi
            dg_dcy = gx * sphi + gy * cphi
            Kb = np.broadcast_to
            R += [rc, rc, rc]
            C += [Kb(ix, rc.shape), Kb(iy, rc.shape), Kb(ith, rc.shape)]
            V += [dg_dcx, dg_dcy, dg_dcx * dcx_dth[None] + dg_dcy * dcy_dth[None]]
        rows = np.concatenate([np.ravel(a) for a in R])
        cols = np.concatenate([np.ravel(a) for a in C])
        vals = np.concatenate([np.ravel(a) for a in V])
        J_nl = sp.csr_matrix((vals, (rows - r0, cols)), shape=(self.m_ineq - r0, self.n))
        return g, sp.vstack([A, J_nl], format="csr")

    # -- second order --------------------------------------------------------
    def constraint_hessian(self, z, w_eq, w_ineq) -> np.ndarray:
        """Dense sum_i w_eq[i] * Hess h_i + sum_j w_ineq[j] * Hess g_j.

        Only the dynamics, border and collision rows have curvature."""
        N, dt, L, n = self.N, self.dt, self.cfg.wheelbase, self.n
        H = np.zeros((n, n))
        ii, jj, vv = [], [], []

        def add(i, j, v):
            i, j, v = np.broadcast_arrays(i, j, v)
            ii.append(i.ravel()); jj.append(j.ravel()); vv.append(v.ravel())

        S = self.full_states(z)
        _, U = unpack(z, N)
        th, v = S[:-1, 2], S[:-1, 3]
        d = U[:, 1]
        c, s, t = np.cos(th), np.sin(th), np.tan(d)
        W = np.asarray(w_eq, dtype=float).reshape(N, 4)
        sec2 = 1 + t * t
        k = np.arange(N)
        add(self.uidx(k, 1), self.uidx(k, 1), -W[:, 2] * v * 2 * t * sec2 * dt / L)
        kp = k[1:]
        Wp = W[1:]
        ith, iv = self.sidx(kp, 2), self.sidx(kp, 3)
        add(ith, ith, (Wp[:, 0] * v[1:] * c[1:] + Wp[:, 1] * v[1:] * s[1:]) * dt)
        tv = (Wp[:, 0] * s[1:] - Wp[:, 1] * c[1:]) * dt
        add(ith, iv, tv)
        add(iv, ith, tv)
        dv = -Wp[:, 2] * sec2[1:] * dt / L
        add(iv, self.uidx(kp, 1), dv)
        add(self.uidx(kp, 1), iv, dv)

        wi = np.asarray(w_ineq, dtype=float)
        X, _ = unpack(z, N)
        x, y, th = X[:, 0], X[:, 1], X[:, 2]
        off = self.footprint.offsets
        cth, sth = np.cos(th)[:, None], np.sin(th)[:, None]
        ox, oy = off[:, 0], off[:, 1]
        cx = x[:, None] + cth * ox - sth * oy
        cy = y[:, None] + sth * ox + cth * oy
        dcx = -sth * ox - cth * oy
        dcy = cth * ox - sth * oy
        d2cx = -(cx - x[:, None])
        d2cy = -(cy - y[:, None])
        kk = np.arange(1, N + 1)[:, None] * np.ones((1, 4), dtype=int)
        ix, iy, ith = self.sidx(kk, 0), self.sidx(kk, 1), self.sidx(kk, 2)
        bd = self.scene.borders
        nb = 4 * N
        sl = self.family_slices["border"]
        wlo = wi[sl.start:sl.start + nb].reshape(N, 4)
        wup = wi[sl.start + nb:sl.stop].reshape(N, 4)
        d1lo, d2lo = bd.y_low(cx, 1), bd.y_low(cx, 2)
        d1up, d2up = bd.y_up(cx, 1), bd.y_up(cx, 2)
        hxx = wlo * d2lo - wup * d2up
        hxt = hxx * dcx
        htt = (wlo * (d2lo * dcx ** 2 + d1lo * d2cx - d2cy)
               + wup * (-d2up * dcx ** 2 - d1up * d2cx + d2cy))
        add(ix, ix, hxx)
        add(ix, ith, hxt)
        add(ith, ix, hxt)
        add(ith, ith, htt)

        if self.w:
            sl = self.family_slices["collision"]
            wc = wi[sl].reshape(self.w, N, 4)
            ag = self.agent_states
            ax, ay, phi = ag[..., 0][..., None], ag[..., 1][..., None], ag[..., 2][..., None]
            cphi, sphi = np.cos(phi), np.sin(phi)
            Ax = self.semi[:, 0][:, None, None] ** 2
            Ay = self.semi[:, 1][:, None, None] ** 2
            dx, dy = cx[None] - ax, cy[None] - ay
            rx = cphi * dx + sphi * dy
            ry = -sphi * dx + cphi * dy
            gx, gy = -2 * rx / Ax, -2 * ry / Ay
            g_cx = gx * cphi - gy * sphi
            g_cy = gx * sphi + gy * cphi
            pxx = -2 * (cphi ** 2 / Ax + sphi ** 2 / Ay)
            pxy = -2 * cphi * sphi * (1 / Ax - 1 / Ay)
            pyy = -2 * (sphi ** 2 / Ax + cphi ** 2 / Ay)
            a, b = dcx[None], dcy[None]
            txx = (wc * pxx).sum(0)
            txy = (wc * pxy).sum(0)
            tyy = (wc * pyy).sum(0)
            txt = (wc * (pxx * a + pxy * b)).sum(0)
            tyt = (wc * (pxy * a + pyy * b)).sum(0)
            ttt = (wc * (pxx * a * a + 2 * pxy * a * b + pyy * b * b
                         + g_cx * d2cx[None] + g_cy * d2cy[None])).sum(0)
            add(ix, ix, txx)
            add(iy, iy, tyy)
            add(ix, iy, txy)
            add(iy, ix, txy)
            add(ix, ith, txt)
            add(ith, ix, txt)
            add(iy, ith, tyt)
            add(ith, iy, tyt)
            add(ith, ith, ttt)

        np.add.at(H, (np.concatenate(ii), np.concatenate(jj)), np.concatenate(vv))
        return H

    # -- combined -----------------------------------------------------------
    def residuals(self, z):
        return self.inequalities(z), self.equalities(z)

    def jacobians(self, z):
        g, Jg = self._ineq(z, jac=True)
        h, Jh = self._eq(z, jac=True)
        return g, Jg, h, Jh

    def report(self, z=None, g=None, h=None) -> ConstraintReport:
        if g is None or h is None:
            g, h = self.residuals(z)
        vals = {"kinematic": float(np.max(np.abs(h))) if h.size else 0.0}
        for name, sl in self.family_slices.items():
            part = g[sl]
            vals[name] = float(max(0.0, part.max())) if part.size else 0.0
        return ConstraintReport(**vals)

    def cpn_loss(self, z, penalty_weight: float, family_scale: dict | None = None):
        """cost + w * sum relu(g)^2 + w * sum h^2, with analytic gradient.

        `family_scale` optionally divides each family's residuals by a unit
        scale before squaring."""
        if not penalty_weight > 0:
            raise ValueError("penalty_weight must be positive")
        g, Jg, h, Jh = self.jacobians(z)
        sg = np.ones_like(g)
        sh = 1.0
        if family_scale:
            for name, sl in self.family_slices.items():
                sg[sl] = 1.0 / family_scale.get(name, 1.0)
            sh = 1.0 / family_scale.get("kinematic", 1.0)
        rg = np.maximum(0.0, g) * sg
        rh = h * sh
        val = self.cost(z) + penalty_weight * (rg @ rg + rh @ rh)
        grad = (self.cost_gradient(z) + 2 * penalty_weight * (Jg.T @ (rg * sg))
                + 2 * penalty_weight * (Jh.T @ (rh * sh)))
        return float(val), grad


# -- functional API ----------------------------------------------------------

def cost(z, scene: Scene, cfg: NlpConfig) -> float:
    return Evaluator(scene, cfg).cost(z)


def cost_gradient(z, scene: Scene, cfg: NlpConfig) -> np.ndarray:
    return Evaluator(scene, cfg).cost_gradient(z)


def constraint_residuals(z, scene: Scene, cfg: NlpConfig):
    """Returns (ConstraintReport, g, h) with g <= 0 and h = 0 when feasible."""
    ev = Evaluator(scene, cfg)
    g, h = ev.residuals(z)
    return ev.report(g=g, h=h), g, h


def constraint_jacobians(z, scene: Scene, cfg: NlpConfig):
    """Returns sparse (Jg, Jh)."""
    _, Jg, _, Jh = Evaluator(scene, cfg).jacobians(z)
    return Jg, Jh


def cpn_loss(z, scene: Scene, cfg: NlpConfig, penalty_weight: float, family_scale=None):
    return Evaluator(scene, cfg).cpn_loss(z, penalty_weight, family_scale)


def trajectory_report(traj: Trajectory, scene: Scene, cfg: NlpConfig) -> ConstraintReport:
    """Constraint audit of a full trajectory (its initial state must be the ego)."""
    return constraint_residuals(pack(traj), scene, cfg)[0]
