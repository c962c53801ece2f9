"""The efficient optimiser: a sequential-quadratic-programming solver that
refines a full-horizon initial trajectory into a locally optimal, feasible
plan.

Each iteration builds a QP from the exact Lagrangian Hessian (made positive
definite if needed) and the linearised constraints. The dynamics equalities
are condensed out, so the QP is posed in the control steps only. Border and
collision rows of one timestep share an elastic variable, which keeps every QP
feasible while still pricing the violation at every step.
Steps are globalised with an exact-penalty merit function, Armijo
backtracking and a second-order correction.

Corner-only collision rows have a spurious local minimum of violation with
the ego centred on an agent. The solver therefore also constrains the ego
centre to stay outside each agent's un-inflated ellipse. Every corner lies
within the half-diagonal of the centre, so this row is implied by the corner
rows and never changes the feasible set; it only repels the iterate from the
agent centre.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field

import numpy as np
import quadprog

from .costcon import ConstraintReport, EgoFootprint, Evaluator, pack, to_trajectory
from .problem import NlpConfig, Scene, Trajectory, trajectory_to_dict


class DimensionMismatch(ValueError):
    pass


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITERS = "MaxIters"
    DIVERGED = "Diverged"


@dataclass(frozen=True)
class SolveReport:
    status: Status
    iterations: int
    final_cost: float
    max_violation: float
    wall_time: float
    trajectory: Trajectory
    constraint_report: ConstraintReport | None = field(default=None, compare=False)

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED

    def to_dict(self, include_time: bool = True) -> dict:
        d = {
            "status": self.status.value,
            "iterations": self.iterations,
            "final_cost": self.final_cost,
            "max_violation": self.max_violation,
            "trajectory": trajectory_to_dict(self.trajectory),
        }
        if self.constraint_report is not None:
            d["constraints"] = self.constraint_report.as_dict()
        if include_time:
            d["wall_time"] = self.wall_time
        return d


@dataclass(frozen=True)
class SolverOptions:
    """Knobs of the SQP iteration not covered by NlpConfig."""

    step_tol: float = 1e-6            # inf-norm of the QP step at convergence
    merit_weight0: float = 10.0
    elastic_weight0: float = 100.0    # price of each per-step border/collision slack
    elastic_growth: float = 10.0
    elastic_max: float = 1e8
    armijo: float = 1e-4
    min_step: float = 1e-8
    second_order_correction: bool = True


class _QpFailure(Exception):
    pass


class _Subproblem:
    """Condensed QP at one iterate.

    With d = T du + e the linearised dynamics hold for any du, where e solves
    them for du = 0. The QP variables are (du, t) with t >= 0 the per-step
    elastic slacks.
    """

    def __init__(self, ev: Evaluator, H, grad, Jg, Jh, elastic_weight, steps):
        N, n = ev.N, ev.n
        nx, nu = 4 * N, 2 * N
        self.ev, self.H, self.grad, self.Jg = ev, H, grad, Jg
        self.nx, self.nu = nx, nu
        self.Jx_inv = np.linalg.inv(Jh[:, :nx])     # unit block-bidiagonal, well conditioned
        T = np.zeros((n, nu))
        T[:nx] = -self.Jx_inv @ Jh[:, nx:]
        T[nx:] = np.eye(nu)
        self.T = T
        G = np.zeros((nu + N, nu + N))
        G[:nu, :nu] = T.T @ H @ T
        G[:nu, :nu] = 0.5 * (G[:nu, :nu] + G[:nu, :nu].T)
        G[nu:, nu:] = 1e-8 * np.eye(N)
        self.G = G
        m = Jg.shape[0]
        nl0 = ev.family_slices["border"].start
        C = np.zeros((nu + N, m + N))
        C[:nu, :m] = -(Jg @ T).T
        C[nu + steps, np.arange(nl0, m)] = 1.0
        C[nu:, m:] = np.eye(N)
        self.C = C
        self.elastic_weight = elastic_weight

    def solve(self, h, g):
        """Step d, slack t and multiplier estimates for residual offsets h, g."""
        ev, H, T, nx, nu = self.ev, self.H, self.T, self.nx, self.nu
        e = np.zeros(ev.n)
        e[:nx] = -self.Jx_inv @ h
        b = np.concatenate([g + self.Jg @ e, np.zeros(ev.N)])
        a = -np.concatenate([T.T @ (self.grad + H @ e), np.full(ev.N, self.elastic_weight)])
        try:
            x, _, _, _, lag, _ = quadprog.solve_qp(self.G, a, self.C, b, 0)
        except ValueError as exc:
            raise _QpFailure(str(exc)) from exc
        d = T @ x[:nu] + e
        mu = lag[:self.Jg.shape[0]]
        # equality multipliers from the state rows of the KKT system
        r = (H @ d + self.grad)[:nx] + self.Jg[:, :nx].T @ mu
        lam = -self.Jx_inv.T @ r
        return d, float(x[nu:].sum()), lam, mu


class _CentreRows:
    """Ego-centre-outside-ellipse rows, one per (agent, timestep)."""

    def __init__(self, ev: Evaluator):
        N, w = ev.N, ev.w
        self.N, self.w, self.n = N, w, ev.n
        semi = ev.semi - EgoFootprint(ev.cfg.ego_length, ev.cfg.ego_width).half_diagonal
        ag = ev.agent_states
        c, s = np.cos(ag[..., 2]), np.sin(ag[..., 2])
        self.agent_xy = ag[..., :2]                                        # (w, N, 2)
        # quadratic form of the ellipse in world axes, per (agent, step)
        ia, ib = 1 / semi[:, 0, None] ** 2, 1 / semi[:, 1, None] ** 2
        self.Q = np.stack([np.stack([c * c * ia + s * s * ib, c * s * (ia - ib)], -1),
                           np.stack([c * s * (ia - ib), s * s * ia + c * c * ib], -1)], -2)  # (w, N, 2, 2)
        k = np.arange(1, N + 1)
        self.ix, self.iy = ev.sidx(k, 0), ev.sidx(k, 1)

    def eval(self, z, jac=True):
        p = np.stack([z[self.ix], z[self.iy]], -1)[None] - self.agent_xy     # (w, N, 2)
        Qp = np.einsum("wnij,wnj->wni", self.Q, p)
        g = (1.0 - np.einsum("wni,wni->wn", p, Qp)).ravel()
        if not jac:
            return g
        J = np.zeros((self.w * self.N, self.n))
        r = np.arange(self.w * self.N)
        J[r, np.tile(self.ix, self.w)] = -2 * Qp[..., 0].ravel()
        J[r, np.tile(self.iy, self.w)] = -2 * Qp[..., 1].ravel()
        return g, J

    def hessian(self, mu):
        H = np.zeros((self.n, self.n))
        B = -2 * np.einsum("wn,wnij->nij", mu.reshape(self.w, self.N), self.Q)
        for a, ia in enumerate((self.ix, self.iy)):
            for b, ib in enumerate((self.ix, self.iy)):
                H[ia, ib] += B[:, a, b]
        return H


def _row_steps(ev: Evaluator) -> np.ndarray:
    """Timestep (0-based) of every border, collision and centre row."""
    N = ev.N
    border = np.tile(np.repeat(np.arange(N), 4), 2)
    coll = np.tile(np.repeat(np.arange(N), 4), ev.w)
    centre = np.tile(np.arange(N), ev.w)
    return np.concatenate([border, coll, centre])


def _convexify(H: np.ndarray) -> np.ndarray:
    try:
        np.linalg.cholesky(H)
        return H
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(H)
        w = np.maximum(w, 1e-6 * (1.0 + np.abs(w).max()))
        return (V * w) @ V.T


def solve(scene: Scene, init: Trajectory, cfg: NlpConfig, options: SolverOptions | None = None) -> SolveReport:
    """Solve the constrained planning problem from a full-horizon initialization.

    The initial state is pinned to the scene's ego; `init.states[0]` is ignored.
    Numerical breakdown is reported as Status.DIVERGED, never raised.
    """
    opts = options or SolverOptions()
    t0 = time.perf_counter()
    N = scene.horizon_steps
    if init.horizon != N or abs(init.dt - scene.dt) > 1e-12:
        raise DimensionMismatch(f"init has N={init.horizon}, dt={init.dt}; scene has N={N}, dt={scene.dt}")
    ev = Evaluator(scene, cfg)
    z = pack(init)
    # start from the ego's heading branch
    z[2:4 * N:4] += np.round((scene.ego.heading - z[2]) / (2 * np.pi)) * 2 * np.pi
    z = np.clip(z, ev.lower_bounds, ev.upper_bounds)
    nl0 = ev.family_slices["border"].start
    m0 = ev.m_ineq
    steps = _row_steps(ev)
    centre = _CentreRows(ev)

    def residuals(zz):
        g, h = ev.residuals(zz)
        return np.concatenate([g, centre.eval(zz, jac=False)]), h

    def infeas(g, h):
        worst = np.zeros(N)
        np.maximum.at(worst, steps, g[nl0:])
        return np.abs(h).sum() + np.maximum(0.0, g[:nl0]).sum() + worst.sum()

    def merit(zz, w):
        g, h = residuals(zz)
        return ev.cost(zz) + w * infeas(g, h)

    lam = np.zeros(ev.m_eq)
    mu = np.zeros(m0 + centre.w * N)
    w_merit = opts.merit_weight0
    w_elastic = opts.elastic_weight0
    status = Status.MAX_ITERS
    it = 0
    with np.errstate(all="ignore"):
        while it < cfg.max_iters:
            it += 1
            g, Jg, h, Jh = ev.jacobians(z)
            gc, Jc = centre.eval(z)
            grad = ev.cost_gradient(z)
            H = ev.constraint_hessian(z, lam, mu[:m0]) + centre.hessian(mu[m0:])
            H[np.diag_indices_from(H)] += ev.cost_hess_diag
            if not (np.all(np.isfinite(H)) and np.all(np.isfinite(g)) and np.all(np.isfinite(h))):
                status = Status.DIVERGED
                break
            viol = ev.report(g=g, h=h).max_violation
            g, Jg, Jh = np.concatenate([g, gc]), np.vstack([Jg.toarray(), Jc]), Jh.toarray()
            try:
                qp = _Subproblem(ev, _convexify(H), grad, Jg, Jh, w_elastic, steps)
                d, t, lam_new, mu_new = qp.solve(h, g)
            except (_QpFailure, np.linalg.LinAlgError):
                status = Status.DIVERGED
                break
            if viol <= cfg.constraint_tol and np.max(np.abs(d)) <= opts.step_tol:
                status = Status.CONVERGED
                break
            if t > 1e-9 and w_elastic < opts.elastic_max:
                w_elastic *= opts.elastic_growth
            step_mu = np.zeros(N)
            np.add.at(step_mu, steps, mu_new[nl0:])
            need = max(np.max(np.abs(lam_new)), np.max(mu_new[:nl0], initial=0.0), step_mu.max(initial=0.0))
            w_merit = max(w_merit, 1.5 * need)
            phi0 = merit(z, w_merit)
            pred = w_merit * (infeas(g, h) - t) - (grad @ d + 0.5 * d @ qp.H @ d)

            z_new = z + d
            accepted = merit(z_new, w_merit) <= phi0 - opts.armijo * pred
            if not accepted and opts.second_order_correction:
                g1, h1 = residuals(z_new)
                try:
                    d2, *_ = qp.solve(h1 - Jh @ d, g1 - Jg @ d)
                    z_soc = z + d2
                    if merit(z_soc, w_merit) <= phi0 - opts.armijo * pred:
                        z_new, accepted = z_soc, True
                except _QpFailure:
                    pass
            alpha = 1.0
            while not accepted and alpha > opts.min_step:
                alpha *= 0.5
                z_new = z + alpha * d
                accepted = merit(z_new, w_merit) <= phi0 - opts.armijo * alpha * pred
            if not np.all(np.isfinite(z_new)):
                status = Status.DIVERGED
                break
            z, lam, mu = z_new, lam_new, np.maximum(0.0, mu_new)

    if not np.all(np.isfinite(z)):
        z = np.clip(pack(init), ev.lower_bounds, ev.upper_bounds)
        status = Status.DIVERGED
    g, h = ev.residuals(z)
    rep = ev.report(g=g, h=h)
    if status is Status.CONVERGED and rep.max_violation > cfg.constraint_tol:
        status = Status.MAX_ITERS
    return SolveReport(status, it, ev.cost(z), rep.max_violation, time.perf_counter() - t0,
                       to_trajectory(z, scene), rep)


def select_best(reports) -> int:
    """Index of the converged report with least cost, else least violation.
    Ties go to the lowest index."""
    reports = list(reports)
    conv = [i for i, r in enumerate(reports) if r.converged]
    if conv:
        return min(conv, key=lambda i: (reports[i].final_cost, i))
    return min(range(len(reports)), key=lambda i: (reports[i].max_violation, i))


def solve_with_restarts(scene: Scene, inits, cfg: NlpConfig, options: SolverOptions | None = None) -> SolveReport:
    inits = list(inits)
    if not inits:
        raise ValueError("need at least one initialization")
    reports = [solve(scene, ini, cfg, options) for ini in inits]
    return reports[select_best(reports)]
