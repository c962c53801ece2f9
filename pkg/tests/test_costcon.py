import math

import numpy as np
import pytest

from pilot.costcon import (EgoFootprint, Evaluator, constraint_jacobians, constraint_residuals, cost,
                           cost_gradient, cpn_loss, ellipses, pack)
from pilot.dynamics import rollout
from pilot.problem import EgoState, NlpConfig

from conftest import moving_agent, static_agent, straight_scene


def random_z(rng, N, scene):
    traj = rollout(scene.ego, np.column_stack([rng.uniform(-2, 2, N), rng.uniform(-0.3, 0.3, N)]), scene.dt, 4.8)
    return pack(traj) + rng.normal(0, 0.05, 6 * N)


def scripted_cost(z, scene, cfg):
    N = scene.horizon_steps
    X = np.vstack([scene.ego.as_array(), z[:4 * N].reshape(N, 4)])
    U = z[4 * N:].reshape(N, 2)
    J = 0.0
    for k in range(N + 1):
        J += cfg.w_v * (X[k, 3] - scene.v_max) ** 2 + cfg.w_y * X[k, 1] ** 2
    for k in range(N):
        J += cfg.w_a * U[k, 0] ** 2 + cfg.w_delta * U[k, 1] ** 2
    J += cfg.w_x * (X[-1, 0] - scene.target_x) ** 2
    return J


def test_zero_cost_point(cfg):
    N = 8
    s = straight_scene(N=N, ego=EgoState(0, 0, 0, 10.0))
    z = pack(rollout(s.ego, np.zeros((N, 2)), s.dt, cfg.wheelbase))
    assert cost(z, s, cfg) == pytest.approx(0.0, abs=1e-20)
    assert np.allclose(cost_gradient(z, s, cfg), 0.0, atol=1e-12)


def test_single_step_speed_term(cfg):
    # the initial state is part of the sum; everything else sits at its target
    s = straight_scene(N=1, ego=EgoState(0, 0, 0, 9.0), target_x=3.6)
    z = np.array([3.6, 0.0, 0.0, 10.0, 0.0, 0.0])
    assert cost(z, s, cfg) == pytest.approx(2.5)


def test_cost_matches_scripted_sum(cfg):
    rng = np.random.default_rng(0)
    for N in (3, 10):
        s = straight_scene(N=N)
        for _ in range(10):
            z = random_z(rng, N, s)
            assert cost(z, s, cfg) == pytest.approx(scripted_cost(z, s, cfg), rel=1e-12, abs=1e-12)
            assert cost(z, s, cfg) >= 0


def test_accel_gradient_entry(cfg):
    N = 4
    s = straight_scene(N=N)
    z = np.zeros(6 * N)
    z[4 * N] = 2.0
    g = cost_gradient(z, s, cfg)
    assert g[4 * N] == pytest.approx(4.0)


def test_weights_scale_cost():
    rng = np.random.default_rng(1)
    s = straight_scene(N=6)
    z = random_z(rng, 6, s)
    c1 = NlpConfig()
    c3 = NlpConfig(w_x=0.3, w_v=7.5, w_y=0.15, w_a=3.0, w_delta=6.0)
    assert cost(z, s, c3) == pytest.approx(3 * cost(z, s, c1), rel=1e-12)


def fd_check(f, z, h=1e-6):
    """Central differences; columns of the Jacobian for vector-valued f."""
    cols = []
    for i in range(len(z)):
        e = np.zeros_like(z)
        e[i] = h
        cols.append((np.asarray(f(z + e)) - np.asarray(f(z - e))) / (2 * h))
    return np.array(cols).T


@pytest.mark.parametrize("N", [5, 20])
def test_gradients_vs_finite_differences(cfg, N):
    rng = np.random.default_rng(N)
    s = straight_scene(N=N, agents=[static_agent(25.0, 1.0, N), moving_agent(10.0, 4.0, 3.0, N, 0.4)])
    ev = Evaluator(s, cfg)
    for _ in range(3):
        z = random_z(rng, N, s)
        g = ev.cost_gradient(z)
        fd = fd_check(ev.cost, z)
        assert np.linalg.norm(g - fd) <= 1e-5 * max(1.0, np.linalg.norm(fd))
        _, Jg, _, Jh = ev.jacobians(z)
        Jg_fd = fd_check(lambda x: ev.residuals(x)[0], z)
        Jh_fd = fd_check(lambda x: ev.residuals(x)[1], z)
        for J, Jfd in ((Jg.toarray(), Jg_fd), (Jh.toarray(), Jh_fd)):
            err = np.linalg.norm(J - Jfd, axis=1)
            scale = np.maximum(1.0, np.linalg.norm(Jfd, axis=1))
            assert np.all(err <= 1e-5 * scale)


def test_structure(cfg):
    N = 6
    s = straight_scene(N=N)
    ev = Evaluator(s, cfg)
    z = random_z(np.random.default_rng(3), N, s)
    Jg, Jh = constraint_jacobians(z, s, cfg)
    Jg = Jg.toarray()
    for r in range(ev.family_slices["jerk"].start, ev.family_slices["jerk"].stop):
        assert np.count_nonzero(Jg[r]) == 2
    Jh = Jh.toarray()
    for k in range(N):
        cols = np.flatnonzero(np.any(Jh[4 * k:4 * k + 4] != 0, axis=0))
        steps = set()
        for c in cols:
            steps.add(c // 4 if c < 4 * N else (c - 4 * N) // 2)
        assert steps <= {k - 1, k}


def test_feasible_rollout_has_zero_violation(cfg):
    N = 10
    s = straight_scene(N=N, agents=[static_agent(200.0, 5.5, N)])
    z = pack(rollout(s.ego, np.zeros((N, 2)), s.dt, cfg.wheelbase))
    rep, g, h = constraint_residuals(z, s, cfg)
    assert rep.max_violation == 0.0


def single_step_collision(cfg, ego_xy, ego_heading, agent_pose):
    s = straight_scene(N=1, ego=EgoState(0, 0, 0, 0), agents=[static_agent(*agent_pose[:2], 1, heading=agent_pose[2])],
                       lo=-1e3, up=1e3)
    ev = Evaluator(s, cfg)
    z = np.array([ego_xy[0], ego_xy[1], ego_heading, 0.0, 0.0, 0.0])
    g = ev.residuals(z)[0]
    return g[ev.family_slices["collision"]]


def test_corner_on_boundary_is_zero(cfg):
    ell = ellipses(straight_scene(N=1, agents=[static_agent(0, 0, 1)]), cfg)[0]
    ax, ay = ell.semi_axes
    fp = EgoFootprint(cfg.ego_length, cfg.ego_width)
    # put the front-left corner exactly on the ellipse at angle 0.7
    target = np.array([ax * math.cos(0.7), ay * math.sin(0.7)])
    centre = target - fp.offsets[0]
    r = single_step_collision(cfg, centre, 0.0, (0.0, 0.0, 0.0))
    assert r[0] == pytest.approx(0.0, abs=1e-12)


def ellipse_polygon(cx, cy, h, ax, ay, n=10_000):
    t = np.linspace(0, 2 * np.pi, n, endpoint=False)
    x, y = ax * np.cos(t), ay * np.sin(t)
    c, s = math.cos(h), math.sin(h)
    return np.column_stack([cx + c * x - s * y, cy + s * x + c * y])


def inside_polygon(p, poly):
    x, y = p
    xs, ys = poly[:, 0], poly[:, 1]
    xs2, ys2 = np.roll(xs, -1), np.roll(ys, -1)
    cross = ((ys > y) != (ys2 > y)) & (x < (xs2 - xs) * (y - ys) / (ys2 - ys + 1e-300) + xs)
    return bool(np.count_nonzero(cross) % 2)


def test_collision_sign_vs_sampling_oracle(cfg):
    rng = np.random.default_rng(7)
    fp = EgoFootprint(cfg.ego_length, cfg.ego_width)
    agree = 0
    for _ in range(1000):
        agent = (rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-np.pi, np.pi))
        ego = rng.uniform(-9, 9, 2)
        h = rng.uniform(-np.pi, np.pi)
        r = single_step_collision(cfg, ego, h, agent)
        ell = ellipses(straight_scene(N=1, agents=[static_agent(*agent[:2], 1, heading=agent[2])]), cfg)[0]
        poly = ellipse_polygon(*agent, *ell.semi_axes)
        corners = fp.corners(np.array(ego[0]), np.array(ego[1]), np.array(h))
        oracle = [inside_polygon(c, poly) for c in corners]
        ours = [v > 0 for v in r]
        # skip corners within sampling resolution of the boundary
        ok = all(o == w or abs(v) < 1e-3 for o, w, v in zip(oracle, ours, r))
        agree += ok
    assert agree == 1000


def test_collision_rigid_invariance(cfg):
    rng = np.random.default_rng(11)
    for _ in range(20):
        agent = np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-1, 1)])
        ego, h = rng.uniform(-8, 8, 2), rng.uniform(-1, 1)
        r0 = single_step_collision(cfg, ego, h, agent)
        a, t = rng.uniform(-np.pi, np.pi), rng.uniform(-20, 20, 2)
        R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        agent2 = np.concatenate([R @ agent[:2] + t, [agent[2] + a]])
        r1 = single_step_collision(cfg, R @ ego + t, h + a, agent2)
        assert np.allclose(r0, r1, atol=1e-10)


def test_cpn_loss_examples(cfg):
    N = 4
    s = straight_scene(N=N, ego=EgoState(0, 0, 0, 10.0))
    z = pack(rollout(s.ego, np.zeros((N, 2)), s.dt, cfg.wheelbase))
    val, _ = cpn_loss(z, s, cfg, 100.0)
    assert val == pytest.approx(cost(z, s, cfg))
    # one speed violation of 0.5 m/s on the last state (no other effect on constraints)
    z2 = z.copy()
    z2[4 * (N - 1) + 3] = 10.5
    val2, _ = cpn_loss(z2, s, cfg, 100.0)
    rep, g, h = constraint_residuals(z2, s, cfg)
    assert rep.speed == pytest.approx(0.5)
    assert val2 == pytest.approx(cost(z2, s, cfg) + 100 * 0.25 + 100 * float(h @ h))


def test_cpn_gradient(cfg):
    rng = np.random.default_rng(5)
    N = 5
    s = straight_scene(N=N, agents=[static_agent(12.0, 0.5, N)])
    ev = Evaluator(s, cfg)
    for _ in range(5):
        z = random_z(rng, N, s)
        g = ev.residuals(z)[0]
        if np.min(np.abs(g)) < 1e-4:
            continue
        _, grad = ev.cpn_loss(z, 10.0)
        fd = fd_check(lambda x: ev.cpn_loss(x, 10.0)[0], z)
        assert np.linalg.norm(grad - fd) <= 1e-4 * max(1.0, np.linalg.norm(fd))
