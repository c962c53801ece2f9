import numpy as np
import pytest

import pilot.imitation as im
from pilot.costcon import constraint_residuals, pack
from pilot.imitation import (Sample, collect_expert_samples, dagger_train, dataset_loss, default_descriptor,
                             forward, init_model, l2_loss, load_model, make_batch, pilot_infer, predict, pretrain,
                             rasterize, sample_from_plan, save_model, zero_model, RasterConfig, TrainConfig)
from pilot.nlp import DimensionMismatch, Status
from pilot.problem import EgoState, SchemaError
from pilot.warmstart import expert_plan, heuristic_init

from conftest import moving_agent, static_agent, straight_scene


def toy_descriptor(N=3):
    d = default_descriptor(N, RasterConfig(channels=2, width=8, height=8, resolution=4.0, anchor_col=1))
    d["conv"] = [[2, 3, 2]]
    d["dense"] = [12]
    return d


def toy_sample(N=3, y=0.0):
    s = straight_scene(N=N, ego=EgoState(0, y, 0, 5.0), agents=[static_agent(12.0, 2.0, N)])
    wp = np.column_stack([2.0 * np.arange(1, N + 1), np.full(N, y + 0.3)])
    return Sample(s, wp)


def test_rasterize_empty_scene_channels_identical():
    r, sc = rasterize(straight_scene(N=10), C=4, W=40, H=30, resolution=0.5)
    assert r.channels.shape == (4, 40, 30)
    for c in range(1, 4):
        assert np.array_equal(r.channels[c], r.channels[0])
    assert set(np.unique(r.channels)) <= {0.0, 0.5}
    assert sc[0] == 5.0 and sc[1] == 10.0


def test_rasterize_agent_shift():
    # 5 m/s, h = 10 * 0.4 = 4 s, C = 5: 1 s between channels -> 5 m -> 10 cells at 0.5 m
    N = 10
    s = straight_scene(N=N, dt=0.4, agents=[moving_agent(10.0, 0.0, 5.0, N, 0.4)])
    r, _ = rasterize(s, C=5, W=96, H=96, resolution=0.5)
    assert set(np.unique(r.channels)) <= {0.0, 0.5, 1.0}
    cols = [np.flatnonzero(np.any(r.channels[c] == 1.0, axis=1)) for c in range(5)]
    for c in range(1, 5):
        assert cols[c][0] - cols[c - 1][0] == 10 and cols[c][-1] - cols[c - 1][-1] == 10


def test_rasterize_translation_covariance():
    N = 5
    a = straight_scene(N=N, agents=[static_agent(10.0, 1.0, N)])
    b = straight_scene(N=N, agents=[static_agent(11.0, 1.0, N)])
    ra, _ = rasterize(a, C=2, W=40, H=20, resolution=1.0)
    rb, _ = rasterize(b, C=2, W=40, H=20, resolution=1.0)
    ia = np.argwhere(ra.channels == 1.0)
    ib = np.argwhere(rb.channels == 1.0)
    assert np.array_equal(ia + [0, 1, 0], ib)


def test_rasterize_rejects_one_channel():
    with pytest.raises(ValueError):
        rasterize(straight_scene(), C=1)


def test_zero_model_outputs_zero_waypoints():
    d = toy_descriptor()
    m = zero_model(d)
    s = toy_sample().scene
    r, sc = im.rasterize_for(m, s)
    wp = predict(m, r, sc)
    assert np.array_equal(wp[:, 1], np.full(3, sc[im.EGO_Y]))
    assert np.array_equal(wp[:, 0], np.full(3, r.anchor_x))


def test_forward_checks_dimensions():
    m = init_model(toy_descriptor(), seed=0)
    with pytest.raises(DimensionMismatch):
        forward(m, np.zeros((1, 2, 9, 8)), np.zeros((1, 5)))
    with pytest.raises(DimensionMismatch):
        forward(m, np.zeros((1, 2, 8, 8)), np.zeros((1, 4)))


def test_forward_deterministic():
    m = init_model(toy_descriptor(), seed=3)
    x = np.random.default_rng(0).uniform(size=(2, 2, 8, 8))
    sc = np.ones((2, 5))
    assert np.array_equal(forward(m, x, sc), forward(init_model(toy_descriptor(), seed=3), x, sc))


def test_lipschitz_probe_is_recorded():
    m = init_model(default_descriptor(10), seed=0)
    s = straight_scene(N=10, agents=[static_agent(20.0, 1.0, 10)])
    r, sc = im.rasterize_for(m, s)
    base = predict(m, r, sc)
    ch = r.channels.copy()
    ch[0, 20, 48] += 1.0
    bumped = predict(m, im.Raster(ch, r.resolution, r.origin, r.anchor_col), sc)
    print(f"output change for a unit change of one cell: {np.linalg.norm(bumped - base):.3e}")
    assert np.all(np.isfinite(bumped))


def test_l2_loss_examples():
    d = toy_descriptor(N=1)
    m = zero_model(d)
    smp = toy_sample(N=1)
    # a zero network predicts the ego position
    exact = Sample(smp.scene, [[smp.scene.ego.x, 0.0]])
    assert l2_loss(m, [exact], mu=0.0)[0] == pytest.approx(0.0, abs=1e-24)
    off = Sample(smp.scene, exact.expert_waypoints + [3.0, 4.0])
    assert l2_loss(m, [off], mu=0.0)[0] == pytest.approx(25.0)
    with pytest.raises(ValueError):
        l2_loss(m, [], mu=0.0)


def test_l2_loss_order_invariant():
    m = init_model(toy_descriptor(), seed=1)
    data = [toy_sample(y=y) for y in (0.0, 1.0, -1.0)]
    a = l2_loss(m, data, mu=1e-3)
    b = l2_loss(m, data[::-1], mu=1e-3)
    assert a[0] == pytest.approx(b[0], rel=1e-12)
    assert np.allclose(a[1], b[1], rtol=1e-10, atol=1e-14)


def test_l2_gradient_vs_finite_differences():
    m = init_model(toy_descriptor(), seed=2)
    assert 300 <= m.size <= 800
    # nonzero biases keep every pre-activation off the rectifier's kink
    m = im.RegressorModel(m.descriptor, m.theta + np.random.default_rng(0).normal(0, 0.05, m.size))
    b = make_batch(m, [toy_sample(y=y) for y in (0.0, 0.7)])
    _, g = l2_loss(m, b, mu=1e-2)
    fd = np.empty_like(g)
    h = 1e-6
    for i in range(m.size):
        e = np.zeros(m.size)
        e[i] = h
        fd[i] = (l2_loss(m, b, 1e-2, m.theta + e)[0] - l2_loss(m, b, 1e-2, m.theta - e)[0]) / (2 * h)
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


def test_pretrain_overfits_one_sample():
    m = init_model(toy_descriptor(), seed=0)
    smp = toy_sample()
    trained, curve = pretrain(m, [smp], config=TrainConfig(epochs=2000, lr=1e-2, mu=0.0, batch_size=1))
    assert len(curve) <= 2000
    assert dataset_loss(trained, [smp]) < 1e-3


def test_pretrain_determinism_and_regularisation():
    m = init_model(toy_descriptor(), seed=0)
    data = [toy_sample(y=y) for y in np.linspace(-1, 1, 6)]
    cfg = TrainConfig(epochs=20, lr=1e-2, mu=0.0, batch_size=2)
    a, ca = pretrain(m, data, config=cfg, seed=4)
    b, cb = pretrain(m, data, config=cfg, seed=4)
    assert ca == cb and np.array_equal(a.theta, b.theta)
    assert ca[-1] < ca[0]
    r, _ = pretrain(m, data, config=TrainConfig(epochs=20, lr=1e-4, mu=1e3, batch_size=2, clip_norm=0), seed=4)
    assert np.linalg.norm(r.theta) < np.linalg.norm(a.theta)
    with pytest.raises(ValueError):
        pretrain(m, [])


def test_pretrain_non_finite_aborts():
    m = init_model(toy_descriptor(), seed=0)
    with pytest.raises(im.NonFiniteLoss), np.errstate(over="ignore", invalid="ignore"):
        pretrain(m, [toy_sample()], config=TrainConfig(epochs=50, lr=1e12, mu=0.0, clip_norm=0))


def test_save_load_round_trip(tmp_path):
    m = init_model(toy_descriptor(), seed=5)
    save_model(m, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    assert np.array_equal(back.theta, m.theta) and back.descriptor == m.descriptor
    (tmp_path / "bad.json").write_text('{"schema": "other"}')
    with pytest.raises(SchemaError):
        load_model(tmp_path / "bad.json")


def test_perfect_model_converges_fast(cfg, monkeypatch):
    N = 20
    s = straight_scene(N=N, ego=EgoState(0, 0.5, 0, 6.0), agents=[static_agent(45.0, 5.5, N)])
    ex = expert_plan(s, cfg)
    assert ex.converged
    monkeypatch.setattr(im, "network_waypoints", lambda model, scene: ex.trajectory.positions[1:])
    rep = pilot_infer(None, s, cfg)
    assert rep.converged and rep.iterations <= 3


def test_untrained_model_on_empty_roads(cfg):
    N = 20
    m = init_model(default_descriptor(N), seed=0)
    rng = np.random.default_rng(0)
    ok = 0
    for _ in range(100):
        s = straight_scene(N=N, ego=EgoState(0, rng.uniform(-1, 6), rng.uniform(-0.1, 0.1), rng.uniform(0, 10)))
        rep = pilot_infer(m, s, cfg)
        ok += rep.converged
        if rep.converged:
            assert constraint_residuals(pack(rep.trajectory), s, cfg)[0].max_violation <= cfg.constraint_tol
    assert ok >= 95


class FakeSimulator:
    """Straight-road episodes of fixed length; lateral offset encodes the step."""

    def __init__(self, length=3, N=5):
        self.length, self.N = length, N
        self.resets = 0
        self.t = 0

    def reset(self):
        self.resets += 1
        self.t = 0

    def scene(self):
        return straight_scene(N=self.N, ego=EgoState(0, 0.1 * self.t, 0, 5.0))

    def advance(self, plan):
        self.t += 1
        return self.t < self.length


def fake_expert(fail_every=0):
    calls = {"n": 0}

    def plan(scene, cfg, options=None):
        calls["n"] += 1
        init = heuristic_init("constvel", scene, cfg)
        status = Status.MAX_ITERS if fail_every and calls["n"] % fail_every == 0 else Status.CONVERGED
        return im.SolveReport(status, 1, 0.0, 0.0, 0.0, init)
    return plan


def test_dagger_bookkeeping(cfg, monkeypatch):
    monkeypatch.setattr(im, "expert_plan", fake_expert(fail_every=3))
    monkeypatch.setattr(im, "pilot_infer", lambda model, scene, cfg, options=None: fake_expert()(scene, cfg))
    m = init_model(toy_descriptor(N=5), seed=0)
    D0 = [sample_from_plan(s, heuristic_init("constvel", s, cfg)) for s in [straight_scene(N=5)] * 4]
    tc = TrainConfig(epochs=1, batch_size=4)
    res = dagger_train(m, D0, FakeSimulator(), J=4 + 7, K=2, cfg=cfg, train=tc)
    assert res.skipped == 2
    assert len(res.dataset) == 4 + 7 - res.skipped
    assert res.retrains == 3
    assert res.episodes == 3
    one = dagger_train(m, D0, FakeSimulator(), J=5, K=1, cfg=cfg, train=tc, pretrain_first=False)
    assert one.retrains == 1 and len(one.dataset) == 4 + 1 - one.skipped
    with pytest.raises(ValueError):
        dagger_train(m, D0, FakeSimulator(), J=4, K=1, cfg=cfg)
    with pytest.raises(ValueError):
        dagger_train(m, D0, FakeSimulator(), J=6, K=0, cfg=cfg)


def test_collect_expert_samples(cfg, monkeypatch):
    monkeypatch.setattr(im, "expert_plan", fake_expert(fail_every=4))
    sim = FakeSimulator(length=2)
    samples, skipped = collect_expert_samples(sim, 6, cfg)
    # seven expert calls, the fourth fails
    assert len(samples) == 6 and skipped == 1
    assert sim.resets == 4
