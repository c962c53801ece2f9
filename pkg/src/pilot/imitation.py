"""The learner: scene rasterization, a small convolutional waypoint regressor
written against numpy, its squared-error training loss, pre-training, the
DAgger loop, and PILOT inference (network warm start followed by the solver).

Network coordinates are anchored at the ego: the regressor sees a raster whose
column `anchor_col` holds the ego and predicts waypoints as (x - ego_x,
y - ego_y) in the reference frame. `predict` adds the anchor back.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .costcon import Evaluator, to_trajectory
from .dynamics import inverse_dynamics
from .nlp import DimensionMismatch, SolveReport, SolverOptions, solve
from .problem import NlpConfig, Scene, SchemaError, Trajectory, dump_json, load_json, wrap_angle
from .warmstart import expert_plan, sanitize_network_output

MODEL_SCHEMA = "pilot-model-v1"
LAYOUT_VALUE = 0.5
AGENT_VALUE = 1.0


class NonFiniteLoss(FloatingPointError):
    pass


# -- rasterization -----------------------------------------------------------

@dataclass(frozen=True)
class RasterConfig:
    channels: int = 5
    width: int = 96            # cells along x
    height: int = 96           # cells along y
    resolution: float = 1.0    # m per cell
    anchor_col: int = 8        # column holding the ego


@dataclass(frozen=True, eq=False)
class Raster:
    """`channels[c, i, j]` covers x in origin_x + [i, i+1) * res and y in
    origin_y + [j, j+1) * res, reference frame."""

    channels: np.ndarray
    resolution: float
    origin: tuple[float, float]
    anchor_col: int

    @property
    def anchor_x(self) -> float:
        return self.origin[0] + self.anchor_col * self.resolution


def scalar_inputs(scene: Scene) -> np.ndarray:
    """[ego speed, v_max, target_x - ego x, ego y, ego heading]."""
    e = scene.ego
    return np.array([e.speed, scene.v_max, scene.target_x - e.x, e.y, e.heading])


N_SCALARS = 5
EGO_Y = 3       # index of the ego's lateral offset in the scalars


def _agent_pose(center_states: np.ndarray, f: float) -> np.ndarray:
    """Pose at fractional sample index f (linear, heading along the short arc)."""
    k0 = min(int(math.floor(f)), len(center_states) - 1)
    k1 = min(k0 + 1, len(center_states) - 1)
    w = f - k0
    a, b = center_states[k0], center_states[k1]
    if w == 0.0 or k0 == k1:
        return a.copy()
    return np.array([a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1]),
                     a[2] + w * wrap_angle(b[2] - a[2])])


def rasterize(scene: Scene, C: int = 5, W: int = 96, H: int = 96, resolution: float = 1.0,
              anchor_col: int = 8) -> tuple[Raster, np.ndarray]:
    """Paint the drivable region (0.5) on every channel and each agent's
    rectangle at time c*h/(C-1) on channel c (1.0), h = N*dt. The ego sits in
    column `anchor_col`; row H/2 is the reference line."""
    if C < 2:
        raise ValueError("need at least 2 channels")
    e = scene.ego
    ox = e.x - anchor_col * resolution
    oy = -(H // 2) * resolution
    xc = ox + (np.arange(W) + 0.5) * resolution
    yc = oy + (np.arange(H) + 0.5) * resolution
    lo, up = scene.borders.y_low(xc), scene.borders.y_up(xc)
    layout = ((yc[None, :] >= lo[:, None]) & (yc[None, :] <= up[:, None])) * LAYOUT_VALUE
    grid = np.repeat(layout[None], C, axis=0)
    X, Y = np.meshgrid(xc, yc, indexing="ij")
    N = scene.horizon_steps
    for ag in scene.agents:
        for c in range(C):
            px, py, ph = _agent_pose(ag.center_states, c * N / (C - 1))
            dx, dy = X - px, Y - py
            cs, sn = math.cos(ph), math.sin(ph)
            inside = (np.abs(cs * dx + sn * dy) <= ag.half_length) & (np.abs(-sn * dx + cs * dy) <= ag.half_width)
            grid[c][inside] = AGENT_VALUE
    return Raster(grid, resolution, (ox, oy), anchor_col), scalar_inputs(scene)


# -- the regressor -----------------------------------------------------------

def default_descriptor(N: int, raster: RasterConfig | None = None, outputs: int | None = None) -> dict:
    r = raster or RasterConfig()
    return {
        "input": [r.channels, r.width, r.height],
        "raster": {"resolution": r.resolution, "anchor_col": r.anchor_col},
        "conv": [[8, 3, 2], [16, 3, 2]],        # filters, kernel, stride; padding 1
        "dense": [128, 64],
        "n_scalars": N_SCALARS,
        "scalar_scale": [10.0, 10.0, 100.0, 5.0, 1.0],
        "outputs": 2 * N if outputs is None else outputs,
        "output_scale": 10.0,
    }


def _conv_out(n: int, k: int, s: int) -> int:
    return (n + 2 - k) // s + 1


def _layout(desc: dict) -> list:
    """(name, shape) of every parameter block, in flat-vector order."""
    C, W, H = desc["input"]
    shapes = []
    for i, (f, k, s) in enumerate(desc["conv"]):
        shapes += [(f"conv{i}.w", (f, C * k * k)), (f"conv{i}.b", (f,))]
        C, W, H = f, _conv_out(W, k, s), _conv_out(H, k, s)
    width = C * W * H + desc["n_scalars"]
    for i, n in enumerate(desc["dense"]):
        shapes += [(f"dense{i}.w", (width, n)), (f"dense{i}.b", (n,))]
        width = n
    shapes += [("head.w", (width, desc["outputs"])), ("head.b", (desc["outputs"],))]
    return shapes


@dataclass(eq=False)
class RegressorModel:
    descriptor: dict
    theta: np.ndarray
    _views: dict = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=float)
        n = sum(math.prod(s) for _, s in _layout(self.descriptor))
        if self.theta.shape != (n,):
            raise DimensionMismatch(f"descriptor needs {n} parameters, got {self.theta.shape}")

    @property
    def size(self) -> int:
        return self.theta.size

    @property
    def horizon(self) -> int:
        return self.descriptor["outputs"] // 2

    def params(self, theta=None) -> dict:
        """Named views into theta (no copies)."""
        theta = self.theta if theta is None else theta
        out, i = {}, 0
        for name, shape in _layout(self.descriptor):
            n = math.prod(shape)
            out[name] = theta[i:i + n].reshape(shape)
            i += n
        return out

    def raster_config(self) -> RasterConfig:
        C, W, H = self.descriptor["input"]
        r = self.descriptor.get("raster", {})
        return RasterConfig(C, W, H, r.get("resolution", 1.0), r.get("anchor_col", 8))

    def copy(self) -> "RegressorModel":
        return RegressorModel(dict(self.descriptor), self.theta.copy())


def init_model(descriptor: dict, seed: int = 0) -> RegressorModel:
    """He-normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    parts = []
    for name, shape in _layout(descriptor):
        if name.endswith(".b"):
            parts.append(np.zeros(shape))
        else:
            fan_in = shape[1] if name.startswith("conv") else shape[0]
            gain = 1.0 if name.startswith("head") else 2.0
            parts.append(rng.normal(0.0, math.sqrt(gain / fan_in), shape))
    return RegressorModel(descriptor, np.concatenate([p.ravel() for p in parts]))


def zero_model(descriptor: dict) -> RegressorModel:
    n = sum(math.prod(s) for _, s in _layout(descriptor))
    return RegressorModel(descriptor, np.zeros(n))


def _im2col(x, k, s):
    """x: (B, C, W, H) already padded -> (B*Wo*Ho, C*k*k)."""
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    B, C, Wo, Ho = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Wo * Ho, C * k * k), (Wo, Ho)


def _col2im(dcols, shape, k, s, out_hw):
    """Adjoint of _im2col."""
    B, C, Wp, Hp = shape
    Wo, Ho = out_hw
    d = dcols.reshape(B, Wo, Ho, C, k, k)
    dx = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * Wo:s, j:j + s * Ho:s] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx


def _forward(model: RegressorModel, x: np.ndarray, sc: np.ndarray, theta=None, keep: bool = False):
    """x: (B, C, W, H); sc: (B, n_scalars). Returns outputs (B, outputs) and
    the activation cache when `keep`."""
    desc = model.descriptor
    P = model.params(theta)
    cache = []
    h = x
    for i, (f, k, s) in enumerate(desc["conv"]):
        hp = np.pad(h, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols, (Wo, Ho) = _im2col(hp, k, s)
        pre = cols @ P[f"conv{i}.w"].T + P[f"conv{i}.b"]
        act = np.maximum(pre, 0.0)
        if keep:
            cache.append(("conv", i, hp.shape, cols, pre, (Wo, Ho)))
        h = act.reshape(len(x), Wo, Ho, f).transpose(0, 3, 1, 2)
    feat = np.concatenate([h.reshape(len(x), -1), sc / np.asarray(desc["scalar_scale"])], axis=1)
    for i, _ in enumerate(desc["dense"]):
        pre = feat @ P[f"dense{i}.w"] + P[f"dense{i}.b"]
        if keep:
            cache.append(("dense", i, feat, pre))
        feat = np.maximum(pre, 0.0)
    if keep:
        cache.append(("head", feat))
    out = (feat @ P["head.w"] + P["head.b"]) * desc["output_scale"]
    return out, cache


def _backward(model: RegressorModel, dout: np.ndarray, cache, theta=None) -> np.ndarray:
    """Gradient of sum(dout * outputs) with respect to theta."""
    desc = model.descriptor
    P = model.params(theta)
    grad = np.zeros(model.size)
    G = model.params(grad)
    dout = dout * desc["output_scale"]
    _, feat = cache[-1]
    G["head.w"][...] = feat.T @ dout
    G["head.b"][...] = dout.sum(0)
    d = dout @ P["head.w"].T
    B = len(dout)
    for entry in reversed(cache[:-1]):
        if entry[0] == "dense":
            _, i, fin, pre = entry
            d = d * (pre > 0)
            G[f"dense{i}.w"][...] = fin.T @ d
            G[f"dense{i}.b"][...] = d.sum(0)
            d = d @ P[f"dense{i}.w"].T
            if i == 0:
                d = d[:, :fin.shape[1] - desc["n_scalars"]]
        else:
            _, i, pshape, cols, pre, (Wo, Ho) = entry
            f = pre.shape[1]
            if d.ndim == 2:
                d = d.reshape(B, f, Wo, Ho)
            dpre = d.transpose(0, 2, 3, 1).reshape(-1, f) * (pre > 0)
            G[f"conv{i}.w"][...] = dpre.T @ cols
            G[f"conv{i}.b"][...] = dpre.sum(0)
            if i > 0:
                k, s = desc["conv"][i][1], desc["conv"][i][2]
                dx = _col2im(dpre @ P[f"conv{i}.w"], pshape, k, s, (Wo, Ho))
                d = dx[:, :, 1:-1, 1:-1]
    return grad


def _check_inputs(model: RegressorModel, x: np.ndarray, sc: np.ndarray):
    if tuple(x.shape[1:]) != tuple(model.descriptor["input"]):
        raise DimensionMismatch(f"raster shape {x.shape[1:]} != {tuple(model.descriptor['input'])}")
    if sc.shape[1] != model.descriptor["n_scalars"]:
        raise DimensionMismatch(f"{sc.shape[1]} scalars, model expects {model.descriptor['n_scalars']}")


def forward(model: RegressorModel, rasters, scalars) -> np.ndarray:
    """Raw network outputs for a batch of raster arrays (B, C, W, H)."""
    x = np.asarray(rasters, dtype=float)
    sc = np.atleast_2d(np.asarray(scalars, dtype=float))
    _check_inputs(model, x, sc)
    return _forward(model, x, sc)[0]


def predict(model: RegressorModel, raster: Raster, scalars) -> np.ndarray:
    """N waypoints (x, y) in the reference frame."""
    out = forward(model, raster.channels[None], np.asarray(scalars)[None])[0]
    wp = out.reshape(-1, 2).copy()
    wp[:, 0] += raster.anchor_x
    wp[:, 1] += float(np.asarray(scalars)[EGO_Y])
    return wp


def rasterize_for(model: RegressorModel, scene: Scene) -> tuple[Raster, np.ndarray]:
    r = model.raster_config()
    return rasterize(scene, r.channels, r.width, r.height, r.resolution, r.anchor_col)


# -- data and loss -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Sample:
    scene: Scene
    expert_waypoints: np.ndarray    # (N, 2), reference frame, excludes the ego position

    def __post_init__(self):
        wp = np.asarray(self.expert_waypoints, dtype=float).reshape(-1, 2)
        if len(wp) != self.scene.horizon_steps:
            raise ValueError(f"expected {self.scene.horizon_steps} waypoints, got {len(wp)}")
        object.__setattr__(self, "expert_waypoints", wp)


def sample_from_plan(scene: Scene, plan: Trajectory) -> Sample:
    return Sample(scene, plan.positions[1:])


@dataclass(frozen=True, eq=False)
class Batch:
    """Network-ready arrays: rasters (B, C, W, H), scalars (B, S) and
    anchored targets (B, 2N)."""

    x: np.ndarray
    scalars: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.x)

    def subset(self, idx) -> "Batch":
        return Batch(self.x[idx], self.scalars[idx], self.targets[idx])


def make_batch(model: RegressorModel, samples) -> Batch:
    xs, ss, ts = [], [], []
    for smp in samples:
        r, sc = rasterize_for(model, smp.scene)
        xs.append(r.channels)
        ss.append(sc)
        t = smp.expert_waypoints.copy()
        t[:, 0] -= r.anchor_x
        t[:, 1] -= sc[EGO_Y]
        ts.append(t.ravel())
    return Batch(np.array(xs), np.array(ss), np.array(ts))


def l2_loss(model: RegressorModel, batch, mu: float = 0.0, theta=None) -> tuple[float, np.ndarray]:
    """Mean squared waypoint distance plus mu * |theta|^2:
    1/(nN) sum_i sum_j |rho_ij - rho*_ij|^2 + mu |theta|^2, and its gradient."""
    if not isinstance(batch, Batch):
        batch = make_batch(model, batch)
    if len(batch) == 0:
        raise ValueError("empty batch")
    theta = model.theta if theta is None else theta
    out, cache = _forward(model, batch.x, batch.scalars, theta, keep=True)
    r = out - batch.targets
    nN = len(batch) * (out.shape[1] // 2)
    loss = float(np.sum(r * r) / nN + mu * theta @ theta)
    grad = _backward(model, 2.0 * r / nN, cache, theta) + 2.0 * mu * theta
    return loss, grad


# -- training ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    mu: float = 1e-4
    batch_size: int = 32
    momentum: float = 0.9
    clip_norm: float = 10.0     # global gradient-norm clip; 0 disables


def pretrain(model: RegressorModel, dataset, epochs: int | None = None, lr: float | None = None,
             mu: float | None = None, seed: int = 0, config: TrainConfig | None = None,
             max_steps: int | None = None) -> tuple[RegressorModel, list[float]]:
    """Mini-batch gradient descent with momentum; returns a new model and the
    mean training loss of each epoch."""
    cfg = config or TrainConfig()
    cfg = replace(cfg, **{k: v for k, v in (("epochs", epochs), ("lr", lr), ("mu", mu)) if v is not None})
    batch = dataset if isinstance(dataset, Batch) else make_batch(model, list(dataset))
    if len(batch) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    theta = model.theta.copy()
    vel = np.zeros_like(theta)
    curve = []
    steps = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(batch))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            loss, g = l2_loss(model, batch.subset(order[start:start + cfg.batch_size]), cfg.mu, theta)
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, step {steps} (lr={cfg.lr})")
            if cfg.clip_norm > 0:
                gn = float(np.linalg.norm(g))
                if gn > cfg.clip_norm:
                    g = g * (cfg.clip_norm / gn)
            vel = cfg.momentum * vel - cfg.lr * g
            theta = theta + vel
            losses.append(loss)
            steps += 1
            if max_steps is not None and steps >= max_steps:
                break
        curve.append(float(np.mean(losses)))
        if max_steps is not None and steps >= max_steps:
            break
    return RegressorModel(dict(model.descriptor), theta), curve


def dataset_loss(model: RegressorModel, dataset, mu: float = 0.0, chunk: int = 64) -> float:
    """Imitation data term over a whole dataset (plus mu |theta|^2)."""
    batch = dataset if isinstance(dataset, Batch) else make_batch(model, list(dataset))
    total, count = 0.0, 0
    for s in range(0, len(batch), chunk):
        b = batch.subset(slice(s, s + chunk))
        out = _forward(model, b.x, b.scalars)[0]
        total += float(np.sum((out - b.targets) ** 2))
        count += len(b) * out.shape[1] // 2
    return total / count + mu * float(model.theta @ model.theta)


# -- persistence -------------------------------------------------------------

def model_to_dict(model: RegressorModel) -> dict:
    return {"schema": MODEL_SCHEMA, "descriptor": model.descriptor, "theta": model.theta.tolist()}


def model_from_dict(d: dict) -> RegressorModel:
    if d.get("schema") != MODEL_SCHEMA:
        raise SchemaError(f"expected schema {MODEL_SCHEMA!r}, got {d.get('schema')!r}")
    try:
        return RegressorModel(d["descriptor"], np.array(d["theta"], dtype=float))
    except (KeyError, TypeError) as e:
        raise SchemaError(f"malformed model record: {e}") from e


def save_model(model: RegressorModel, path) -> None:
    dump_json(model_to_dict(model), path)


def load_model(path) -> RegressorModel:
    return model_from_dict(load_json(path))


# -- PILOT inference ---------------------------------------------------------

def network_waypoints(model: RegressorModel, scene: Scene) -> np.ndarray:
    if model.horizon != scene.horizon_steps:
        raise DimensionMismatch(f"model predicts {model.horizon} waypoints, scene has N={scene.horizon_steps}")
    raster, sc = rasterize_for(model, scene)
    return predict(model, raster, sc)


def raw_network_trajectory(model: RegressorModel, scene: Scene, cfg: NlpConfig | None = None) -> Trajectory:
    """The network's waypoints read as a trajectory without any clean-up."""
    cfg = cfg or NlpConfig()
    e = scene.ego
    p = np.vstack([[e.x, e.y], network_waypoints(model, scene)])
    return inverse_dynamics(p, e.speed, scene.dt, cfg.wheelbase, heading0=e.heading)


def network_init(model: RegressorModel, scene: Scene, cfg: NlpConfig | None = None) -> Trajectory:
    return sanitize_network_output(network_waypoints(model, scene), scene, cfg)


def pilot_plan(model: RegressorModel, scene: Scene, cfg: NlpConfig,
               options: SolverOptions | None = None) -> tuple[Trajectory, float, SolveReport]:
    """(network initialization, its wall time, solver report)."""
    t0 = time.perf_counter()
    init = network_init(model, scene, cfg)
    t_init = time.perf_counter() - t0
    return init, t_init, solve(scene, init, cfg, options)


def pilot_infer(model: RegressorModel, scene: Scene, cfg: NlpConfig,
                options: SolverOptions | None = None) -> SolveReport:
    return pilot_plan(model, scene, cfg, options)[2]


# -- DAgger ------------------------------------------------------------------

@dataclass
class DaggerResult:
    model: RegressorModel
    dataset: list
    skipped: int = 0
    retrains: int = 0
    episodes: int = 0
    loss_curves: list = field(default_factory=list)


def collect_expert_samples(simulator, n: int, cfg: NlpConfig | None = None,
                           options: SolverOptions | None = None) -> tuple[list, int]:
    """Initial dataset: drive the simulator with the expert and keep every
    scene it solves, until n samples are collected. Returns (samples, skipped)."""
    cfg = cfg or NlpConfig()
    samples, skipped = [], 0
    simulator.reset()
    while len(samples) < n:
        scene = simulator.scene()
        label = expert_plan(scene, cfg, options)
        if label.converged:
            samples.append(sample_from_plan(scene, label.trajectory))
        else:
            skipped += 1
        if not simulator.advance(label.trajectory):
            simulator.reset()
    return samples, skipped


def dagger_train(model: RegressorModel, D0, simulator, J: int, K: int, seed: int = 0,
                 cfg: NlpConfig | None = None, train: TrainConfig | None = None,
                 pretrain_first: bool = True, options: SolverOptions | None = None) -> DaggerResult:
    """Dataset aggregation: drive the simulator with PILOT, label each visited
    scene with the expert, and retrain every K new steps.

    `simulator` provides `scene()` (the current planning problem),
    `advance(plan)` (execute it; returns True while the episode runs) and
    `reset()` (start the next episode). Scenes the expert fails on are
    skipped and counted.
    """
    cfg = cfg or NlpConfig()
    train = train or TrainConfig()
    D = list(D0)
    n = len(D)
    if not J > n:
        raise ValueError(f"J={J} must exceed |D0|={n}")
    if K < 1:
        raise ValueError("K must be >= 1")
    res = DaggerResult(model, D)
    if pretrain_first:
        res.model, curve = pretrain(model, D, seed=seed, config=train)
        res.loss_curves.append(curve)
    simulator.reset()
    res.episodes = 1
    for j in range(n + 1, J + 1):
        plan = pilot_infer(res.model, simulator.scene(), cfg, options)
        if not simulator.advance(plan.trajectory):
            simulator.reset()
            res.episodes += 1
        s_j = simulator.scene()
        label = expert_plan(s_j, cfg, options)
        if label.converged:
            D.append(sample_from_plan(s_j, label.trajectory))
        else:
            res.skipped += 1
        if (j - n) % K == 0:
            res.model, curve = pretrain(res.model, D, seed=seed + j, config=train)
            res.loss_curves.append(curve)
            res.retrains += 1
    return res


# -- CPN baseline -------------------------------------------------------------

def cpn_descriptor(N: int, raster: RasterConfig | None = None) -> dict:
    """Same trunk with a 6N head emitting the whole decision vector."""
    return default_descriptor(N, raster, outputs=6 * N)


def _cpn_anchor(z: np.ndarray, scene: Scene, sign: float) -> np.ndarray:
    z = z.copy()
    z[0:4 * scene.horizon_steps:4] += sign * scene.ego.x
    return z


def cpn_decision(model: RegressorModel, scene: Scene) -> np.ndarray:
    raster, sc = rasterize_for(model, scene)
    out = forward(model, raster.channels[None], sc[None])[0]
    return _cpn_anchor(out, scene, 1.0)


def cpn_trajectory(model: RegressorModel, scene: Scene) -> Trajectory:
    return to_trajectory(cpn_decision(model, scene), scene)


def cpn_train(model: RegressorModel, scenes, cfg: NlpConfig, penalty_weight: float = 10.0,
              epochs: int = 20, lr: float = 1e-4, seed: int = 0, batch_size: int = 16,
              momentum: float = 0.9, clip_norm: float = 10.0) -> tuple[RegressorModel, list[float]]:
    """Train a 6N-output network directly on cost plus squared ReLU penalties."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("empty dataset")
    evs = [Evaluator(s, cfg) for s in scenes]
    rs = [rasterize_for(model, s) for s in scenes]
    X = np.array([r.channels for r, _ in rs])
    S = np.array([sc for _, sc in rs])
    rng = np.random.default_rng(seed)
    theta = model.theta.copy()
    vel = np.zeros_like(theta)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(len(scenes))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            out, cache = _forward(model, X[idx], S[idx], theta, keep=True)
            dout = np.zeros_like(out)
            total = 0.0
            for row, i in enumerate(idx):
                val, g = evs[i].cpn_loss(_cpn_anchor(out[row], scenes[i], 1.0), penalty_weight)
                total += val
                dout[row] = g / len(idx)
            g = _backward(model, dout, cache, theta)
            if not (math.isfinite(total) and np.all(np.isfinite(g))):
                raise NonFiniteLoss(f"non-finite CPN loss at epoch {epoch}")
            gn = float(np.linalg.norm(g))
            if clip_norm > 0 and gn > clip_norm:
                g = g * (clip_norm / gn)
            vel = momentum * vel - lr * g
            theta = theta + vel
            losses.append(total / len(idx))
        curve.append(float(np.mean(losses)))
    return RegressorModel(dict(model.descriptor), theta), curve
