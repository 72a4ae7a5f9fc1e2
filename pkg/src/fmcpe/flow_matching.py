"""Joint flow matching of a data-space and a parameter-space vector field.

The data-space field carries a Gaussian blob around the real observation y
onto simulator-like surrogates x~; the frozen simulation posterior evaluated
at x~ is the source that the parameter-space field then transports onto the
calibration parameters.  Both fields are trained together, so the source
moves while the parameter field learns.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .baseline import ConditionalDensityModel
from .core_math import RandomSource
from .nn import (
    AdamState,
    GradClipConfig,
    Mlp,
    NonFiniteError,
    TimeEmbedding,
    adam_step,
    clip_global_norm,
    embed_time,
    params_hash,
)
from .tasks import PairDataset, Task

logger = logging.getLogger(__name__)

FMCPE_FORMAT = "fmcpe-model"
FMCPE_VERSION = 1
ODE_METHODS = ("euler", "rk4")


@dataclass(frozen=True)
class FieldConfig:
    hidden: tuple[int, ...] = (128, 128, 128)
    embed_hidden: tuple[int, ...] = (64,)
    context_dim: int = 32
    n_freqs: int = 4
    base_freq: float = 0.25
    out_scale: float = 0.1


class VectorField:
    """u(t, z, y): an MLP body on ``[z, embed(t), embed(y)]`` plus an MLP condition embedder."""

    def __init__(self, state_dim: int, cond_dim: int, cfg: FieldConfig | None = None, params: np.ndarray | None = None):
        self.cfg = cfg or FieldConfig()
        self.state_dim, self.cond_dim = int(state_dim), int(cond_dim)
        self.time_embedding = TimeEmbedding(self.cfg.n_freqs, self.cfg.base_freq)
        body_w = (self.state_dim + self.time_embedding.dim + self.cfg.context_dim, *self.cfg.hidden, self.state_dim)
        emb_w = (self.cond_dim, *self.cfg.embed_hidden, self.cfg.context_dim)
        n_body = sum(o * i + o for i, o in zip(body_w[:-1], body_w[1:]))
        n_emb = sum(o * i + o for i, o in zip(emb_w[:-1], emb_w[1:]))
        self.params = np.zeros(n_body + n_emb) if params is None else np.asarray(params, dtype=np.float64)
        if self.params.shape != (n_body + n_emb,):
            raise ValueError(f"expected {n_body + n_emb} parameters, got {self.params.shape}")
        self.body = Mlp(body_w, self.params[:n_body])
        self.embedder = Mlp(emb_w, self.params[n_body:])

    @classmethod
    def init(cls, state_dim, cond_dim, cfg: FieldConfig | None, rng: RandomSource) -> "VectorField":
        f = cls(state_dim, cond_dim, cfg)
        Mlp.init(f.body.widths, rng, out_scale=f.cfg.out_scale, params=f.body.params)
        Mlp.init(f.embedder.widths, rng, params=f.embedder.params)
        return f

    def copy(self) -> "VectorField":
        return VectorField(self.state_dim, self.cond_dim, self.cfg, self.params.copy())

    def context(self, y: np.ndarray) -> np.ndarray:
        return self.embedder.forward(np.atleast_2d(y))

    def _body_input(self, t, z, ctx):
        z = np.atleast_2d(z)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
        return np.concatenate([z, embed_time(t, self.time_embedding), ctx], axis=1)

    def velocity(self, t, z, ctx) -> np.ndarray:
        """Field value with a precomputed condition embedding ``ctx``."""
        return self.body.forward(self._body_input(t, z, ctx))

    def frozen_condition(self, ctx: np.ndarray):
        """Velocity function of (t, z) with the condition fixed.

        The condition and time features enter the first layer additively, so
        their contribution is computed once per condition (and cached per t)
        instead of at every solver stage.
        """
        W1, b1 = self.body.layers[0]
        s, e = self.state_dim, self.time_embedding.dim
        W_z, W_t, W_c = W1[:, :s], W1[:, s : s + e], W1[:, s + e :]
        base = ctx @ W_c.T + b1
        rest = self.body.layers[1:]
        t_cache: dict[float, np.ndarray] = {}

        def velocity(t: float, z: np.ndarray) -> np.ndarray:
            tb = t_cache.get(t)
            if tb is None:
                tb = t_cache[t] = embed_time(np.float64(t), self.time_embedding) @ W_t.T
            h = z @ W_z.T + base + tb
            for W, b in rest:
                h = np.tanh(h)
                h = h @ W.T + b
            return h

        return velocity

    def evaluate(self, t, z, y) -> np.ndarray:
        single = np.ndim(z) == 1
        out = self.velocity(t, z, self.context(y))
        return out[0] if single else out

    def backward(self, t, z, y, out_grad) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ``sum(u * out_grad)`` w.r.t. the parameters and the state ``z``."""
        y = np.atleast_2d(y)
        ctx, emb_trace = self.embedder.forward_trace(y)
        inp = self._body_input(t, z, ctx)
        _, trace = self.body.forward_trace(inp)
        g_body, g_in = self.body.backward(inp, out_grad, trace)
        g_ctx = g_in[:, self.state_dim + self.time_embedding.dim :]
        g_emb, _ = self.embedder.backward(y, g_ctx, emb_trace)
        return np.concatenate([g_body, g_emb]), g_in[:, : self.state_dim]

    def regression_loss_and_grad(self, t, z_t, y, target) -> tuple[np.ndarray, np.ndarray]:
        """Per-row ``||u(t, z_t, y) - target||^2`` and the gradient of their batch mean."""
        y = np.atleast_2d(y)
        ctx, emb_trace = self.embedder.forward_trace(y)
        inp = self._body_input(t, z_t, ctx)
        out, trace = self.body.forward_trace(inp)
        resid = out - target
        per_row = np.sum(resid * resid, axis=1)
        g_body, g_in = self.body.backward(inp, 2.0 * resid / resid.shape[0], trace)
        g_emb, _ = self.embedder.backward(y, g_in[:, self.state_dim + self.time_embedding.dim :], emb_trace)
        return per_row, np.concatenate([g_body, g_emb])

    def regression_loss(self, t, z_t, y, target) -> np.ndarray:
        resid = self.evaluate(t, np.atleast_2d(z_t), np.atleast_2d(y)) - target
        return np.sum(np.atleast_2d(resid) ** 2, axis=1)

    def to_dict(self) -> dict:
        cfg = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.cfg).items()}
        return {"state_dim": self.state_dim, "cond_dim": self.cond_dim, "config": cfg, "params": self.params.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "VectorField":
        cfg = dict(d["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        cfg["embed_hidden"] = tuple(cfg["embed_hidden"])
        return cls(d["state_dim"], d["cond_dim"], FieldConfig(**cfg), np.asarray(d["params"], dtype=np.float64))


def interpolate(z0, z1, t) -> np.ndarray:
    """Straight-line path ``(1 - t) z0 + t z1``; ``t`` may be a per-row vector."""
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise ValueError(f"endpoint shapes differ: {z0.shape} vs {z1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0) | (t > 1)):
        raise ValueError("interpolation time must lie in [0, 1]")
    if t.ndim == 1 and z0.ndim == 2:
        t = t[:, None]
    return (1.0 - t) * z0 + t * z1


@dataclass(frozen=True)
class OdeConfig:
    method: str = "rk4"
    steps: int = 64

    def __post_init__(self):
        if self.method not in ODE_METHODS:
            raise ValueError(f"ODE method must be one of {ODE_METHODS}")
        if self.steps < 1:
            raise ValueError("need at least one ODE step")


def ode_transport(field: VectorField, z0, y, cfg: OdeConfig = OdeConfig()) -> np.ndarray:
    """Integrate dz/dt = u(t, z, y) from t=0 to t=1 on a uniform grid."""
    z = np.array(z0, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite initial state")
    y = np.atleast_2d(y)
    if y.shape[0] == 1 and z.shape[0] > 1:
        y = np.repeat(y, z.shape[0], axis=0)
    if hasattr(field, "frozen_condition"):
        u = field.frozen_condition(field.context(y))
    else:
        ctx = field.context(y)

        def u(t, z):
            return field.velocity(t, z, ctx)

    h = 1.0 / cfg.steps
    for k in range(cfg.steps):
        t = k * h
        if cfg.method == "euler":
            z = z + h * u(t, z)
        else:
            k1 = u(t, z)
            k2 = u(t + 0.5 * h, z + 0.5 * h * k1)
            k3 = u(t + 0.5 * h, z + 0.5 * h * k2)
            k4 = u(t + h, z + h * k3)
            z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(z)):
            raise NonFiniteError(f"non-finite ODE state at step {k + 1} of {cfg.steps}")
    return z[0] if single else z


@dataclass
class TrainingTuple:
    """A batch of training tuples, one per row, all in model space.

    ``x_tilde`` is the transported surrogate the source draw was conditioned
    on; it is a plain array, so nothing downstream can differentiate through it.
    """

    y: np.ndarray
    theta1: np.ndarray
    theta0: np.ndarray
    x1: np.ndarray
    x0: np.ndarray
    x_tilde: np.ndarray

    def __len__(self) -> int:
        return self.y.shape[0]


def sample_training_tuple(
    cal: PairDataset,
    task: Task,
    baseline: ConditionalDensityModel,
    field_x: VectorField,
    sigma: float,
    cfg: OdeConfig,
    rng: RandomSource,
    n: int = 1,
    idx: np.ndarray | None = None,
) -> TrainingTuple:
    if len(cal) == 0:
        raise ValueError("empty calibration set")
    tf = baseline.transforms
    if idx is None:
        idx = rng.integers(0, len(cal), n)
    theta1_orig = cal.theta[idx]
    y = tf.obs_to_model(cal.obs[idx])
    theta1 = tf.theta_to_model(theta1_orig)
    x1 = tf.obs_to_model(task.simulate(theta1_orig, rng))
    x0 = y + sigma * rng.normal(y.shape)
    x_tilde = ode_transport(field_x, x0, y, cfg)
    theta0 = baseline.sample_model(x_tilde, rng)
    return TrainingTuple(y, theta1, theta0, x1, x0, x_tilde)


@dataclass
class JointLoss:
    loss: float
    loss_x: float
    loss_theta: float
    grad_x: np.ndarray
    grad_theta: np.ndarray
    # gradient blocks of the theta term w.r.t. the data field and vice versa;
    # the source draw is a constant, so both are identically zero
    grad_x_from_theta_term: np.ndarray
    grad_theta_from_x_term: np.ndarray
    t: np.ndarray
    tau: np.ndarray


def joint_loss(batch: TrainingTuple, field_x: VectorField, field_theta: VectorField, rng: RandomSource, t=None, tau=None) -> JointLoss:
    """Mean over the batch of both regression terms, with independent times per term."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    t = rng.uniform(size=n) if t is None else np.asarray(t, dtype=np.float64)
    tau = rng.uniform(size=n) if tau is None else np.asarray(tau, dtype=np.float64)
    x_t = interpolate(batch.x0, batch.x1, t)
    theta_tau = interpolate(batch.theta0, batch.theta1, tau)
    lx, gx = field_x.regression_loss_and_grad(t, x_t, batch.y, batch.x1 - batch.x0)
    lth, gth = field_theta.regression_loss_and_grad(tau, theta_tau, batch.y, batch.theta1 - batch.theta0)
    loss_x, loss_theta = float(lx.mean()), float(lth.mean())
    loss = loss_x + loss_theta
    if not math.isfinite(loss):
        raise NonFiniteError("non-finite joint loss")
    return JointLoss(loss, loss_x, loss_theta, gx, gth, np.zeros_like(gx), np.zeros_like(gth), t, tau)


@dataclass
class FmcpeConfig:
    sigma: float = 0.1
    batch_size: int = 32
    lr: float = 3e-4
    clip: float = 1.0
    max_steps: int = 20000
    min_steps: int = 0
    eval_every: int = 50
    patience: int = 1000
    val_fraction: float = 0.2
    val_tuples: int = 256
    field_cfg: FieldConfig = field(default_factory=FieldConfig)
    train_ode: OdeConfig = field(default_factory=lambda: OdeConfig("euler", 64))
    sample_ode: OdeConfig = field(default_factory=lambda: OdeConfig("rk4", 64))

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


class TrainingDiverged(NonFiniteError):
    def __init__(self, message, model):
        super().__init__(message)
        self.model = model


@dataclass
class FmcpeReport:
    steps: int
    best_step: int
    best_val_loss: float
    val_history: list[tuple[int, float, float, float]] = field(default_factory=list, repr=False)
    train_loss_init: tuple[float, float] = (math.nan, math.nan)
    train_loss_final: tuple[float, float] = (math.nan, math.nan)
    seconds: float = 0.0


@dataclass
class FmcpeModel:
    baseline: ConditionalDensityModel
    field_x: VectorField
    field_theta: VectorField
    sigma: float
    ode: OdeConfig = field(default_factory=OdeConfig)

    @property
    def transforms(self):
        return self.baseline.transforms

    def to_dict(self) -> dict:
        base = self.baseline.to_dict()
        return {
            "format": FMCPE_FORMAT,
            "version": FMCPE_VERSION,
            "baseline": base,
            "baseline_hash": self.baseline.param_hash(),
            "field_x": self.field_x.to_dict(),
            "field_theta": self.field_theta.to_dict(),
            "sigma": self.sigma,
            "ode": asdict(self.ode),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FmcpeModel":
        if d.get("format") != FMCPE_FORMAT or d.get("version") != FMCPE_VERSION:
            raise ValueError("not an FMCPE checkpoint of a supported version")
        base = ConditionalDensityModel.from_dict(d["baseline"])
        if base.param_hash() != d["baseline_hash"]:
            raise ValueError("baseline checkpoint hash mismatch")
        return cls(base, VectorField.from_dict(d["field_x"]), VectorField.from_dict(d["field_theta"]), float(d["sigma"]), OdeConfig(**d["ode"]))


def _evaluate(cal, task, baseline, fx, fth, cfg: FmcpeConfig, seed_rng: RandomSource, n_tuples: int) -> tuple[float, float]:
    """Joint loss on a fixed set of tuples; the same stream is replayed every call."""
    rng = seed_rng.fresh()
    idx = np.arange(n_tuples) % len(cal)
    batch = sample_training_tuple(cal, task, baseline, fx, cfg.sigma, cfg.train_ode, rng, idx=idx)
    t, tau = rng.uniform(size=n_tuples), rng.uniform(size=n_tuples)
    lx = fx.regression_loss(t, interpolate(batch.x0, batch.x1, t), batch.y, batch.x1 - batch.x0)
    lth = fth.regression_loss(tau, interpolate(batch.theta0, batch.theta1, tau), batch.y, batch.theta1 - batch.theta0)
    return float(lx.mean()), float(lth.mean())


def train_fmcpe(
    cal: PairDataset,
    task: Task,
    baseline: ConditionalDensityModel,
    config: FmcpeConfig | None = None,
    rng: RandomSource | None = None,
) -> tuple[FmcpeModel, FmcpeReport]:
    """Train both vector fields on calibration pairs; the baseline stays frozen."""
    cfg = config or FmcpeConfig()
    rng = rng or RandomSource(0)
    start = time.perf_counter()
    train, val = cal.split(cfg.val_fraction)
    frozen_hash = baseline.param_hash()
    p, d = baseline.p, baseline.d
    fx = VectorField.init(d, d, cfg.field_cfg, rng.split("init_x"))
    fth = VectorField.init(p, d, cfg.field_cfg, rng.split("init_theta"))
    clip = GradClipConfig(cfg.clip)
    opt_x = AdamState(fx.params.shape[0], lr=cfg.lr)
    opt_th = AdamState(fth.params.shape[0], lr=cfg.lr)
    step_rng = rng.split("steps")
    val_rng = rng.split("validation")
    probe_rng = rng.split("train_probe")
    n_probe = min(cfg.val_tuples, max(len(train), 1) * 8)

    train_init = _evaluate(train, task, baseline, fx, fth, cfg, probe_rng, n_probe)
    vx, vth = _evaluate(val, task, baseline, fx, fth, cfg, val_rng, cfg.val_tuples)
    best = vx + vth
    best_step, best_px, best_pth = 0, fx.params.copy(), fth.params.copy()
    history = [(0, best, vx, vth)]
    step = 0
    for step in range(1, cfg.max_steps + 1):
        batch = sample_training_tuple(train, task, baseline, fx, cfg.sigma, cfg.train_ode, step_rng, n=cfg.batch_size)
        jl = joint_loss(batch, fx, fth, step_rng)
        fx.params[:] = adam_step(opt_x, fx.params, clip_global_norm(jl.grad_x, clip))
        fth.params[:] = adam_step(opt_th, fth.params, clip_global_norm(jl.grad_theta, clip))
        if step % cfg.eval_every:
            continue
        try:
            vx, vth = _evaluate(val, task, baseline, fx, fth, cfg, val_rng, cfg.val_tuples)
        except NonFiniteError:
            vx = vth = math.nan
        v = vx + vth
        history.append((step, v, vx, vth))
        if not math.isfinite(v):
            fx.params[:], fth.params[:] = best_px, best_pth
            raise TrainingDiverged(f"validation loss diverged at step {step}", FmcpeModel(baseline, fx, fth, cfg.sigma, cfg.sample_ode))
        if v < best:
            best, best_step, best_px, best_pth = v, step, fx.params.copy(), fth.params.copy()
        elif step - best_step >= cfg.patience and step >= cfg.min_steps:
            break
    fx.params[:], fth.params[:] = best_px, best_pth
    if baseline.param_hash() != frozen_hash:
        raise RuntimeError("baseline parameters changed during flow training")
    train_final = _evaluate(train, task, baseline, fx, fth, cfg, probe_rng, n_probe)
    report = FmcpeReport(step, best_step, best, history, train_init, train_final, time.perf_counter() - start)
    logger.info("fmcpe: %d steps, best joint val loss %.4f at step %d", step, best, best_step)
    return FmcpeModel(baseline, fx, fth, cfg.sigma, cfg.sample_ode), report


def transport_observations(model: FmcpeModel, y_m: np.ndarray, rng: RandomSource) -> np.ndarray:
    """Surrogate simulator-space observations x~ for model-space y rows."""
    x0 = y_m + model.sigma * rng.normal(y_m.shape)
    return ode_transport(model.field_x, x0, y_m, model.ode)


def sample_posterior_model(model: FmcpeModel, y_m: np.ndarray, rng: RandomSource, chunk: int = 8192) -> np.ndarray:
    """One corrected draw per model-space observation row, in model space."""
    y_m = np.atleast_2d(y_m)
    out = np.empty((y_m.shape[0], model.baseline.p))
    for s in range(0, y_m.shape[0], chunk):
        yc = y_m[s : s + chunk]
        x_tilde = transport_observations(model, yc, rng)
        theta0 = model.baseline.sample_model(x_tilde, rng)
        out[s : s + chunk] = ode_transport(model.field_theta, theta0, yc, model.ode)
    return out


def sample_posterior(model: FmcpeModel, y: np.ndarray, n: int, rng: RandomSource) -> np.ndarray:
    """``n`` corrected posterior draws for a single observation, original coordinates."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (model.baseline.d,):
        raise ValueError(f"expected an observation of dimension {model.baseline.d}")
    if n == 0:
        return np.empty((0, model.baseline.p))
    y_m = np.repeat(model.transforms.obs_to_model(y)[None, :], n, axis=0)
    return model.transforms.theta_from_model(sample_posterior_model(model, y_m, rng))


def model_hash(model: FmcpeModel) -> str:
    return params_hash(np.concatenate([model.baseline.params, model.field_x.params, model.field_theta.params]))
