"""Simulation-trained conditional density models p(theta | x) and the two NPE baselines.

Everything inside a :class:`ConditionalDensityModel` works in model space:
z-scored observations and z-scored (after an optional logit) parameters.
``sample`` converts back to original parameter coordinates.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core_math import PairTransforms, RandomSource
from .nn import AdamState, GradClipConfig, Mlp, NonFiniteError, adam_step, clip_global_norm, params_hash
from .tasks import PairDataset

logger = logging.getLogger(__name__)

HEADS = ("gaussian", "coupling")
LOG_2PI = math.log(2.0 * math.pi)
COUPLING_SCALE_BOUND = 3.0
BASELINE_FORMAT = "fmcpe-baseline"
BASELINE_VERSION = 1


class InsufficientDataError(ValueError):
    pass


@dataclass
class NpeConfig:
    head: str = "gaussian"
    hidden: tuple[int, ...] = (128, 128)
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20
    # halve the step size after this many epochs without improvement (0: never)
    lr_patience: int = 5
    lr_decay: float = 0.5
    clip: float = 1.0
    val_fraction: float = 0.2
    min_pairs: int = 10
    n_couplings: int = 4
    coupling_hidden: tuple[int, ...] = (64, 64)
    context_dim: int = 32
    finetune_lr_factor: float = 0.1

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")


@dataclass
class TrainReport:
    epochs_run: int
    best_val_nll: float
    early_stop_epoch: int
    final_val_nll: float
    history: list[float] = field(default_factory=list, repr=False)


def _tril(p: int) -> tuple[np.ndarray, np.ndarray]:
    return np.tril_indices(p)


def _forward_sub(L: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Solve L z = r row-wise for batched lower-triangular L of shape (n, p, p)."""
    p = r.shape[1]
    z = np.empty_like(r)
    for i in range(p):
        z[:, i] = (r[:, i] - np.einsum("nj,nj->n", L[:, i, :i], z[:, :i])) / L[:, i, i]
    return z


def _back_sub_transpose(L: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Solve L^T w = z row-wise."""
    p = z.shape[1]
    w = np.empty_like(z)
    for i in range(p - 1, -1, -1):
        w[:, i] = (z[:, i] - np.einsum("nj,nj->n", L[:, i + 1 :, i], w[:, i + 1 :])) / L[:, i, i]
    return w


class ConditionalDensityModel:
    """Sampleable conditional density over parameters given an observation.

    ``head="gaussian"`` emits a mean and a lower-triangular scale factor with
    log-parameterised diagonal.  ``head="coupling"`` stacks conditional affine
    coupling layers on a standard normal base.
    """

    def __init__(self, head: str, p: int, d: int, transforms: PairTransforms, cfg: NpeConfig, params: np.ndarray | None = None):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        self.head, self.p, self.d = head, int(p), int(d)
        self.transforms = transforms
        self.cfg = cfg
        self._tri = _tril(self.p)
        self._diag_pos = np.flatnonzero(self._tri[0] == self._tri[1])
        shapes = self._shapes()
        n = sum(sum(w_out * w_in + w_out for w_in, w_out in zip(s[:-1], s[1:])) for s in shapes)
        self.params = np.zeros(n) if params is None else np.asarray(params, dtype=np.float64)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} parameters, got {self.params.shape}")
        self.nets: list[Mlp] = []
        offset = 0
        for s in shapes:
            k = sum(w_out * w_in + w_out for w_in, w_out in zip(s[:-1], s[1:]))
            self.nets.append(Mlp(s, self.params[offset : offset + k]))
            offset += k

    # -- structure -------------------------------------------------------
    def _masks(self):
        out = []
        for k in range(self.cfg.n_couplings):
            if self.p == 1:
                a, b = np.array([0]), np.array([], dtype=int)
            else:
                a = np.array([i for i in range(self.p) if (i + k) % 2 == 1])
                b = np.array([i for i in range(self.p) if (i + k) % 2 == 0])
            out.append((a, b))
        return out

    def _shapes(self):
        hidden = tuple(self.cfg.hidden)
        if self.head == "gaussian":
            n_out = self.p + len(self._tri[0])
            return [(self.d, *hidden, n_out)]
        shapes = [(self.d, *hidden, self.cfg.context_dim)]
        for a, b in self._masks():
            shapes.append((len(b) + self.cfg.context_dim, *self.cfg.coupling_hidden, 2 * len(a)))
        return shapes

    @property
    def conditioner(self) -> Mlp:
        return self.nets[0]

    @classmethod
    def init(cls, head, p, d, transforms, cfg: NpeConfig, rng: RandomSource) -> "ConditionalDensityModel":
        model = cls(head, p, d, transforms, cfg)
        if head == "gaussian":
            Mlp.init(model.conditioner.widths, rng, out_scale=0.1, params=model.conditioner.params)
        else:
            Mlp.init(model.conditioner.widths, rng, params=model.conditioner.params)
            for net in model.nets[1:]:
                Mlp.init(net.widths, rng, out_scale=0.01, params=net.params)
        return model

    def copy(self) -> "ConditionalDensityModel":
        return ConditionalDensityModel(self.head, self.p, self.d, self.transforms, copy.deepcopy(self.cfg), self.params.copy())

    def param_hash(self) -> str:
        return params_hash(self.params)

    # -- gaussian head ---------------------------------------------------
    def _gaussian_parts(self, out):
        n = out.shape[0]
        mu = out[:, : self.p]
        L = np.zeros((n, self.p, self.p))
        L[:, self._tri[0], self._tri[1]] = out[:, self.p :]
        log_diag = out[:, self.p + self._diag_pos]
        idx = np.arange(self.p)
        L[:, idx, idx] = np.exp(log_diag)
        return mu, L, log_diag

    def _gaussian_nll_grad(self, out, theta):
        mu, L, log_diag = self._gaussian_parts(out)
        z = _forward_sub(L, theta - mu)
        nll = 0.5 * np.sum(z * z, axis=1) + np.sum(log_diag, axis=1) + 0.5 * self.p * LOG_2PI
        w = _back_sub_transpose(L, z)
        g = np.empty_like(out)
        g[:, : self.p] = -w
        dL = -w[:, :, None] * z[:, None, :]
        g_tri = dL[:, self._tri[0], self._tri[1]]
        g_tri[:, self._diag_pos] = g_tri[:, self._diag_pos] * np.exp(log_diag) + 1.0
        g[:, self.p :] = g_tri
        return nll, g

    # -- coupling head ---------------------------------------------------
    def _coupling_forward(self, theta, ctx, keep=False):
        u = theta
        log_det = np.zeros(theta.shape[0])
        tape = []
        for net, (a, b) in zip(self.nets[1:], self._masks()):
            inp = np.concatenate([u[:, b], ctx], axis=1)
            out, trace = net.forward_trace(inp)
            th = np.tanh(out[:, : len(a)] / COUPLING_SCALE_BOUND)
            s = COUPLING_SCALE_BOUND * th
            t = out[:, len(a) :]
            new = u.copy()
            new[:, a] = u[:, a] * np.exp(s) + t
            log_det += s.sum(axis=1)
            if keep:
                tape.append((u, inp, trace, th, s))
            u = new
        return u, log_det, tape

    def _coupling_inverse(self, z, ctx):
        u = z
        for net, (a, b) in reversed(list(zip(self.nets[1:], self._masks()))):
            out = net.forward(np.concatenate([u[:, b], ctx], axis=1))
            s = COUPLING_SCALE_BOUND * np.tanh(out[:, : len(a)] / COUPLING_SCALE_BOUND)
            t = out[:, len(a) :]
            prev = u.copy()
            prev[:, a] = (u[:, a] - t) * np.exp(-s)
            u = prev
        return u

    def coupling_transform(self, theta_m, obs_m):
        """Data-to-base map of the coupling head and its log-determinant."""
        ctx = self.conditioner.forward(np.atleast_2d(obs_m))
        z, log_det, _ = self._coupling_forward(np.atleast_2d(theta_m), ctx)
        return z, log_det

    def coupling_inverse(self, z, obs_m):
        ctx = self.conditioner.forward(np.atleast_2d(obs_m))
        return self._coupling_inverse(np.atleast_2d(z), ctx)

    # -- public density interface (model space) --------------------------
    def nll_and_grad(self, theta_m: np.ndarray, obs_m: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean negative log-density over the batch and its parameter gradient."""
        n = theta_m.shape[0]
        grad = np.zeros_like(self.params)
        cond = self.conditioner
        out, trace = cond.forward_trace(obs_m)
        if self.head == "gaussian":
            nll, g_out = self._gaussian_nll_grad(out, theta_m)
            pg, _ = cond.backward(obs_m, g_out / n, trace)
            grad[: cond.n_params] = pg
            return float(nll.mean()), grad

        ctx = out
        z, log_det, tape = self._coupling_forward(theta_m, ctx, keep=True)
        nll = 0.5 * np.sum(z * z, axis=1) + 0.5 * self.p * LOG_2PI - log_det
        gz = z / n
        dctx = np.zeros_like(ctx)
        offsets = np.cumsum([0] + [net.n_params for net in self.nets])
        masks = self._masks()
        for k in range(len(tape) - 1, -1, -1):
            net = self.nets[k + 1]
            a, b = masks[k]
            u, inp, trace_k, th, s = tape[k]
            ga = gz[:, a]
            du = gz.copy()
            es = np.exp(s)
            du[:, a] = ga * es
            ds = ga * u[:, a] * es - 1.0 / n
            d_raw = ds * (1.0 - th * th)
            pg, ig = net.backward(inp, np.concatenate([d_raw, ga], axis=1), trace_k)
            grad[offsets[k + 1] : offsets[k + 2]] = pg
            du[:, b] += ig[:, : len(b)]
            dctx += ig[:, len(b) :]
            gz = du
        pg, _ = cond.backward(obs_m, dctx, trace)
        grad[: cond.n_params] = pg
        return float(nll.mean()), grad

    def log_prob_model(self, theta_m, obs_m) -> np.ndarray:
        theta_m, obs_m = np.atleast_2d(theta_m), np.atleast_2d(obs_m)
        out = self.conditioner.forward(obs_m)
        if self.head == "gaussian":
            nll, _ = self._gaussian_nll_grad(out, theta_m)
            return -nll
        z, log_det, _ = self._coupling_forward(theta_m, out)
        return -(0.5 * np.sum(z * z, axis=1) + 0.5 * self.p * LOG_2PI) + log_det

    def sample_model(self, obs_m: np.ndarray, rng: RandomSource) -> np.ndarray:
        """One model-space draw per observation row."""
        obs_m = np.atleast_2d(obs_m)
        out = self.conditioner.forward(obs_m)
        eps = rng.normal((obs_m.shape[0], self.p))
        if self.head == "gaussian":
            mu, L, _ = self._gaussian_parts(out)
            return mu + np.einsum("nij,nj->ni", L, eps)
        return self._coupling_inverse(eps, out)

    def gaussian_moments_model(self, obs_m):
        """Mean and covariance per row (Gaussian head only), in model space."""
        if self.head != "gaussian":
            raise ValueError("moments are closed-form only for the gaussian head")
        mu, L, _ = self._gaussian_parts(self.conditioner.forward(np.atleast_2d(obs_m)))
        return mu, L @ np.transpose(L, (0, 2, 1))

    def sample(self, obs: np.ndarray, n: int, rng: RandomSource) -> np.ndarray:
        """``n`` i.i.d. draws for one observation, in original coordinates."""
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape != (self.d,):
            raise ValueError(f"expected an observation of dimension {self.d}")
        if n == 0:
            return np.empty((0, self.p))
        obs_m = np.repeat(self.transforms.obs_to_model(obs)[None, :], n, axis=0)
        return self.transforms.theta_from_model(self.sample_model(obs_m, rng))

    def mean_nll(self, data: PairDataset, batch: int = 4096) -> float:
        th = self.transforms.theta_to_model(data.theta)
        ob = self.transforms.obs_to_model(data.obs)
        total = 0.0
        for i in range(0, len(data), batch):
            total -= float(self.log_prob_model(th[i : i + batch], ob[i : i + batch]).sum())
        return total / len(data)

    # -- checkpoints -----------------------------------------------------
    def to_dict(self) -> dict:
        cfg = asdict(self.cfg)
        return {
            "format": BASELINE_FORMAT,
            "version": BASELINE_VERSION,
            "head": self.head,
            "p": self.p,
            "d": self.d,
            "activation": "tanh",
            "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.items()},
            "transforms": self.transforms.to_dict(),
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ConditionalDensityModel":
        if d.get("format") != BASELINE_FORMAT or d.get("version") != BASELINE_VERSION:
            raise ValueError("not a baseline checkpoint of a supported version")
        cfg_d = dict(d["config"])
        for key in ("hidden", "coupling_hidden"):
            cfg_d[key] = tuple(cfg_d[key])
        return cls(d["head"], d["p"], d["d"], PairTransforms.from_dict(d["transforms"]), NpeConfig(**cfg_d), np.asarray(d["params"], dtype=np.float64))


def _fit(model: ConditionalDensityModel, train: PairDataset, val: PairDataset, cfg: NpeConfig, lr: float, rng: RandomSource) -> TrainReport:
    tf = model.transforms
    th, ob = tf.theta_to_model(train.theta), tf.obs_to_model(train.obs)
    clip = GradClipConfig(cfg.clip)
    state = AdamState(model.params.shape[0], lr=lr)
    n = len(train)
    batch = min(cfg.batch_size, n)
    best = model.mean_nll(val)
    best_params = model.params.copy()
    best_epoch, bad, history = 0, 0, [best]
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            loss, grad = model.nll_and_grad(th[idx], ob[idx])
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite training loss at epoch {epoch}")
            model.params[:] = adam_step(state, model.params, clip_global_norm(grad, clip))
        val_nll = model.mean_nll(val)
        if not math.isfinite(val_nll):
            raise NonFiniteError(f"non-finite validation loss at epoch {epoch}")
        history.append(val_nll)
        if val_nll < best:
            best, best_params, best_epoch, bad = val_nll, model.params.copy(), epoch, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
            if cfg.lr_patience and bad % cfg.lr_patience == 0:
                state.lr *= cfg.lr_decay
    final = history[-1]
    model.params[:] = best_params
    logger.info("density fit: %d epochs, best val nll %.4f at epoch %d", epoch, best, best_epoch)
    return TrainReport(epoch, best, best_epoch, final, history)


def _check_size(pairs: PairDataset, cfg: NpeConfig):
    if len(pairs) < cfg.min_pairs:
        raise InsufficientDataError(f"need at least {cfg.min_pairs} pairs, got {len(pairs)}")


def train_npe(
    pairs: PairDataset,
    config: NpeConfig | None = None,
    rng: RandomSource | None = None,
    transforms: PairTransforms | None = None,
    bounds=None,
) -> tuple[ConditionalDensityModel, TrainReport]:
    """Maximum-likelihood fit of p(theta | obs), early-stopped on a 20% hold-out.

    Transforms are fitted on the training split unless supplied.
    """
    cfg = config or NpeConfig()
    rng = rng or RandomSource(0)
    _check_size(pairs, cfg)
    train, val = pairs.split(cfg.val_fraction)
    if transforms is None:
        transforms = PairTransforms.fit(train.theta, train.obs, bounds)
    model = ConditionalDensityModel.init(cfg.head, pairs.p, pairs.d, transforms, cfg, rng.split("init"))
    report = _fit(model, train, val, cfg, cfg.lr, rng.split("fit"))
    return model, report


def train_npe_calibration_only(cal: PairDataset, config: NpeConfig | None = None, rng: RandomSource | None = None, transforms=None, bounds=None) -> ConditionalDensityModel:
    """NPE baseline that never sees a simulation: trained on calibration (theta, y) pairs."""
    model, _ = train_npe(cal, config, rng, transforms, bounds)
    return model


def finetune(model: ConditionalDensityModel, cal: PairDataset, config: NpeConfig | None = None, rng: RandomSource | None = None) -> ConditionalDensityModel:
    """Multi-fidelity style refinement: keep training every weight on (theta, y) pairs at a reduced rate."""
    cfg = config or model.cfg
    rng = rng or RandomSource(0)
    if len(cal) == 0:
        logger.warning("empty calibration set: returning the pretrained model unchanged")
        return model
    _check_size(cal, cfg)
    tuned = model.copy()
    train, val = cal.split(cfg.val_fraction)
    _fit(tuned, train, val, cfg, cfg.lr * cfg.finetune_lr_factor, rng.split("finetune"))
    return tuned
