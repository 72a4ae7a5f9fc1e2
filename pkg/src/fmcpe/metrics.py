"""Joint-sample metrics: classifier two-sample test, exact W2 and posterior MSE."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .core_math import RandomSource, Standardizer, standardize_fit
from .nn import AdamState, GradClipConfig, Mlp, adam_step, clip_global_norm

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("method", "task", "n_cal", "seed", "w2", "jc2st", "mse", "seconds")
W2_CAP = 2000


@dataclass
class JointSampleSet:
    """Rows are concatenated ``(theta, y)`` vectors."""

    vectors: np.ndarray
    label: str = "real"
    standardized: bool = False

    def __post_init__(self):
        self.vectors = np.atleast_2d(np.asarray(self.vectors, dtype=np.float64))
        if self.label not in ("real", "generated"):
            raise ValueError(f"label must be 'real' or 'generated', not {self.label!r}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("joint samples must be finite")

    @classmethod
    def from_pairs(cls, theta, obs, label="real") -> "JointSampleSet":
        return cls(np.concatenate([np.atleast_2d(theta), np.atleast_2d(obs)], axis=1), label)

    def standardize(self, st: Standardizer) -> "JointSampleSet":
        return JointSampleSet(st.standardize(self.vectors), self.label, True)

    def __len__(self) -> int:
        return self.vectors.shape[0]


def _rows(x) -> np.ndarray:
    return x.vectors if isinstance(x, JointSampleSet) else np.atleast_2d(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class C2stConfig:
    hidden: tuple[int, ...] = (64, 64)
    lr: float = 1e-3
    max_epochs: int = 300
    patience: int = 20
    batch_size: int = 128
    clip: float = 1.0
    early_stop_fraction: float = 0.1


def _bce(logits, labels):
    # softplus(z) - y z, stable for large |z|
    return np.maximum(logits, 0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))


def _train_classifier(x, y, cfg: C2stConfig, rng: RandomSource) -> Mlp:
    n = x.shape[0]
    order = rng.permutation(n)
    n_stop = max(1, int(round(cfg.early_stop_fraction * n)))
    stop_idx, fit_idx = order[:n_stop], order[n_stop:]
    net = Mlp.init((x.shape[1], *cfg.hidden, 1), rng)
    state = AdamState(net.n_params, lr=cfg.lr)
    clip = GradClipConfig(cfg.clip)
    best, best_params, bad = math.inf, net.params.copy(), 0
    for _ in range(cfg.max_epochs):
        perm = fit_idx[rng.permutation(fit_idx.shape[0])]
        for s in range(0, perm.shape[0], cfg.batch_size):
            b = perm[s : s + cfg.batch_size]
            logits, trace = net.forward_trace(x[b])
            prob = 1.0 / (1.0 + np.exp(-logits[:, 0]))
            g = ((prob - y[b]) / b.shape[0])[:, None]
            grad, _ = net.backward(x[b], g, trace)
            net.params[:] = adam_step(state, net.params, clip_global_norm(grad, clip))
        loss = float(_bce(net.forward(x[stop_idx])[:, 0], y[stop_idx]).mean())
        if loss < best:
            best, best_params, bad = loss, net.params.copy(), 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    net.params[:] = best_params
    return net


def jc2st(real, gen, rng: RandomSource, folds: int = 3, cfg: C2stConfig | None = None) -> float:
    """Mean held-out accuracy of an MLP classifier telling ``real`` from ``gen``.

    Classes must be balanced.  Inputs are z-scored with pooled statistics and
    split into class-stratified folds.  0.5 means indistinguishable.
    """
    cfg = cfg or C2stConfig()
    a, b = _rows(real), _rows(gen)
    if a.shape != b.shape:
        raise ValueError(f"jC2ST needs equally sized samples, got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n < 30:
        raise ValueError("jC2ST needs at least 30 samples per class")
    x = np.concatenate([a, b])
    x = standardize_fit(x).standardize(x)
    labels = np.concatenate([np.zeros(n), np.ones(n)])
    fold_of = np.empty(2 * n, dtype=np.int64)
    fold_of[rng.permutation(n)] = np.arange(n) % folds
    fold_of[n + rng.permutation(n)] = np.arange(n) % folds
    accs = []
    for k in range(folds):
        train, held = fold_of != k, fold_of == k
        net = _train_classifier(x[train], labels[train], cfg, rng.split(f"fold{k}"))
        pred = (net.forward(x[held])[:, 0] > 0).astype(np.float64)
        accs.append(float(np.mean(pred == labels[held])))
    return float(np.mean(accs))


def w2_joint(real, gen, cap: int = W2_CAP, subsample: bool = False) -> float:
    """Exact 2-Wasserstein distance between two equal-weight point clouds of equal size.

    Uniform marginals on equally many points make the transport problem an
    assignment problem, solved exactly.  Above ``cap`` points the clouds are
    thinned to ``cap`` with a fixed permutation when ``subsample`` is set.
    """
    a, b = _rows(real), _rows(gen)
    if a.shape != b.shape:
        raise ValueError(f"W2 needs equally sized samples, got {a.shape} and {b.shape}")
    n = a.shape[0]
    if n > cap:
        if not subsample:
            raise ValueError(f"{n} points exceed the exact-solver cap of {cap}; pass subsample=True")
        logger.warning("W2: subsampling %d points to %d", n, cap)
        keep = np.sort(RandomSource(0).split("w2_subsample").permutation(n)[:cap])
        a, b = a[keep], b[keep]
        n = cap
    cost = cdist(a, b, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    return float(math.sqrt(max(cost[rows, cols].sum() / n, 0.0)))


def w2_bruteforce(real, gen) -> float:
    """Minimum over all n! pairings; reference for small clouds."""
    a, b = _rows(real), _rows(gen)
    cost = cdist(a, b, "sqeuclidean")
    n = a.shape[0]
    best = min(sum(cost[i, perm[i]] for i in range(n)) for perm in itertools.permutations(range(n)))
    return math.sqrt(best / n)


def mse(samples, truths) -> float:
    """Mean over test points and draws of the squared distance to the paired truth.

    ``samples`` has shape ``(n_test, M, p)``; ``truths`` has shape ``(n_test, p)``.
    """
    samples = np.asarray(samples, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if samples.ndim != 3 or truths.ndim != 2 or samples.shape[0] != truths.shape[0] or samples.shape[2] != truths.shape[1]:
        raise ValueError(f"sample array {samples.shape} does not match truths {truths.shape}")
    if samples.shape[1] < 1:
        raise ValueError("need at least one draw per test point")
    return float(np.mean(np.sum((samples - truths[:, None, :]) ** 2, axis=2)))


@dataclass
class MetricReport:
    method: str
    task: str
    n_cal: int
    seed: int
    w2: float = math.nan
    jc2st: float = math.nan
    mse: float = math.nan
    seconds: float | None = None

    def __post_init__(self):
        if not math.isnan(self.jc2st) and not 0.0 <= self.jc2st <= 1.0:
            raise ValueError("jc2st must lie in [0, 1]")
        if self.w2 < 0 or self.mse < 0:
            raise ValueError("w2 and mse are non-negative")

    def csv_row(self) -> list[str]:
        def fmt(v):
            return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else format(v, ".17g")

        seconds = "" if self.seconds is None else format(self.seconds, ".3f")
        return [self.method, self.task, str(self.n_cal), str(self.seed), fmt(self.w2), fmt(self.jc2st), fmt(self.mse), seconds]

    @classmethod
    def from_row(cls, row: dict) -> "MetricReport":
        seconds = row.get("seconds") or None
        return cls(
            row["method"], row["task"], int(row["n_cal"]), int(row["seed"]),
            float(row["w2"]), float(row["jc2st"]), float(row["mse"]),
            None if seconds is None else float(seconds),
        )
