"""Generative worlds: priors, low-fidelity simulators and misspecified real processes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core_math import RandomSource, cholesky, gaussian_sample

PROVENANCES = ("simulated", "calibration", "test", "ingested")


class UnsupportedOperation(NotImplementedError):
    pass


@dataclass
class PairDataset:
    theta: np.ndarray
    obs: np.ndarray
    provenance: str = "simulated"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.obs = np.asarray(self.obs, dtype=np.float64)
        if self.theta.ndim != 2 or self.obs.ndim != 2:
            raise ValueError("theta and obs must be 2-D (rows are pairs)")
        if self.theta.shape[0] != self.obs.shape[0]:
            raise ValueError(f"{self.theta.shape[0]} parameters vs {self.obs.shape[0]} observations")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.obs))):
            raise ValueError("dataset contains NaN or Inf")

    def __len__(self) -> int:
        return self.theta.shape[0]

    @property
    def p(self) -> int:
        return self.theta.shape[1]

    @property
    def d(self) -> int:
        return self.obs.shape[1]

    def subset(self, idx) -> "PairDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PairDataset(self.theta[idx], self.obs[idx], self.provenance)

    def split(self, val_fraction: float = 0.2) -> tuple["PairDataset", "PairDataset"]:
        """Deterministic tail split: the last ``ceil(n * val_fraction)`` rows validate.

        Callers shuffle beforehand when the row order carries information.
        """
        n = len(self)
        n_val = max(1, int(math.ceil(n * val_fraction)))
        if n - n_val < 1:
            raise ValueError(f"cannot split {n} pairs into train/validation")
        return self.subset(np.arange(n - n_val)), self.subset(np.arange(n - n_val, n))


class Task:
    """Interface shared by all tasks; arrays are batched along the first axis."""

    name: str
    p: int
    d: int
    # (lo, hi) for uniform priors, which then get a logit transform
    bounds: tuple[np.ndarray, np.ndarray] | None = None

    def prior_sample(self, rng: RandomSource, n: int) -> np.ndarray:
        raise NotImplementedError

    def simulate(self, theta: np.ndarray, rng: RandomSource) -> np.ndarray:
        raise NotImplementedError

    def observe_real(self, theta: np.ndarray, rng: RandomSource) -> np.ndarray:
        raise NotImplementedError

    def analytic_posterior(self, y, which: str = "real"):
        raise UnsupportedOperation(f"task {self.name!r} has no analytic posterior")


def _random_spd(rng: RandomSource, dim: int, scale: float = 0.3, jitter: float = 1e-3) -> np.ndarray:
    L = scale * rng.normal((dim, dim))
    return L @ L.T + jitter * np.eye(dim)


@dataclass
class GaussianTask(Task):
    """Linear-Gaussian world: theta ~ N(mu, S); x ~ N(A theta + b, Sx); y ~ N(C theta + d, Sy)."""

    mu_theta: np.ndarray
    cov_theta: np.ndarray
    A: np.ndarray
    b: np.ndarray
    cov_x: np.ndarray
    C: np.ndarray
    d_vec: np.ndarray
    cov_y: np.ndarray
    name: str = "gaussian"
    bounds: tuple | None = None

    def __post_init__(self):
        self.p = self.mu_theta.shape[0]
        self.d = self.b.shape[0]
        if self.d_vec.shape[0] != self.d:
            raise ValueError("simulator and real observations must share dimension d")
        self._chol_theta = cholesky(self.cov_theta)
        self._chol_x = self._safe_chol(self.cov_x)
        self._chol_y = self._safe_chol(self.cov_y)

    @staticmethod
    def _safe_chol(cov):
        # exact zero covariance is allowed as a deterministic limit
        if not np.any(cov):
            return np.zeros_like(cov)
        return cholesky(cov)

    @classmethod
    def random(cls, rng: RandomSource, p: int = 3, d: int = 10, well_specified: bool = False) -> "GaussianTask":
        mu = rng.normal(p)
        cov_theta = _random_spd(rng, p)
        A = rng.normal((d, p))
        b = rng.normal(d)
        cov_x = _random_spd(rng, d)
        C = rng.normal((d, p))
        d_vec = rng.normal(d)
        cov_y = _random_spd(rng, d)
        if well_specified:
            C, d_vec, cov_y = A.copy(), b.copy(), cov_x.copy()
        return cls(mu, cov_theta, A, b, cov_x, C, d_vec, cov_y)

    def well_specified(self) -> "GaussianTask":
        return replace(self, C=self.A.copy(), d_vec=self.b.copy(), cov_y=self.cov_x.copy())

    def prior_sample(self, rng, n):
        return gaussian_sample(rng, self.mu_theta, self._chol_theta, n)

    def _linear_gaussian(self, theta, M, c, chol, rng):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        return theta @ M.T + c + rng.normal((theta.shape[0], self.d)) @ chol.T

    def simulate(self, theta, rng):
        return self._linear_gaussian(theta, self.A, self.b, self._chol_x, rng)

    def observe_real(self, theta, rng):
        return self._linear_gaussian(theta, self.C, self.d_vec, self._chol_y, rng)

    def analytic_posterior(self, y, which: str = "real"):
        """Conjugate posterior mean(s) and covariance.

        ``which="sim"`` uses the simulator likelihood (A, b, Sx) instead of the
        real one.  ``y`` may be one observation or a batch; the covariance does
        not depend on ``y``.
        """
        if which == "real":
            M, c, cov = self.C, self.d_vec, self.cov_y
        elif which == "sim":
            M, c, cov = self.A, self.b, self.cov_x
        else:
            raise ValueError(f"which must be 'real' or 'sim', not {which!r}")
        return linear_gaussian_posterior(self.mu_theta, self.cov_theta, M, c, cov, y)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            **{k: np.asarray(getattr(self, k)).tolist() for k in ("mu_theta", "cov_theta", "A", "b", "cov_x", "C", "d_vec", "cov_y")},
        }


def linear_gaussian_posterior(mu, cov_prior, M, c, cov_lik, y):
    y = np.asarray(y, dtype=np.float64)
    prior_prec = np.linalg.inv(cov_prior)
    lik_prec = np.linalg.inv(cov_lik)
    post_cov = np.linalg.inv(prior_prec + M.T @ lik_prec @ M)
    post_cov = 0.5 * (post_cov + post_cov.T)
    rhs = prior_prec @ mu + (y - c) @ (lik_prec @ M)
    mean = rhs @ post_cov.T
    return mean, post_cov


@dataclass
class PendulumTask(Task):
    """Frictionless pendulum simulator against a damped real process.

    theta = [A, omega0].  The time grid is drawn once at construction.
    ``phase`` and ``alpha`` override the random phase / damping (tests only).
    """

    times: np.ndarray
    noise_std: float = 0.1
    amp_range: tuple[float, float] = (0.0, 3.0)
    omega_range: tuple[float, float] = (0.5, 10.0)
    alpha_range: tuple[float, float] = (0.0, 1.0)
    phase: float | None = None
    alpha: float | None = None
    name: str = "pendulum"

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.p = 2
        self.d = self.times.shape[0]
        self.bounds = (
            np.array([self.amp_range[0], self.omega_range[0]]),
            np.array([self.amp_range[1], self.omega_range[1]]),
        )

    @classmethod
    def random(cls, rng: RandomSource, n_steps: int = 200, t_max: float = 10.0, **kw) -> "PendulumTask":
        times = np.sort(rng.uniform(0.0, t_max, n_steps))
        return cls(times, **kw)

    def prior_sample(self, rng, n):
        lo, hi = self.bounds
        return lo + (hi - lo) * rng.uniform(size=(n, 2))

    def _phase(self, n, rng):
        if self.phase is not None:
            return np.full((n, 1), float(self.phase))
        return rng.uniform(0.0, 2.0 * np.pi, (n, 1))

    def _oscillation(self, theta, rng):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64))
        n = theta.shape[0]
        amp, omega = theta[:, :1], theta[:, 1:2]
        return amp * np.cos(omega * self.times + self._phase(n, rng)), n

    def simulate(self, theta, rng):
        clean, n = self._oscillation(theta, rng)
        return clean + self.noise_std * rng.normal((n, self.d))

    def observe_real(self, theta, rng):
        clean, n = self._oscillation(theta, rng)
        if self.alpha is not None:
            alpha = np.full((n, 1), float(self.alpha))
        else:
            alpha = rng.uniform(*self.alpha_range, (n, 1))
        return np.exp(-alpha * self.times) * clean + self.noise_std * rng.normal((n, self.d))

    def to_dict(self) -> dict:
        return {"name": self.name, "times": self.times.tolist(), "noise_std": self.noise_std}


@dataclass
class TabularTask(Task):
    """Task backed by user-supplied tables instead of generative code.

    ``simulate`` has no simulator to call; it returns the simulation-bank
    observation whose parameter is nearest (in z-scored parameter space) to
    the query, breaking ties at random.  ``observe_real`` is unavailable:
    real pairs come from the ``real`` table only.
    """

    sim: PairDataset
    real: PairDataset
    bounds: tuple | None = None
    name: str = "csv"

    def __post_init__(self):
        if self.sim.d != self.real.d or self.sim.p != self.real.p:
            raise ValueError("simulation and real tables must share parameter and observation dimensions")
        self.p = self.sim.p
        self.d = self.sim.d
        std = self.sim.theta.std(axis=0)
        self._scale = np.where(std > 0, std, 1.0)

    @classmethod
    def from_dir(cls, path: str | Path) -> "TabularTask":
        path = Path(path)
        return cls(ingest_csv(path / "sim.csv", provenance="simulated"), ingest_csv(path / "real.csv", provenance="ingested"))

    def prior_sample(self, rng, n):
        return self.sim.theta[rng.integers(0, len(self.sim), n)]

    def simulate(self, theta, rng):
        theta = np.atleast_2d(np.asarray(theta, dtype=np.float64)) / self._scale
        bank = self.sim.theta / self._scale
        out = np.empty((theta.shape[0], self.d))
        for i, q in enumerate(theta):
            dist = np.sum((bank - q) ** 2, axis=1)
            ties = np.flatnonzero(dist <= dist.min() * (1 + 1e-12))
            out[i] = self.sim.obs[ties[rng.integers(0, len(ties))]]
        return out

    def observe_real(self, theta, rng):
        raise UnsupportedOperation("tabular tasks only provide the recorded real pairs")

    def to_dict(self) -> dict:
        return {"name": self.name, "n_sim": len(self.sim), "n_real": len(self.real)}


def make_task(name: str, rng: RandomSource, **kw) -> Task:
    if name == "gaussian":
        return GaussianTask.random(rng, well_specified=kw.get("well_specified", False))
    if name == "pendulum":
        return PendulumTask.random(rng, noise_std=kw.get("noise_std", 0.1))
    if name.startswith("csv:"):
        return TabularTask.from_dir(name[4:])
    raise ValueError(f"unknown task {name!r}")


def build_datasets(task: Task, rng: RandomSource, n_sim: int, n_cal_pool: int, n_test: int):
    """Simulation set, calibration pool and test set from disjoint streams."""
    sim_rng, cal_rng, test_rng = rng.split("sim"), rng.split("cal_pool"), rng.split("test")

    def draw(stream, n, real, provenance):
        if n == 0:
            return PairDataset(np.empty((0, task.p)), np.empty((0, task.d)), provenance)
        theta = task.prior_sample(stream.split("prior"), n)
        gen = task.observe_real if real else task.simulate
        return PairDataset(theta, gen(theta, stream.split("obs")), provenance)

    if isinstance(task, TabularTask):
        sim = task.sim if n_sim >= len(task.sim) else task.sim.subset(sim_rng.permutation(len(task.sim))[:n_sim])
        order = cal_rng.permutation(len(task.real))
        if n_cal_pool + n_test > len(task.real):
            raise ValueError(f"real table has {len(task.real)} rows, need {n_cal_pool + n_test}")
        real = task.real
        cal = PairDataset(real.theta[order[:n_cal_pool]], real.obs[order[:n_cal_pool]], "calibration")
        test = PairDataset(real.theta[order[n_cal_pool : n_cal_pool + n_test]], real.obs[order[n_cal_pool : n_cal_pool + n_test]], "test")
        return PairDataset(sim.theta, sim.obs, "simulated"), cal, test

    return (
        draw(sim_rng, n_sim, False, "simulated"),
        draw(cal_rng, n_cal_pool, True, "calibration"),
        draw(test_rng, n_test, True, "test"),
    )


def csv_header(p: int, d: int) -> list[str]:
    return [f"theta_{i}" for i in range(p)] + [f"obs_{j}" for j in range(d)]


def export_csv(dataset: PairDataset, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(dataset.p, dataset.d))
        for th, ob in zip(dataset.theta, dataset.obs):
            writer.writerow([format(v, ".17g") for v in th] + [format(v, ".17g") for v in ob])
    return path


class CsvFormatError(ValueError):
    pass


def _parse_header(header: list[str], path) -> tuple[int, int]:
    p = 0
    while p < len(header) and header[p] == f"theta_{p}":
        p += 1
    d = len(header) - p
    if p == 0 or d == 0 or header[p:] != [f"obs_{j}" for j in range(d)]:
        raise CsvFormatError(f"{path}: header must be theta_0..theta_(p-1),obs_0..obs_(d-1)")
    return p, d


def ingest_csv(path: str | Path, provenance: str = "ingested") -> PairDataset:
    path = Path(path)
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        p, d = _parse_header(header, path)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + d:
                raise CsvFormatError(f"{path}:{lineno}: expected {p + d} fields, got {len(row)}")
            try:
                rows.append([float(tok) for tok in row])
            except ValueError as exc:
                raise CsvFormatError(f"{path}:{lineno}: {exc}") from None
    data = np.asarray(rows, dtype=np.float64).reshape(-1, p + d)
    if not np.all(np.isfinite(data)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(data), axis=1))[0]) + 2
        raise CsvFormatError(f"{path}:{bad}: non-finite value")
    return PairDataset(data[:, :p], data[:, p:], provenance)
