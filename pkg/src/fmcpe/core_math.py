"""Seeded randomness, Gaussian sampling and the data transforms used by the pipeline."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8
LOGIT_EPS_FRACTION = 1e-6


class RandomSource:
    """Single-owner random stream built on numpy's PCG64.

    Child streams are derived by name through ``SeedSequence`` spawn keys, so
    ``RandomSource(7).split("train")`` is the same stream in every process and
    never overlaps its parent or siblings.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = tuple(_key)
        self._seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self._key)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))
        self._n_children = 0

    def split(self, name: str | int) -> "RandomSource":
        """Named child stream, independent of how much the parent has been used."""
        tag = zlib.crc32(str(name).encode("utf-8"))
        return RandomSource(self.seed, self._key + (tag,))

    def fresh(self) -> "RandomSource":
        """A new source replaying this stream from its beginning."""
        return RandomSource(self.seed, self._key)

    def spawn(self) -> "RandomSource":
        """Anonymous child stream; the n-th call always yields the same child."""
        self._n_children += 1
        return RandomSource(self.seed, self._key + (0xFFFF_FFFF, self._n_children))

    def normal(self, size=None) -> np.ndarray:
        return self.generator.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, key={self._key})"


def as_rng(rng: RandomSource | int | None) -> RandomSource:
    if isinstance(rng, RandomSource):
        return rng
    return RandomSource(0 if rng is None else rng)


def cholesky(matrix: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor. Raises instead of jittering a non-SPD input."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {matrix.shape}")
    if not np.allclose(matrix, matrix.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(matrix).max())):
        raise ValueError("cholesky requires a symmetric matrix")
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"matrix is not positive definite: {exc}") from exc


def gaussian_sample(rng: RandomSource, mean: np.ndarray, chol_cov: np.ndarray, n: int | None = None) -> np.ndarray:
    """Draw ``mean + chol_cov @ z`` with ``z`` standard normal.

    With ``n`` given, returns an ``(n, dim)`` array of i.i.d. draws.
    """
    mean = np.asarray(mean, dtype=np.float64)
    chol_cov = np.asarray(chol_cov, dtype=np.float64)
    if mean.ndim != 1:
        raise ValueError("mean must be a vector")
    dim = mean.shape[0]
    if chol_cov.shape != (dim, dim):
        raise ValueError(f"chol_cov shape {chol_cov.shape} does not match mean dimension {dim}")
    if n is None:
        return mean + chol_cov @ rng.normal(dim)
    z = rng.normal((n, dim))
    return mean + z @ chol_cov.T


def _as_rows(data) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    return data


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension z-scoring with population statistics."""

    mean: np.ndarray
    std: np.ndarray
    fitted: bool = True

    def standardize(self, v) -> np.ndarray:
        return (np.asarray(v, dtype=np.float64) - self.mean) / self.std

    def destandardize(self, v) -> np.ndarray:
        return np.asarray(v, dtype=np.float64) * self.std + self.mean

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def standardize_fit(data) -> Standardizer:
    rows = _as_rows(data)
    if rows.shape[0] < 2:
        raise ValueError("standardize_fit needs at least 2 rows")
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    small = std < STD_FLOOR
    if small.any():
        logger.warning("constant column(s) %s: std clamped to %g", np.flatnonzero(small).tolist(), STD_FLOOR)
        std = np.maximum(std, STD_FLOOR)
    return Standardizer(mean, std)


@dataclass(frozen=True)
class LogitTransform:
    """Maps the open box ``(lo, hi)`` onto the real line coordinate-wise."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        if lo.shape != hi.shape:
            raise ValueError("lo and hi must have the same shape")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("logit bounds must be finite")
        if np.any(lo >= hi):
            raise ValueError("logit bounds need lo < hi in every dimension")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def eps(self) -> np.ndarray:
        return LOGIT_EPS_FRACTION * (self.hi - self.lo)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LogitTransform":
        return cls(np.asarray(d["lo"]), np.asarray(d["hi"]))


def logit_forward(v, tf: LogitTransform) -> np.ndarray:
    v = np.clip(np.asarray(v, dtype=np.float64), tf.lo + tf.eps, tf.hi - tf.eps)
    return np.log(v - tf.lo) - np.log(tf.hi - v)


def logit_inverse(u, tf: LogitTransform) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    # expit written to stay finite for large |u|
    s = np.where(u >= 0, 1.0 / (1.0 + np.exp(-np.abs(u))), np.exp(-np.abs(u)) / (1.0 + np.exp(-np.abs(u))))
    return tf.lo + (tf.hi - tf.lo) * s


@dataclass(frozen=True)
class ParamTransform:
    """Original parameter coordinates <-> model space (optional logit, then z-score)."""

    standardizer: Standardizer
    logit: LogitTransform | None = None

    def forward(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        if self.logit is not None:
            theta = logit_forward(theta, self.logit)
        return self.standardizer.standardize(theta)

    def inverse(self, u) -> np.ndarray:
        theta = self.standardizer.destandardize(u)
        if self.logit is not None:
            theta = logit_inverse(theta, self.logit)
        return theta

    @classmethod
    def fit(cls, theta, bounds: tuple[np.ndarray, np.ndarray] | None = None) -> "ParamTransform":
        logit = None if bounds is None else LogitTransform(*bounds)
        theta = _as_rows(theta)
        if logit is not None:
            theta = logit_forward(theta, logit)
        return cls(standardize_fit(theta), logit)

    def to_dict(self) -> dict:
        return {
            "standardizer": self.standardizer.to_dict(),
            "logit": None if self.logit is None else self.logit.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamTransform":
        logit = None if d.get("logit") is None else LogitTransform.from_dict(d["logit"])
        return cls(Standardizer.from_dict(d["standardizer"]), logit)


@dataclass(frozen=True)
class PairTransforms:
    """Transform state shared by every model trained in one experiment."""

    theta: ParamTransform
    obs: Standardizer = field(default=None)

    def theta_to_model(self, theta) -> np.ndarray:
        return self.theta.forward(theta)

    def theta_from_model(self, u) -> np.ndarray:
        return self.theta.inverse(u)

    def obs_to_model(self, obs) -> np.ndarray:
        return self.obs.standardize(obs)

    def obs_from_model(self, u) -> np.ndarray:
        return self.obs.destandardize(u)

    @classmethod
    def fit(cls, theta, obs, bounds=None) -> "PairTransforms":
        return cls(ParamTransform.fit(theta, bounds), standardize_fit(obs))

    def to_dict(self) -> dict:
        return {"theta": self.theta.to_dict(), "obs": self.obs.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "PairTransforms":
        return cls(ParamTransform.from_dict(d["theta"]), Standardizer.from_dict(d["obs"]))
