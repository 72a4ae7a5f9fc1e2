"""Small fully-connected networks with hand-written reverse mode, plus Adam.

Parameters of an :class:`Mlp` live in one flat float64 vector; the per-layer
weights and biases are views into it, so optimizers can work on the flat
vector directly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_math import RandomSource

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fmcpe-mlp"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when a loss, gradient or ODE state stops being finite."""


def _n_params(widths: Sequence[int]) -> int:
    return sum(w_out * w_in + w_out for w_in, w_out in zip(widths[:-1], widths[1:]))


class Mlp:
    """tanh hidden layers, affine output layer.

    ``W`` for layer ``k`` has shape ``(out, in)`` and the layer computes
    ``x @ W.T + b``.  Inputs may be a single vector or a batch of rows.
    """

    activation = "tanh"

    def __init__(self, widths: Sequence[int], params: np.ndarray | None = None):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        self.widths = widths
        n = _n_params(widths)
        if params is None:
            params = np.zeros(n)
        if params.shape != (n,):
            raise ValueError(f"expected {n} parameters for widths {widths}, got {params.shape}")
        # no copy: callers may hand in a view of a larger vector
        self.params = params
        self.layers: list[tuple[np.ndarray, np.ndarray]] = []
        offset = 0
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            W = params[offset : offset + w_out * w_in].reshape(w_out, w_in)
            offset += w_out * w_in
            b = params[offset : offset + w_out]
            offset += w_out
            self.layers.append((W, b))

    @property
    def n_params(self) -> int:
        return self.params.shape[0]

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    @classmethod
    def init(cls, widths: Sequence[int], rng: RandomSource, out_scale: float = 1.0, params: np.ndarray | None = None) -> "Mlp":
        """LeCun-normal weights, zero biases; the last layer is scaled by ``out_scale``."""
        net = cls(widths, params)
        last = len(net.layers) - 1
        for k, (W, b) in enumerate(net.layers):
            W[...] = rng.normal(W.shape) / np.sqrt(W.shape[1])
            if k == last:
                W *= out_scale
            b[...] = 0.0
        return net

    def _check_input(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"input dimension {x.shape[-1]} does not match first layer width {self.in_dim}")
        return x, single

    def forward(self, x: np.ndarray) -> np.ndarray:
        x, single = self._check_input(x)
        h = x
        last = len(self.layers) - 1
        for k, (W, b) in enumerate(self.layers):
            h = h @ W.T + b
            if k < last:
                h = np.tanh(h)
        return h[0] if single else h

    __call__ = forward

    def forward_trace(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass that also returns the layer inputs needed by :meth:`backward`."""
        x, single = self._check_input(x)
        acts = [x]
        h = x
        last = len(self.layers) - 1
        for k, (W, b) in enumerate(self.layers):
            h = h @ W.T + b
            if k < last:
                h = np.tanh(h)
                acts.append(h)
        return (h[0] if single else h), acts

    def backward(self, x: np.ndarray, out_grad: np.ndarray, trace: list[np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ``sum(output * out_grad)``.

        Returns ``(param_grad, input_grad)``; the parameter gradient is summed
        over the batch and laid out like :attr:`params`.
        """
        x, single = self._check_input(x)
        if trace is None:
            _, trace = self.forward_trace(x)
        g = np.asarray(out_grad, dtype=np.float64)
        if g.ndim == 1:
            g = g[None, :]
        if g.shape != (x.shape[0], self.out_dim):
            raise ValueError(f"output gradient shape {g.shape} does not match ({x.shape[0]}, {self.out_dim})")
        grad = np.empty_like(self.params)
        offsets = []
        offset = 0
        for W, b in self.layers:
            offsets.append(offset)
            offset += W.size + b.size
        for k in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[k]
            a_in = trace[k]
            o = offsets[k]
            grad[o : o + W.size] = (g.T @ a_in).ravel()
            grad[o + W.size : o + W.size + W.shape[0]] = g.sum(axis=0)
            g = g @ W
            if k > 0:
                # trace[k] is tanh output of the previous layer
                g = g * (1.0 - a_in * a_in)
        return grad, (g[0] if single else g)

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    @classmethod
    def unflatten(cls, widths: Sequence[int], flat: np.ndarray) -> "Mlp":
        return cls(widths, np.array(flat, dtype=np.float64))

    def copy(self) -> "Mlp":
        return Mlp(self.widths, self.params.copy())

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "widths": list(self.widths),
            "activation": self.activation,
            "params": self.params.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Mlp":
        if d.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not an MLP checkpoint: format={d.get('format')!r}")
        if d.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported MLP checkpoint version {d.get('version')}")
        if d.get("activation") != cls.activation:
            raise ValueError(f"unsupported activation {d.get('activation')!r}")
        return cls(d["widths"], np.asarray(d["params"], dtype=np.float64))


@dataclass(frozen=True)
class TimeEmbedding:
    """Sinusoidal features of t on a geometric frequency ladder ``base * 2**k``."""

    n_freqs: int = 4
    base_freq: float = 0.25

    @property
    def dim(self) -> int:
        return 2 * self.n_freqs

    @property
    def freqs(self) -> np.ndarray:
        return self.base_freq * 2.0 ** np.arange(self.n_freqs)


def embed_time(t, emb: TimeEmbedding) -> np.ndarray:
    """``[sin(2 pi f_k t)..., cos(2 pi f_k t)...]``; scalar t gives a vector, arrays give rows."""
    t = np.asarray(t, dtype=np.float64)
    if np.any((t < 0.0) | (t > 1.0)):
        warnings.warn("time outside [0, 1] clamped", RuntimeWarning, stacklevel=2)
        t = np.clip(t, 0.0, 1.0)
    phase = 2.0 * np.pi * t[..., None] * emb.freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


@dataclass
class AdamState:
    n_params: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One bias-corrected Adam update. Mutates ``state`` and returns new parameters."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValueError("parameter, gradient and moment dimensions differ")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteError(f"non-finite gradient at Adam step {state.step + 1}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class GradClipConfig:
    max_norm: float = 1.0

    def __post_init__(self):
        if not self.max_norm > 0:
            raise ValueError("max_norm must be positive")


def clip_global_norm(grads: np.ndarray, cfg: GradClipConfig) -> np.ndarray:
    norm = float(np.sqrt(np.dot(grads, grads)))
    if norm <= cfg.max_norm:
        return grads
    return grads * (cfg.max_norm / norm)


def params_hash(params: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(params, dtype=np.float64).tobytes()).hexdigest()


def write_json(path: str | Path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    return path


def read_json(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
