"""Dense float64 helpers shared by the model, rollout and estimator code.

Everything here works on plain ``numpy`` arrays of dtype float64.  Functions
that take a vector also accept a stack of vectors (last axis is the vector
axis) so the batched rollout code can reuse them.
"""

from __future__ import annotations

import zlib
from typing import Mapping

import numpy as np

PROB_FLOOR = 1e-12


class NumericDomainError(ValueError):
    """Raised when a value leaves the finite / valid domain."""


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericDomainError(f"{what}: non-finite value")


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.shape[-1] < 1:
        raise NumericDomainError("softmax: empty logits")
    _check_finite(z, "softmax")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    _check_finite(z, "log_softmax")
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def logsumexp(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[..., 0]


def sigmoid(x):
    """Logistic function, accurate in both tails (exp of log-sigmoid)."""
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "sigmoid")
    out = np.exp(-np.logaddexp(0.0, -x))
    return out if out.ndim else float(out)


def gate(x: np.ndarray) -> np.ndarray:
    """Unchecked logistic for LSTM gates: 0.5 * (1 + tanh(x / 2))."""
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def log_sigmoid(x):
    """log(sigmoid(x)) = -softplus(-x), stable in both tails."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def softmax_logprob(d, target: int) -> float:
    """Cross-entropy loss ``-log d[target]`` for a one-hot target.

    Probabilities below ``PROB_FLOOR`` are clamped so a zero-probability
    target gives ``-log(1e-12)`` instead of infinity.
    """
    d = np.asarray(d, dtype=np.float64)
    if not 0 <= target < d.shape[-1]:
        raise IndexError(f"target {target} outside distribution of size {d.shape[-1]}")
    return float(-np.log(max(d[target], PROB_FLOOR)))


class Rng:
    """Seeded PCG64 stream.

    Child streams are derived through ``numpy.random.SeedSequence`` spawn keys,
    so ``Rng.derive(seed, step, "ex-3")`` is the same stream on every platform
    and for every batch composition.  ``draws`` counts uniforms handed out by
    :meth:`uniform`, which the rollout tests use for draw accounting.
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.PCG64(ss))
        self.draws = 0

    @classmethod
    def derive(cls, seed: int, *parts) -> "Rng":
        return cls(seed, tuple(_key_part(p) for p in parts))

    def uniform(self, n: int | None = None):
        if n is None:
            self.draws += 1
            return float(self.gen.random())
        self.draws += n
        return self.gen.random(n)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high]`` inclusive."""
        return self.gen.integers(low, high + 1, size=size)


def _key_part(p) -> int:
    if isinstance(p, (int, np.integer)):
        return int(p) & 0xFFFFFFFF
    return zlib.crc32(str(p).encode("utf-8"))


def sample_bernoulli(p: float, rng: Rng) -> int:
    """One Bernoulli draw; consumes exactly one uniform from ``rng``."""
    if not 0.0 <= p <= 1.0:
        raise NumericDomainError(f"bernoulli probability {p} outside [0, 1]")
    return int(rng.uniform() < p)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g)))
    return float(np.sqrt(total))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly) rescaled dict and the norm before clipping.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NumericDomainError("non-finite gradient norm")
    if norm <= max_norm:
        return dict(grads), norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
