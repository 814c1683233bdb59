"""Hybrid pathwise + score-function gradient of the expected reward.

For one rollout with decisions held fixed the estimate is

    pathwise:  d/dtheta sum_i R_i
    score:     sum_t A_t * d/dtheta log p(b~_t)      (free steps only)

where ``A_t = R - Omega_t`` (whole-sequence return) or ``A_t = G_t - Omega_t``
(return-to-go, the Rao-Blackwellized form), and ``Omega_t`` is either zero or
the learned baseline evaluated on the top hidden vector at step t.  Because
``Omega_t`` is a function of the history before decision t only, every variant
is unbiased; the enumeration helpers in this module check that exactly.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .episode import (BatchTrace, Example, InputError, RewardConfig, Rollout,
                      regularizer_terms, run_batch)
from .model import ModelParams, policy_names, step_backward
from .numerics import PROB_FLOOR, clip_global_norm, global_norm

__all__ = [
    "GradEstimate", "EstimatorConfig", "BaselineState", "CapacityError", "log_rho",
    "returns_to_go", "baseline_predict", "estimate_gradient", "baseline_update",
    "baseline_update_trace", "fit_baseline", "per_example_gradients", "replay",
    "enumerate_paths", "enumerate_expected_reward", "expected_estimate",
    "finite_difference_gradient", "regularizer_terms", "max_relative_error", "VARIANTS",
]

MAX_ENUMERATED_PATHS = 1 << 20


class CapacityError(RuntimeError):
    pass


@dataclass
class GradEstimate:
    grads: dict[str, np.ndarray]
    total_reward: float = 0.0
    log_rho: float = 0.0
    mean_emission_prob: float = 0.0
    returns: list[np.ndarray] = field(default_factory=list)

    def norm(self) -> float:
        return global_norm(self.grads)

    def clipped(self, max_norm: float) -> tuple["GradEstimate", float]:
        grads, norm = clip_global_norm(self.grads, max_norm)
        return replace(self, grads=grads), norm

    def flat(self) -> np.ndarray:
        return np.concatenate([g.ravel() for g in self.grads.values()])


@dataclass(frozen=True)
class EstimatorConfig:
    use_baseline: bool = True
    use_rao_blackwell: bool = True
    reward_cfg: RewardConfig = RewardConfig()
    # Differentiate the regularizer through b_i directly (it has zero mean, so
    # turning it off keeps the estimator unbiased).
    pathwise_regularizer: bool = True
    # Test hook: -1 flips the score-function term.
    score_sign: float = 1.0


VARIANTS = {
    "reinforce": EstimatorConfig(use_baseline=False, use_rao_blackwell=False),
    "baseline": EstimatorConfig(use_baseline=True, use_rao_blackwell=False),
    "rao_blackwell": EstimatorConfig(use_baseline=False, use_rao_blackwell=True),
    "rao_blackwell_baseline": EstimatorConfig(use_baseline=True, use_rao_blackwell=True),
}


@dataclass
class BaselineState:
    """Affine baseline on the top hidden vector with running return normalization.

    Predictions are ``mean + scale * (W . h + b)`` where ``scale`` is the
    running standard deviation of observed returns.
    """
    W: np.ndarray
    b: float = 0.0
    mean: float = 0.0
    var: float = 0.0
    count: float = 0.0
    lr: float = 1e-2

    @classmethod
    def from_params(cls, params: ModelParams, stats=(0.0, 0.0, 0.0), lr: float = 1e-2):
        mean, var, count = (float(v) for v in stats)
        return cls(params["baseline.W"].copy(), float(params["baseline.b"][0]),
                   mean, var, count, lr)

    @classmethod
    def zeros(cls, hidden_size: int, lr: float = 1e-2):
        return cls(np.zeros(hidden_size), lr=lr)

    @property
    def scale(self) -> float:
        return float(np.sqrt(self.var + 1e-8))

    def stats(self) -> np.ndarray:
        return np.array([self.mean, self.var, self.count])

    def write_into(self, params: ModelParams) -> None:
        params["baseline.W"][...] = self.W
        params["baseline.b"][0] = self.b

    def predict(self, h: np.ndarray) -> np.ndarray:
        return self.mean + self.scale * (np.asarray(h) @ self.W + self.b)


def baseline_predict(state: BaselineState, h) -> float | np.ndarray:
    out = state.predict(h)
    return float(out) if np.ndim(out) == 0 else out


def log_rho(rollout: Rollout) -> float:
    """Log-probability of the free decisions of a rollout."""
    b = rollout.emit_prob
    d = rollout.decision
    terms = d * np.log(np.maximum(b, PROB_FLOOR)) + (1 - d) * np.log(np.maximum(1 - b, PROB_FLOOR))
    return float(np.sum(terms[rollout.free]))


def returns_to_go(rollout_or_rewards) -> np.ndarray:
    r = getattr(rollout_or_rewards, "reward", rollout_or_rewards)
    r = np.asarray(r, dtype=np.float64)
    return np.cumsum(r[..., ::-1], axis=-1)[..., ::-1]


def replay(params: ModelParams, rollouts: Sequence[Rollout], reward_cfg: RewardConfig) -> BatchTrace:
    """Re-run rollouts with their recorded decisions and dropout masks."""
    examples = []
    for r in rollouts:
        if r.example is None:
            raise InputError(f"rollout {r.example_id!r} carries no example to replay")
        examples.append(r.example)
    trace = run_batch(params, examples, reward_cfg, decisions=[r.decision for r in rollouts],
                      masks=[r.masks for r in rollouts])
    for r, k in zip(rollouts, range(len(rollouts))):
        if r.T1 != trace.T1[k]:
            raise InputError("rollout/params mismatch")
    return trace


def _backward(params: ModelParams, trace: BatchTrace, cfg: EstimatorConfig,
              baseline: BaselineState | None, weights: np.ndarray,
              per_example: bool = False) -> dict[str, np.ndarray]:
    B, T = trace.decision.shape
    free = trace.free
    dec = trace.decision.astype(np.float64)
    b = trace.emit_prob
    reward = np.where(trace.active, trace.reward, 0.0)
    G = returns_to_go(reward)
    if cfg.use_baseline and baseline is not None:
        omega = baseline.predict(trace.hidden)
    else:
        omega = np.zeros((B, T))
    adv = G - omega if cfg.use_rao_blackwell else G[:, :1] - omega
    coef = cfg.score_sign * adv
    if cfg.pathwise_regularizer:
        coef = coef - cfg.reward_cfg.lam
    w = weights[:, None]
    d_emit = np.where(free, (dec - b) * coef, 0.0) * w
    emitted = trace.target >= 0
    d_logits = -trace.probs * (emitted * w)[:, :, None]
    bi, ti = np.nonzero(emitted)
    d_logits[bi, ti, trace.target[bi, ti]] += w[bi, 0]

    if per_example:
        grads = {k: np.zeros((B,) + v.shape) for k, v in params.items()}
    else:
        grads = params.zeros_like()
    H, L = params.hyper.hidden_size, params.hyper.num_layers
    dh = [np.zeros((B, H)) for _ in range(L)]
    dc = [np.zeros((B, H)) for _ in range(L)]
    for t in reversed(range(T)):
        step_backward(params, trace.caches[t], d_emit[:, t], d_logits[:, t], dh, dc, grads,
                      per_example=per_example)
    return grads


def _check_reward_cfg(trace: BatchTrace, cfg: EstimatorConfig) -> None:
    if trace.lam != cfg.reward_cfg.lam:
        raise InputError("rollouts were recorded with a different lambda")


def estimate_gradient(params: ModelParams, rollouts: Sequence[Rollout] | None, cfg: EstimatorConfig,
                      baseline: BaselineState | None = None,
                      trace: BatchTrace | None = None) -> GradEstimate:
    """Batch-averaged ascent direction on expected reward.

    ``trace`` may be passed to reuse the caches of the batch that produced
    ``rollouts``; otherwise the rollouts are replayed.
    """
    if trace is None:
        trace = replay(params, rollouts, cfg.reward_cfg)
    _check_reward_cfg(trace, cfg)
    B = trace.decision.shape[0]
    grads = _backward(params, trace, cfg, baseline, np.full(B, 1.0 / B))
    return _with_diagnostics(grads, trace)


def _with_diagnostics(grads, trace: BatchTrace) -> GradEstimate:
    reward = np.where(trace.active, trace.reward, 0.0)
    d = trace.decision
    b = trace.emit_prob
    lp = d * np.log(np.maximum(b, PROB_FLOOR)) + (1 - d) * np.log(np.maximum(1 - b, PROB_FLOOR))
    lrho = np.where(trace.free, lp, 0.0).sum(axis=1)
    G = returns_to_go(reward)
    return GradEstimate(
        grads=grads,
        total_reward=float(reward.sum(axis=1).mean()),
        log_rho=float(lrho.mean()),
        mean_emission_prob=float(b[trace.active].mean()),
        returns=[G[k, :trace.T1[k]] for k in range(len(trace.T1))],
    )


def per_example_gradients(params: ModelParams, trace: BatchTrace, cfg: EstimatorConfig,
                          baseline: BaselineState | None = None) -> np.ndarray:
    """One flattened policy-gradient estimate per rollout, shape ``(B, P)``."""
    _check_reward_cfg(trace, cfg)
    B = trace.decision.shape[0]
    grads = _backward(params, trace, cfg, baseline, np.ones(B), per_example=True)
    names = policy_names(params.hyper)
    return np.concatenate([grads[n].reshape(B, -1) for n in names], axis=1)


def baseline_update(state: BaselineState, rollouts: Sequence[Rollout],
                    lr: float | None = None) -> BaselineState:
    """One least-squares gradient step of the baseline on returns-to-go at free steps."""
    hs, gs = [], []
    for r in rollouts:
        mask = r.free
        if mask.any():
            hs.append(r.hidden[mask])
            gs.append(returns_to_go(r)[mask])
    if not hs:
        return replace(state, W=state.W.copy())
    return fit_baseline(state, np.concatenate(hs), np.concatenate(gs), lr)


def baseline_update_trace(state: BaselineState, trace: BatchTrace,
                          lr: float | None = None) -> BaselineState:
    free = trace.free
    if not free.any():
        return replace(state, W=state.W.copy())
    G = returns_to_go(np.where(trace.active, trace.reward, 0.0))
    return fit_baseline(state, trace.hidden[free], G[free], lr)


def fit_baseline(state: BaselineState, h: np.ndarray, g: np.ndarray,
                 lr: float | None = None) -> BaselineState:
    """Merge return statistics (parallel Welford), then one LMS step on normalized returns."""
    lr = state.lr if lr is None else lr
    n = float(len(g))
    bm, bv = float(g.mean()), float(g.var())
    tot = state.count + n
    delta = bm - state.mean
    mean = state.mean + delta * n / tot
    m2 = state.var * state.count + bv * n + delta * delta * state.count * n / tot
    new = replace(state, W=state.W.copy(), mean=mean, var=m2 / tot, count=tot)
    target = (g - new.mean) / new.scale
    err = h @ new.W + new.b - target
    new.W = new.W - lr * (err @ h) / n
    new.b = new.b - lr * float(err.mean())
    return new


def baseline_mse(state: BaselineState, rollouts: Sequence[Rollout]) -> float:
    errs = []
    for r in rollouts:
        mask = r.free
        errs.append((returns_to_go(r)[mask] - state.predict(r.hidden[mask])) ** 2)
    e = np.concatenate(errs) if errs else np.zeros(0)
    return float(e.mean()) if e.size else 0.0


def enumerate_paths(T1: int, T2: int, limit: int = MAX_ENUMERATED_PATHS) -> list[np.ndarray]:
    """Every decision sequence the forcing rule allows for lengths (T1, T2)."""
    if not 1 <= T2 <= T1:
        raise InputError(f"need 1 <= T2 <= T1, got T1={T1}, T2={T2}")
    # count[i][p]: completions from step i+1 with p targets emitted so far
    count = [[0] * (T2 + 1) for _ in range(T1 + 1)]
    count[T1][T2] = 1
    for i in range(T1 - 1, -1, -1):
        for p in range(T2 + 1):
            options = _options(T1, T2, i + 1, p)
            count[i][p] = sum(count[i + 1][p + d] for d in options if p + d <= T2)
    if count[0][0] > limit:
        raise CapacityError(f"{count[0][0]} decision paths exceed the enumeration bound {limit}")
    paths: list[np.ndarray] = []

    def walk(i: int, p: int, prefix: list[int]) -> None:
        if i == T1:
            paths.append(np.array(prefix, dtype=np.int64))
            return
        for d in _options(T1, T2, i + 1, p):
            walk(i + 1, p + d, prefix + [d])

    walk(0, 0, [])
    return paths


def _options(T1: int, T2: int, i: int, p: int) -> tuple[int, ...]:
    if p >= T2:
        return (0,)
    if T1 - i < T2 - p:
        return (1,)
    return (0, 1)


def _path_trace(params: ModelParams, example: Example, reward_cfg: RewardConfig):
    paths = enumerate_paths(example.T1, example.T2)
    trace = run_batch(params, [example] * len(paths), reward_cfg, decisions=paths)
    d = trace.decision
    b = trace.emit_prob
    lp = d * np.log(np.maximum(b, PROB_FLOOR)) + (1 - d) * np.log(np.maximum(1 - b, PROB_FLOOR))
    rho = np.exp(np.where(trace.free, lp, 0.0).sum(axis=1))
    return trace, rho


def enumerate_expected_reward(params: ModelParams, example: Example,
                              reward_cfg: RewardConfig) -> float:
    """Exact expected total reward: sum over decision paths of rho * R."""
    trace, rho = _path_trace(params, example, reward_cfg)
    return float(rho @ trace.reward.sum(axis=1))


def expected_estimate(params: ModelParams, example: Example, cfg: EstimatorConfig,
                      baseline: BaselineState | None = None) -> dict[str, np.ndarray]:
    """Exact expectation of :func:`estimate_gradient` over all decision paths."""
    trace, rho = _path_trace(params, example, cfg.reward_cfg)
    return _backward(params, trace, cfg, baseline, rho)


def finite_difference_gradient(params: ModelParams, example: Example, reward_cfg: RewardConfig,
                               eps: float = 1e-5) -> GradEstimate:
    """Central differences of the enumerated expected reward, coordinate by coordinate."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    enumerate_paths(example.T1, example.T2)  # capacity check up front
    work = params.copy()
    grads = params.zeros_like()
    for name, arr in work.items():
        if name.startswith("baseline."):
            continue
        for idx in itertools.product(*(range(n) for n in arr.shape)):
            orig = arr[idx]
            arr[idx] = orig + eps
            up = enumerate_expected_reward(work, example, reward_cfg)
            arr[idx] = orig - eps
            down = enumerate_expected_reward(work, example, reward_cfg)
            arr[idx] = orig
            grads[name][idx] = (up - down) / (2 * eps)
    return GradEstimate(grads=grads, total_reward=enumerate_expected_reward(params, example, reward_cfg))


def max_relative_error(a: dict, b: dict, floor: float = 1e-8) -> float:
    """Largest per-coordinate ``|a - b| / max(|a|, |b|, floor)`` over shared tensors."""
    worst = 0.0
    for name in a:
        x, y = np.asarray(a[name]), np.asarray(b[name])
        denom = np.maximum(np.maximum(np.abs(x), np.abs(y)), floor)
        if x.size:
            worst = max(worst, float(np.max(np.abs(x - y) / denom)))
    return worst
