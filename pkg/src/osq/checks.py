"""Estimator verification runs shipped with the CLI: gradcheck and varlab."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .episode import Example, RewardConfig, run_batch
from .gradient import (VARIANTS, BaselineState, baseline_update_trace,
                       enumerate_paths, expected_estimate, finite_difference_gradient,
                       max_relative_error, per_example_gradients)
from .model import Hyperparams, ModelParams, init_params, policy_names
from .numerics import Rng

GRADCHECK_TOL = 1e-4
# Denominator floor for relative errors.  Central differences at eps 1e-5 carry
# about 1e-11 of absolute round-off on an O(1) reward, so coordinates below
# this floor are held to tol * floor absolute error instead.
REL_FLOOR = 1e-6


def tiny_instance(rng: Rng, hidden: int = 2, t1: int = 6, t2: int = 3, vocab: int = 3,
                  input_dim: int = 2, weight_scale: float = 1.0):
    """Random one-layer model and example small enough to enumerate."""
    hyper = Hyperparams(1, hidden, input_dim, vocab, init_scale=1.0)
    params = init_params(hyper, rng)
    for name, arr in params.items():
        arr[...] = rng.normal(arr.shape, weight_scale)
    body = [int(t) for t in rng.integers(0, max(vocab - 2, 0), size=t2 - 1)]
    ex = Example(rng.normal((t1, input_dim)), tuple(body) + (hyper.eos,), "tiny")
    baseline = BaselineState(rng.normal(hidden), float(rng.normal(())), mean=float(rng.normal(())),
                             var=1.0 + float(rng.gen.random()), count=10.0)
    return params, ex, baseline


@dataclass
class GradcheckResult:
    errors: dict[tuple[str, float], float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    def report(self) -> str:
        lines = ["variant\tlambda\tmax_rel_err\tstatus"]
        for (name, lam), err in self.errors.items():
            lines.append(f"{name}\t{lam:g}\t{err:.3e}\t{'PASS' if err <= self.tol else 'FAIL'}")
        return "\n".join(lines)


def run_gradcheck(hidden: int = 2, t1: int = 6, t2: int = 3, vocab: int = 3, seed: int = 0,
                  lams=(0.0, 0.5), eps: float = 1e-5, score_sign: float = 1.0,
                  instances: int = 1) -> GradcheckResult:
    """Enumerated expectation of every estimator variant against finite differences."""
    enumerate_paths(t1, t2)
    errors: dict[tuple[str, float], float] = {}
    for n in range(instances):
        params, ex, baseline = tiny_instance(Rng.derive(seed, "gradcheck", n), hidden, t1, t2, vocab)
        for lam in lams:
            rc = RewardConfig("entropy", lam)
            fd = finite_difference_gradient(params, ex, rc, eps).grads
            for name, base in VARIANTS.items():
                cfg = replace(base, reward_cfg=rc, score_sign=score_sign)
                est = expected_estimate(params, ex, cfg, baseline)
                err = max_relative_error(est, fd, REL_FLOOR)
                errors[(name, lam)] = max(errors.get((name, lam), 0.0), err)
    return GradcheckResult(errors, GRADCHECK_TOL)


# ---------------------------------------------------------------- variance lab

VARLAB_LAMBDA = 0.5


def varlab_instance(seed: int = 0):
    params, ex, _ = tiny_instance(Rng.derive(seed, "varlab"), hidden=2, t1=6, t2=3, vocab=3)
    return params, ex


def train_baseline(params: ModelParams, ex: Example, rc: RewardConfig, seed: int,
                   updates: int = 300, batch: int = 64, lr: float = 0.05) -> BaselineState:
    state = BaselineState.zeros(params.hyper.hidden_size, lr=lr)
    for k in range(updates):
        rngs = [Rng.derive(seed, "baseline-fit", k, j) for j in range(batch)]
        trace = run_batch(params, [ex] * batch, rc, rngs)
        state = baseline_update_trace(state, trace)
    return state


def sample_gradients(params: ModelParams, ex: Example, rc: RewardConfig, samples: int,
                     seed: int, baseline: BaselineState | None,
                     variants=tuple(VARIANTS)) -> dict[str, np.ndarray]:
    """Per-rollout estimates ``(samples, P)`` for each variant, all on the same rollouts."""
    out = {v: [] for v in variants}
    chunk = 2000
    for start in range(0, samples, chunk):
        n = min(chunk, samples - start)
        rngs = [Rng.derive(seed, "varlab-sample", start + j) for j in range(n)]
        trace = run_batch(params, [ex] * n, rc, rngs)
        for v in variants:
            cfg = replace(VARIANTS[v], reward_cfg=rc)
            out[v].append(per_example_gradients(params, trace, cfg, baseline))
    return {v: np.concatenate(a) for v, a in out.items()}


def coord_names(params: ModelParams) -> list[str]:
    names = []
    for n in policy_names(params.hyper):
        for idx in itertools.product(*(range(s) for s in params[n].shape)):
            names.append(f"{n}[{','.join(map(str, idx))}]")
    return names


def flat_policy(grads: dict, params: ModelParams) -> np.ndarray:
    return np.concatenate([np.asarray(grads[n]).ravel() for n in policy_names(params.hyper)])


def run_varlab(samples: int = 10000, seed: int = 0):
    """Returns ``(rows, totals)``: CSV rows (variant, coord, mean, variance, bias) and
    total variance per variant."""
    if samples < 1000:
        raise ValueError("varlab needs at least 1000 samples")
    params, ex = varlab_instance(seed)
    rc = RewardConfig("entropy", VARLAB_LAMBDA)
    truth = flat_policy(expected_estimate(params, ex, replace(VARIANTS["reinforce"], reward_cfg=rc)), params)
    baseline = train_baseline(params, ex, rc, seed)
    per = sample_gradients(params, ex, rc, samples, seed, baseline)
    names = coord_names(params)
    rows, totals = [], {}
    for v, g in per.items():
        mean = g.mean(axis=0)
        var = g.var(axis=0, ddof=1)
        totals[v] = float(var.sum())
        for j, name in enumerate(names):
            rows.append((v, name, float(mean[j]), float(var[j]), float(mean[j] - truth[j])))
    return rows, totals


def bootstrap_variance_gap(a: np.ndarray, b: np.ndarray, reps: int = 1000, seed: int = 0,
                           level: float = 0.99) -> tuple[float, float]:
    """One-sided upper confidence bound on ``totvar(a) - totvar(b)`` for paired samples.

    Returns ``(observed_gap, upper_bound)``.
    """
    n = a.shape[0]
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    gaps = np.empty(reps)
    for r in range(reps):
        idx = gen.integers(0, n, n)
        gaps[r] = a[idx].var(axis=0, ddof=1).sum() - b[idx].var(axis=0, ddof=1).sum()
    observed = float(a.var(axis=0, ddof=1).sum() - b.var(axis=0, ddof=1).sum())
    return observed, float(np.quantile(gaps, level))
