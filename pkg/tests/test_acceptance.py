"""Acceptance criteria A1-A9.

Each test records one PASS/FAIL line that is printed after the pytest summary
(see ``conftest.pytest_terminal_summary``).  The learning runs (A5, A6, A8)
take most of the wall time.
"""

import itertools
import json
import time
from collections import deque
from dataclasses import replace

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from osq.checks import (REL_FLOOR, bootstrap_variance_gap, sample_gradients, tiny_instance,
                        train_baseline, varlab_instance)
from osq.cli import main
from osq.config import load_config
from osq.episode import Example, RewardConfig, edge_emission_fraction, run_batch
from osq.gradient import (VARIANTS, BaselineState, expected_estimate, finite_difference_gradient,
                          max_relative_error)
from osq.model import Hyperparams, init_params
from osq.numerics import Rng
from osq.tasks import edit_distance, gen_dataset
from osq.training import EntropyScheduleSpec, entropy_schedule, train_loop


def record(key, ok, detail):
    ACCEPTANCE_LINES[key] = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"


# ---------------------------------------------------------------- A1, A2

def _a1_instances(n=20):
    out = []
    for k in range(n):
        rng = Rng.derive(2024, "a1", k)
        t1 = int(rng.integers(2, 6))
        t2 = int(rng.integers(1, min(3, t1)))
        vocab = int(rng.integers(2, 3))
        out.append(tiny_instance(rng, hidden=2, t1=t1, t2=t2, vocab=vocab))
    return out


def test_a1_estimators_match_finite_differences():
    start = time.perf_counter()
    worst = worst_abs_small = 0.0
    failures = []
    for k, (params, ex, baseline) in enumerate(_a1_instances()):
        for lam in (0.0, 0.5):
            rc = RewardConfig("entropy", lam)
            fd = finite_difference_gradient(params, ex, rc, eps=1e-5).grads
            for name, variant in VARIANTS.items():
                est = expected_estimate(params, ex, replace(variant, reward_cfg=rc), baseline)
                err = max_relative_error(est, fd, REL_FLOOR)
                worst = max(worst, err)
                for n in est:
                    small = np.abs(fd[n]) < REL_FLOOR
                    if small.any():
                        worst_abs_small = max(worst_abs_small, float(np.abs(est[n] - fd[n])[small].max()))
                if err > 1e-4:
                    failures.append((k, lam, name, err))
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    record("A1", ok, f"20 instances x 2 lambdas x 4 variants, max rel err {worst:.2e} "
                     f"(tol 1e-4, floor {REL_FLOOR:g}; max abs err on |g| < floor {worst_abs_small:.1e}), "
                     f"{elapsed:.1f}s (limit 120s)")
    assert not failures, failures
    assert elapsed < 120


def test_a2_baseline_does_not_change_expectation():
    worst = 0.0
    for k, (params, ex, _) in enumerate(_a1_instances(10)):
        rng = Rng.derive(2024, "a2", k)
        rc = RewardConfig("entropy", 0.5)
        grads = []
        for _ in range(3):
            b = BaselineState(rng.normal(2, 5.0), float(rng.normal((), 5.0)), float(rng.normal((), 5.0)),
                              float(rng.gen.uniform(0.1, 10.0)), 1.0)
            grads.append(expected_estimate(params, ex, replace(VARIANTS["rao_blackwell_baseline"],
                                                               reward_cfg=rc), b))
            grads.append(expected_estimate(params, ex, replace(VARIANTS["baseline"], reward_cfg=rc), b))
        grads.append(expected_estimate(params, ex, replace(VARIANTS["rao_blackwell"], reward_cfg=rc)))
        for g in grads[1:]:
            for name in g:
                worst = max(worst, float(np.max(np.abs(g[name] - grads[0][name]))))
    record("A2", worst < 1e-8, f"max |change| under baseline swaps {worst:.2e} (tol 1e-8)")
    assert worst < 1e-8


# ---------------------------------------------------------------- A3

def test_a3_rao_blackwell_with_baseline_reduces_variance():
    start = time.perf_counter()
    params, ex = varlab_instance(0)
    rc = RewardConfig("entropy", 0.5)
    baseline = train_baseline(params, ex, rc, seed=0)
    per = sample_gradients(params, ex, rc, 10_000, seed=1, baseline=baseline,
                           variants=("reinforce", "rao_blackwell_baseline"))
    gap, upper = bootstrap_variance_gap(per["rao_blackwell_baseline"], per["reinforce"],
                                        reps=1000, seed=2, level=0.99)
    elapsed = time.perf_counter() - start
    plain = float(per["reinforce"].var(axis=0, ddof=1).sum())
    rbb = float(per["rao_blackwell_baseline"].var(axis=0, ddof=1).sum())
    ok = upper < 0 and elapsed < 300
    record("A3", ok, f"total variance reinforce {plain:.4g} vs rb+baseline {rbb:.4g}; "
                     f"99% upper bound on difference {upper:.4g} (< 0 required), {elapsed:.0f}s")
    assert upper < 0
    assert elapsed < 300


# ---------------------------------------------------------------- A4

def test_a4_forcing_always_emits_every_target():
    rollouts = violations = 0
    for m in range(100):
        rng = Rng.derive(7, "a4", m)
        hp = Hyperparams(int(rng.integers(1, 2)), int(rng.integers(1, 4)), int(rng.integers(1, 3)),
                         int(rng.integers(2, 6)), init_scale=1.0)
        params = init_params(hp, rng)
        params["emit.b"][0] = rng.gen.uniform(-8.0, 8.0)
        examples = []
        for j in range(100):
            t1 = int(rng.integers(1, 30))
            t2 = int(rng.integers(1, t1))
            body = tuple(int(v) for v in rng.integers(0, hp.vocab_size - 1, size=t2 - 1))
            examples.append(Example(rng.normal((t1, hp.input_dim)), body + (hp.eos,), f"{m}-{j}"))
        rngs = [Rng.derive(7, "a4-roll", m, j) for j in range(100)]
        trace = run_batch(params, examples, RewardConfig("entropy", 0.1), rngs,
                          dropout_rate=float(rng.gen.uniform(0.0, 0.5)))
        for r in trace.rollouts():
            rollouts += 1
            if r.decision.sum() != r.T2 or r.position[-1] != r.T2:
                violations += 1
    record("A4", violations == 0 and rollouts == 10_000,
           f"{rollouts} fuzzed rollouts (T1 <= 30), {violations} violations")
    assert rollouts == 10_000
    assert violations == 0


# ---------------------------------------------------------------- A5, A8

SEEDS = range(5)

# Everything not listed keeps the package defaults: stretch_copy with vocab 8,
# lengths 5-10, stretch 1-3, noise 0.1; a 2x64 model; batch 16.  At the
# default lr of 1e-4 seed 0 is still at LER 0.17 after 20k updates, so the
# run uses 1e-3.
A5_CONFIG = {
    "entropy.variant": "timit",
    "train.lr": 1e-3,
    "train.max_steps": 20_000,
    "train.stop_ler": 0.05,
    "train.eval_interval": 500,
    "train.checkpoint_interval": 5000,
}


def _train_run(root, seed):
    out = root / f"seed{seed}"
    cfg = root / f"seed{seed}.json"
    cfg.write_text(json.dumps({**A5_CONFIG, "task.seed": seed}))
    start = time.perf_counter()
    assert main(["train", "--config", str(cfg), "--seed", str(seed), "--out", str(out)]) == 0
    elapsed = time.perf_counter() - start
    recs = [json.loads(line) for line in (out / "log.jsonl").read_text().splitlines()]
    evals = [r for r in recs if "ler" in r]
    return {"dir": out, "steps": recs[-1]["step"], "ler": evals[-1]["ler"], "seconds": elapsed}


@pytest.fixture(scope="module")
def a5_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("a5")
    return {seed: _train_run(root, seed) for seed in SEEDS}


def test_a5_stretch_copy_learns(a5_runs):
    good = [s for s, r in a5_runs.items()
            if r["ler"] <= 0.05 and r["steps"] <= 20_000 and r["seconds"] < 45 * 60]
    shown = "; ".join(f"s{s} LER {r['ler']:.3f} @ {r['steps']} upd {r['seconds']:.0f}s"
                      for s, r in a5_runs.items())
    record("A5", len(good) >= 4, f"{len(good)}/5 seeds reach LER <= 5% ({shown})")
    assert len(good) >= 4


def _log_without_wall(path):
    recs = [json.loads(line) for line in path.read_text().splitlines()]
    for r in recs:
        del r["wall_ms"]
    return recs


def test_a8_training_is_bitwise_reproducible(a5_runs, tmp_path):
    first = a5_runs[0]
    second = _train_run(tmp_path, 0)
    names = sorted(p.name for p in first["dir"].glob("ckpt-*.osq"))
    same_ckpts = names == sorted(p.name for p in second["dir"].glob("ckpt-*.osq")) and all(
        (first["dir"] / n).read_bytes() == (second["dir"] / n).read_bytes() for n in names)
    same_logs = _log_without_wall(first["dir"] / "log.jsonl") == \
        _log_without_wall(second["dir"] / "log.jsonl")
    record("A8", same_ckpts and same_logs,
           f"seed 0 rerun: {len(names)} checkpoints byte-identical {same_ckpts}, "
           f"logs identical except wall_ms {same_logs}")
    assert same_ckpts
    assert same_logs


# ---------------------------------------------------------------- A6

# Edge clustering needs inputs much longer than outputs.  On stretch_copy
# (ratio about 2) neither arm clusters; with blank runs of 6-12 steps the
# unregularized policy drifts to emitting everything at the start.
A6_STEPS = 2000
A6_CONFIG = {
    "entropy.variant": "timit",
    "task.kind": "blank_interleave",
    "task.run_range": [6, 12],
    "train.lr": A5_CONFIG["train.lr"],
    "train.max_steps": A6_STEPS,
    "train.eval_interval": A6_STEPS,
    "train.checkpoint_interval": A6_STEPS,
}


def _edge_fraction_after_training(seed, regularized):
    overrides = {**A6_CONFIG, "train.seed": seed, "task.seed": seed}
    if not regularized:
        overrides.update({"entropy.variant": "constant", "entropy.hold_value": 0.0})
    cfg = load_config(None, overrides)
    spec = cfg.task_spec()
    train = gen_dataset(spec, cfg["task.train_size"], "train")
    evals = gen_dataset(spec, cfg["task.eval_size"], "eval")
    hyper = cfg.hyperparams(spec.input_dim, spec.vocab_size)
    result = train_loop(cfg.train_config(), hyper, train, evals)
    rngs = [Rng.derive(seed, "a6", ex.id) for ex in evals]
    rollouts = run_batch(result.params, evals, RewardConfig("entropy", 0.0), rngs).rollouts()
    return edge_emission_fraction(rollouts)


def test_a6_entropy_penalty_prevents_edge_clustering():
    plain = [_edge_fraction_after_training(s, False) for s in SEEDS]
    reg = [_edge_fraction_after_training(s, True) for s in SEEDS]
    n_plain, n_reg = sum(f > 0.6 for f in plain), sum(f > 0.6 for f in reg)
    ok = n_plain >= 3 and n_reg <= 1
    fmt = lambda fs: " ".join(f"{f:.2f}" for f in fs)
    record("A6", ok, f"edge fraction > 0.6 in {n_plain}/5 seeds with lambda=0 (need >= 3) "
                     f"[{fmt(plain)}], {n_reg}/5 with schedule (need <= 1) [{fmt(reg)}]")
    assert n_plain >= 3
    assert n_reg <= 1


# ---------------------------------------------------------------- A7

def test_a7_schedules_exact():
    timit, wsj = EntropyScheduleSpec.timit(), EntropyScheduleSpec.wsj()
    checks = {
        "timit(0)": (entropy_schedule(0, timit), 1.1),
        "timit(10000)": (entropy_schedule(10000, timit), 1.07),
        "timit(inf)": (entropy_schedule(10**9, timit), 0.1),
        "wsj(199999)": (entropy_schedule(199999, wsj), 1.0),
        "wsj(200000)": (entropy_schedule(200000, wsj), 1.0),
    }
    bad = {k: v for k, (v, want) in checks.items() if f"{v:.15g}" != f"{want:.15g}"}
    shown = ", ".join(f"{k}={v:.15g}" for k, (v, _) in checks.items())
    record("A7", not bad, shown)
    assert not bad


# ---------------------------------------------------------------- A9

def _edit_graph_distances(alphabet=3, max_len=6):
    """All-pairs shortest edit paths by breadth-first search over strings.

    Nodes are all strings of length <= max_len; edges are single insertions,
    deletions and substitutions.
    """
    strings = [s for n in range(max_len + 1) for s in itertools.product(range(alphabet), repeat=n)]
    index = {s: k for k, s in enumerate(strings)}
    neighbours = []
    for s in strings:
        out = set()
        for i in range(len(s)):
            out.add(s[:i] + s[i + 1:])
            out.update(s[:i] + (c,) + s[i + 1:] for c in range(alphabet) if c != s[i])
        if len(s) < max_len:
            out.update(s[:i] + (c,) + s[i:] for i in range(len(s) + 1) for c in range(alphabet))
        neighbours.append([index[o] for o in out])
    for src in range(len(strings)):
        dist = [-1] * len(strings)
        dist[src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in neighbours[u]:
                if dist[v] < 0:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        yield strings[src], strings, dist


def test_a9_edit_distance_matches_edit_path_oracle():
    pairs = mismatches = 0
    for a, strings, dist in _edit_graph_distances():
        for b, d in zip(strings, dist):
            pairs += 1
            if edit_distance(a, b) != d:
                mismatches += 1
    record("A9", mismatches == 0, f"{pairs} pairs (length <= 6, 3 tokens), {mismatches} mismatches")
    assert mismatches == 0
