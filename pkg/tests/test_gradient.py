import math
from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import make_example
from osq.checks import run_gradcheck, tiny_instance
from osq.episode import Example, RewardConfig, rollout_train, run_batch
from osq.gradient import (VARIANTS, BaselineState, CapacityError, EstimatorConfig, baseline_mse,
                          baseline_predict, baseline_update, enumerate_expected_reward,
                          enumerate_paths, estimate_gradient, expected_estimate,
                          finite_difference_gradient, log_rho, max_relative_error,
                          per_example_gradients, returns_to_go)
from osq.model import Hyperparams, init_params, policy_names
from osq.numerics import Rng


def _rollout(b, d, forced=None):
    b, d = np.asarray(b, float), np.asarray(d)
    forced = np.zeros(len(b), bool) if forced is None else np.asarray(forced)
    return SimpleNamespace(emit_prob=b, decision=d, free=~forced)


def test_log_rho_cases():
    assert log_rho(_rollout([0.5, 0.5], [1, 0])) == pytest.approx(math.log(0.25), rel=1e-15)
    assert log_rho(_rollout([0.9, 0.2], [1, 0])) == pytest.approx(math.log(0.9) + math.log(0.8), rel=1e-15)
    assert log_rho(_rollout([0.9, 0.2], [1, 1], forced=[True, True])) == 0.0


def test_returns_to_go():
    np.testing.assert_array_equal(returns_to_go([0.0, 0.0, 0.0]), [0, 0, 0])
    np.testing.assert_array_equal(returns_to_go([1.0, 2.0, 3.0]), [6, 5, 3])


def test_returns_to_go_first_entry_is_total(small_model):
    ex = make_example(small_model.hyper, 7, (1, 2, 0))
    r = rollout_train(small_model, ex, RewardConfig("entropy", 0.4), Rng(2))
    assert returns_to_go(r)[0] == pytest.approx(r.total_reward, rel=1e-13)


def test_baseline_zero_init_predicts_zero():
    assert baseline_predict(BaselineState.zeros(4), np.ones(4)) == 0.0


def _constant_return_rollouts(value, n=8, T=6, H=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        reward = np.zeros(T)
        reward[-1] = value
        out.append(SimpleNamespace(free=np.ones(T, bool), reward=reward,
                                   hidden=rng.uniform(-1, 1, (T, H))))
    return out


def test_baseline_fits_constant_return():
    state = BaselineState.zeros(3, lr=0.1)
    mses = []
    for k in range(300):
        batch = _constant_return_rollouts(5.0, seed=k)
        mses.append(baseline_mse(state, batch))
        state = baseline_update(state, batch)
    assert abs(baseline_predict(state, np.zeros(3)) - 5.0) < 0.1
    assert mses[-1] < 0.01


def test_baseline_mse_decreases_monotonically():
    # noisy constant-ish returns, fixed features: plain LMS on a convex loss
    rng = np.random.default_rng(1)
    h = rng.uniform(-1, 1, (6, 3))
    batch = []
    for g in (4.0, 6.0, 5.0, 5.5):
        reward = np.zeros(6)
        reward[-1] = g
        batch.append(SimpleNamespace(free=np.ones(6, bool), reward=reward, hidden=h))
    state = baseline_update(BaselineState.zeros(3, lr=0.05), batch)
    mses = [baseline_mse(state, batch)]
    for _ in range(100):
        state = baseline_update(state, batch)
        mses.append(baseline_mse(state, batch))
    assert all(b <= a + 1e-12 for a, b in zip(mses, mses[1:]))


def test_baseline_noop_cases():
    state = BaselineState(np.array([0.3, -0.2]), 0.1, 1.0, 2.0, 5.0)
    same = baseline_update(state, [])
    np.testing.assert_array_equal(same.W, state.W)
    assert same.b == state.b and same.count == state.count
    batch = _constant_return_rollouts(2.0, H=2)
    frozen = baseline_update(state, batch, lr=0.0)
    np.testing.assert_array_equal(frozen.W, state.W)
    assert frozen.b == state.b


def test_enumerate_paths_counts_and_capacity():
    for T1 in range(1, 9):
        for T2 in range(1, T1 + 1):
            paths = enumerate_paths(T1, T2)
            assert len(paths) == math.comb(T1, T2)
            assert all(p.sum() == T2 for p in paths)
    with pytest.raises(CapacityError):
        enumerate_paths(40, 20)


def test_single_path_expectation_equals_its_reward(small_model):
    ex = make_example(small_model.hyper, 3, (1, 2, 0))
    rc = RewardConfig("entropy", 0.5)
    r = rollout_train(small_model, ex, rc, Rng(0))
    assert r.forced.all()
    assert enumerate_expected_reward(small_model, ex, rc) == pytest.approx(r.total_reward, rel=1e-14)


def test_two_path_expectation():
    hp = Hyperparams(1, 2, 2, 3, init_scale=0.0)
    params = init_params(hp, Rng(0))
    params["out.b"][:] = [0.5, -0.2, 0.1]
    ex = make_example(hp, 2, (0,))
    rc = RewardConfig("entropy", 0.0)
    paths = [np.array([1, 0]), np.array([0, 1])]
    rewards = [run_batch(params, [ex], rc, decisions=[p]).reward.sum() for p in paths]
    assert enumerate_expected_reward(params, ex, rc) == pytest.approx(0.5 * sum(rewards), rel=1e-14)


def test_monte_carlo_matches_enumeration(small_model):
    ex = make_example(small_model.hyper, 6, (1, 2, 0), seed=4)
    rc = RewardConfig("entropy", 0.5)
    truth = enumerate_expected_reward(small_model, ex, rc)
    n = 20000
    trace = run_batch(small_model, [ex] * n, rc, [Rng(9, (j,)) for j in range(n)])
    totals = trace.reward.sum(axis=1)
    assert abs(totals.mean() - truth) < 3 * totals.std() / math.sqrt(n)


def test_deterministic_policy_is_pure_backprop(small_model):
    # T1 == T2: every step forced, so the estimate is the supervised gradient
    ex = make_example(small_model.hyper, 3, (1, 2, 0))
    rc = RewardConfig("entropy", 0.0)
    r = rollout_train(small_model, ex, rc, Rng(0))
    fd = finite_difference_gradient(small_model, ex, rc).grads
    for v in VARIANTS.values():
        est = estimate_gradient(small_model, [r], replace(v, reward_cfg=rc))
        assert max_relative_error({n: est.grads[n] for n in policy_names(small_model.hyper)}, fd) < 1e-5


@pytest.mark.parametrize("lam", [0.0, 0.5])
def test_expected_estimate_matches_finite_differences(lam):
    params, ex, baseline = tiny_instance(Rng(21), hidden=2, t1=4, t2=2, vocab=2)
    rc = RewardConfig("entropy", lam)
    fd = finite_difference_gradient(params, ex, rc).grads
    for name, v in VARIANTS.items():
        est = expected_estimate(params, ex, replace(v, reward_cfg=rc), baseline)
        assert max_relative_error(est, fd, 1e-6) < 1e-4, name


def test_kl_regularizer_gradient_matches_finite_differences():
    params, ex, baseline = tiny_instance(Rng(5))
    rc = RewardConfig("kl", 0.8, kl_target_rate=0.3)
    fd = finite_difference_gradient(params, ex, rc).grads
    est = expected_estimate(params, ex, EstimatorConfig(True, True, rc), baseline)
    assert max_relative_error(est, fd, 1e-6) < 1e-4


def test_baseline_value_does_not_change_expectation():
    params, ex, _ = tiny_instance(Rng(8))
    cfg = EstimatorConfig(True, True, RewardConfig("entropy", 0.5))
    a = expected_estimate(params, ex, cfg, BaselineState(np.array([3.0, -1.0]), 2.0, 7.0, 4.0, 1.0))
    b = expected_estimate(params, ex, cfg, BaselineState(np.array([-5.0, 0.5]), -1.0, -3.0, 0.3, 1.0))
    c = expected_estimate(params, ex, replace(cfg, use_baseline=False))
    for name in a:
        np.testing.assert_allclose(a[name], b[name], rtol=0, atol=1e-8)
        np.testing.assert_allclose(a[name], c[name], rtol=0, atol=1e-8)


def test_baseline_changes_individual_samples():
    params, ex, baseline = tiny_instance(Rng(8))
    rc = RewardConfig("entropy", 0.5)
    trace = run_batch(params, [ex] * 4, rc, [Rng(j) for j in range(4)])
    with_b = per_example_gradients(params, trace, EstimatorConfig(True, True, rc), baseline)
    without = per_example_gradients(params, trace, EstimatorConfig(False, True, rc), baseline)
    assert not np.allclose(with_b, without)


def test_per_example_gradients_average_to_batch_estimate(small_model):
    ex = [make_example(small_model.hyper, 6 + k, (1, 2, 0), seed=k, ex_id=str(k)) for k in range(3)]
    rc = RewardConfig("entropy", 0.3)
    trace = run_batch(small_model, ex, rc, [Rng(k) for k in range(3)])
    cfg = EstimatorConfig(False, True, rc)
    per = per_example_gradients(small_model, trace, cfg)
    batch = estimate_gradient(small_model, None, cfg, trace=trace)
    flat = np.concatenate([batch.grads[n].ravel() for n in policy_names(small_model.hyper)])
    np.testing.assert_allclose(per.mean(axis=0), flat, rtol=1e-12, atol=1e-15)


def test_estimate_from_replay_equals_estimate_from_trace(small_model):
    ex = make_example(small_model.hyper, 8, (2, 1, 0))
    rc = RewardConfig("entropy", 0.3)
    trace = run_batch(small_model, [ex, ex], rc, [Rng(1), Rng(2)], dropout_rate=0.3)
    cfg = EstimatorConfig(False, False, rc)
    a = estimate_gradient(small_model, trace.rollouts(), cfg)
    b = estimate_gradient(small_model, None, cfg, trace=trace)
    for name in a.grads:
        np.testing.assert_allclose(a.grads[name], b.grads[name], rtol=1e-12, atol=1e-15)


def test_padding_does_not_change_gradient(small_model):
    hp = small_model.hyper
    ex = make_example(hp, 7, (1, 2, 0), seed=3)
    rc = RewardConfig("entropy", 0.4)
    cfg = EstimatorConfig(False, True, rc)
    grads = []
    for pad in (10, 20):
        trace = run_batch(small_model, [ex], rc, [Rng(6)], pad_to=pad)
        grads.append(estimate_gradient(small_model, None, cfg, trace=trace).grads)
    for name in grads[0]:
        np.testing.assert_allclose(grads[0][name], grads[1][name], rtol=1e-12, atol=1e-15)


def test_flat_landscape_gives_zero_gradient():
    hp = Hyperparams(1, 2, 2, 1)
    params = init_params(hp, Rng(0))
    for _, arr in params.items():
        arr[...] = Rng(1).normal(arr.shape)
    ex = Example(np.ones((4, 2)), (0, 0))
    fd = finite_difference_gradient(params, ex, RewardConfig("entropy", 0.0)).grads
    for name in policy_names(hp):
        np.testing.assert_allclose(fd[name], 0.0, atol=1e-10)


def test_finite_difference_second_order():
    params, ex, _ = tiny_instance(Rng(3))
    rc = RewardConfig("entropy", 0.5)
    ref = expected_estimate(params, ex, EstimatorConfig(False, False, rc))
    e1 = finite_difference_gradient(params, ex, rc, eps=1e-3).grads
    e2 = finite_difference_gradient(params, ex, rc, eps=5e-4).grads
    err1 = np.concatenate([np.ravel(e1[n] - ref[n]) for n in policy_names(params.hyper)])
    err2 = np.concatenate([np.ravel(e2[n] - ref[n]) for n in policy_names(params.hyper)])
    ratio = np.linalg.norm(err1) / np.linalg.norm(err2)
    assert 3.5 < ratio < 4.5


def test_finite_difference_eps_bounds():
    params, ex, _ = tiny_instance(Rng(0))
    with pytest.raises(ValueError):
        finite_difference_gradient(params, ex, RewardConfig(), eps=1e-2)


def test_gradcheck_passes_and_detects_flipped_score_sign():
    assert run_gradcheck().passed
    assert not run_gradcheck(score_sign=-1.0).passed
