"""Stochastic emission rollouts, greedy decoding and emission traces.

A training rollout walks the input one frame at a time.  At every frame the
model produces an emission probability ``b_i``; the decision is either forced
(see :func:`forcing_rule`) or sampled.  On emission the model is scored on the
next target token, and the ground-truth token at the current position is fed
back on the following step (teacher forcing).

Rewards are log-probabilities (maximized).  The per-step reward is

    R_i = b~_i * log d_i[y_{p_i}] + [step i free] * regularizer(b_i, b~_i)

Forced steps carry no probability mass under the policy, so they get no
regularizer and no score-function term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (Hyperparams, ModelParams, StepCache, dropout_mask, emission_logprobs,
                    feedback_input, log_softmax, step, zero_state)
from .numerics import PROB_FLOOR, Rng


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    inputs: np.ndarray          # (T1, input_dim)
    targets: tuple[int, ...]    # length T2, last is EOS
    id: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def T1(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def T2(self) -> int:
        return len(self.targets)

    def validate(self, hyper: Hyperparams) -> None:
        x = np.asarray(self.inputs)
        if x.ndim != 2 or x.shape[1] != hyper.input_dim:
            raise InputError(f"example {self.id!r}: inputs must be (T1, {hyper.input_dim}), got {x.shape}")
        if self.T2 < 1:
            raise InputError(f"example {self.id!r}: empty target sequence")
        if self.T2 > self.T1:
            raise InputError(f"example {self.id!r}: T2={self.T2} exceeds T1={self.T1}")
        if self.targets[-1] != hyper.eos:
            raise InputError(f"example {self.id!r}: targets must end with EOS ({hyper.eos})")
        if any(not 0 <= t < hyper.vocab_size for t in self.targets):
            raise InputError(f"example {self.id!r}: target token outside vocabulary")
        if not np.all(np.isfinite(x)):
            raise InputError(f"example {self.id!r}: non-finite input")


@dataclass(frozen=True)
class RewardConfig:
    regularizer: str = "entropy"
    lam: float = 0.0
    kl_target_rate: float = 0.5

    def __post_init__(self):
        if self.regularizer not in ("entropy", "kl"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if not 0.0 < self.kl_target_rate < 1.0:
            raise ValueError("kl_target_rate must lie in (0, 1)")


def regularizer_terms(b, decision, cfg: RewardConfig):
    """Regularizer reward for one emission decision (vectorized over arrays).

    entropy: -lam * log p(decision);  kl: -lam * log(p(decision) / q(decision)).
    """
    b = np.asarray(b, dtype=np.float64)
    d = np.asarray(decision, dtype=np.float64)
    logp = d * np.log(np.maximum(b, PROB_FLOOR)) + (1 - d) * np.log(np.maximum(1 - b, PROB_FLOOR))
    return _regularizer_from_logp(logp, d, cfg)


def _regularizer_from_logp(logp, d, cfg: RewardConfig):
    if cfg.lam == 0.0:
        return np.zeros_like(logp) if np.ndim(logp) else 0.0
    if cfg.regularizer == "entropy":
        return -cfg.lam * logp
    q = cfg.kl_target_rate
    logq = d * math.log(q) + (1 - d) * math.log(1 - q)
    return -cfg.lam * (logp - logq)


def forcing_rule(T1: int, T2: int, i: int, p_prev: int) -> int | None:
    """Forced decision at 1-based step ``i`` given the position before it.

    Returns 0 once every target has been emitted, 1 when skipping this step
    would leave fewer remaining frames than remaining targets, else None.
    """
    if p_prev >= T2:
        return 0
    if T1 - i < T2 - p_prev:
        return 1
    return None


@dataclass
class Rollout:
    example_id: str
    T1: int
    T2: int
    emit_prob: np.ndarray       # (T1,) b_i
    emit_logit: np.ndarray      # (T1,)
    decision: np.ndarray        # (T1,) int
    forced: np.ndarray          # (T1,) bool
    position: np.ndarray        # (T1,) p_i after step i
    feedback: np.ndarray        # (T1,) y_{p_i}, BOS while p_i == 0
    out_probs: np.ndarray       # (T2, V) d_i at the emission steps, in order
    emit_logprob: np.ndarray    # (T1,) log d_i[y_{p_i}] on emission steps, else 0
    reward: np.ndarray          # (T1,) R_i
    hidden: np.ndarray          # (T1, H) top hidden vector read by the heads
    lam: float
    seed: int | None = None
    draws: int = 0
    masks: np.ndarray | None = None  # (T1, L, H) dropout masks, None without dropout
    example: Example | None = field(default=None, repr=False)

    @property
    def total_reward(self) -> float:
        return float(self.reward.sum())

    @property
    def free(self) -> np.ndarray:
        return ~self.forced

    def emission_steps(self) -> np.ndarray:
        """1-based step indices where the model emitted."""
        return np.flatnonzero(self.decision) + 1


@dataclass
class BatchTrace:
    """Everything a batched rollout recorded, including per-step caches for backprop."""
    examples: list[Example]
    T1: np.ndarray              # (B,)
    T2: np.ndarray              # (B,)
    active: np.ndarray          # (B, T) bool
    forced: np.ndarray          # (B, T) bool
    decision: np.ndarray        # (B, T) int
    position: np.ndarray        # (B, T)
    feedback: np.ndarray        # (B, T)
    target: np.ndarray          # (B, T) token scored at emission steps, -1 elsewhere
    emit_logit: np.ndarray      # (B, T)
    emit_prob: np.ndarray       # (B, T)
    probs: np.ndarray           # (B, T, V)
    emit_logprob: np.ndarray    # (B, T)
    reward: np.ndarray          # (B, T)
    hidden: np.ndarray          # (B, T, H)
    caches: list[StepCache]
    lam: float
    masks: np.ndarray | None    # (B, T, L, H)
    seeds: list
    draws: list[int]

    @property
    def free(self) -> np.ndarray:
        return self.active & ~self.forced

    def rollouts(self) -> list[Rollout]:
        out = []
        for k, ex in enumerate(self.examples):
            n = int(self.T1[k])
            emits = self.decision[k, :n].astype(bool)
            out.append(Rollout(
                example_id=ex.id, T1=n, T2=int(self.T2[k]),
                emit_prob=self.emit_prob[k, :n].copy(),
                emit_logit=self.emit_logit[k, :n].copy(),
                decision=self.decision[k, :n].copy(),
                forced=self.forced[k, :n].copy(),
                position=self.position[k, :n].copy(),
                feedback=self.feedback[k, :n].copy(),
                out_probs=self.probs[k, :n][emits].copy(),
                emit_logprob=self.emit_logprob[k, :n].copy(),
                reward=self.reward[k, :n].copy(),
                hidden=self.hidden[k, :n].copy(),
                lam=self.lam, seed=self.seeds[k], draws=self.draws[k],
                masks=None if self.masks is None else self.masks[k, :n].copy(),
                example=ex,
            ))
        return out


def _pad_inputs(examples: Sequence[Example], width: int, T: int) -> np.ndarray:
    X = np.zeros((len(examples), T, width))
    for k, ex in enumerate(examples):
        X[k, :ex.T1] = ex.inputs
    return X


def run_batch(params: ModelParams, examples: Sequence[Example], reward_cfg: RewardConfig,
              rngs: Sequence[Rng] | None = None, dropout_rate: float = 0.0,
              decisions: Sequence[np.ndarray] | None = None,
              masks: Sequence[np.ndarray | None] | None = None,
              pad_to: int | None = None) -> BatchTrace:
    """Teacher-forced rollouts for a batch of examples.

    Decisions are sampled from ``rngs`` (one stream per example, one uniform per
    free step) unless ``decisions`` is given, in which case they are replayed
    and checked against the forcing rule.  Dropout masks likewise come from a
    child stream of each example's rng, or from ``masks`` when replaying.
    Steps past an example's length are padding: they are computed but masked
    out of every reward and gradient.
    """
    hyper = params.hyper
    examples = list(examples)
    for ex in examples:
        ex.validate(hyper)
    B = len(examples)
    if B == 0:
        raise InputError("empty batch")
    T1 = np.array([ex.T1 for ex in examples])
    T2 = np.array([ex.T2 for ex in examples])
    T = int(T1.max()) if pad_to is None else int(pad_to)
    if T < T1.max():
        raise InputError("pad_to shorter than the longest example")
    H, L, V = hyper.hidden_size, hyper.num_layers, hyper.vocab_size
    X = _pad_inputs(examples, hyper.input_dim, T)
    Y = np.zeros((B, int(T2.max()) + 1), dtype=np.int64)
    for k, ex in enumerate(examples):
        Y[k, 1:ex.T2 + 1] = ex.targets
    Y[:, 0] = hyper.bos

    replay = decisions is not None
    if not replay and rngs is None:
        raise ValueError("sampling rollouts need one rng per example")
    if rngs is not None and len(rngs) != B:
        raise ValueError("need exactly one rng per example")

    mask_arr = None
    if replay and masks is not None and any(m is not None for m in masks):
        mask_arr = np.ones((B, T, L, H))
        for k, m in enumerate(masks):
            if m is not None:
                mask_arr[k, :m.shape[0]] = m
    elif not replay and dropout_rate > 0.0:
        mask_arr = np.ones((B, T, L, H))
        for k, ex in enumerate(examples):
            child = Rng(rngs[k].seed, rngs[k].key + (1,))
            mask_arr[k, :ex.T1] = dropout_mask((ex.T1, L, H), dropout_rate, child)

    shape = (B, T)
    active = np.arange(T)[None, :] < T1[:, None]
    forced = np.zeros(shape, dtype=bool)
    decision = np.zeros(shape, dtype=np.int64)
    position = np.zeros(shape, dtype=np.int64)
    feedback = np.zeros(shape, dtype=np.int64)
    target = np.full(shape, -1, dtype=np.int64)
    emit_logit = np.zeros(shape)
    emit_prob = np.zeros(shape)
    probs = np.zeros((B, T, V))
    emit_logprob = np.zeros(shape)
    reward = np.zeros(shape)
    hidden = np.zeros((B, T, H))
    caches: list[StepCache] = []
    draws_before = [r.draws for r in rngs] if rngs is not None else [0] * B

    state = zero_state(hyper, B)
    p = np.zeros(B, dtype=np.int64)
    prev_emit = np.zeros(B)
    prev_tok = np.full(B, hyper.bos, dtype=np.int64)
    rows = np.arange(B)
    for t in range(T):
        i = t + 1
        inp = feedback_input(hyper, X[:, t], prev_emit, prev_tok)
        step_masks = None if mask_arr is None else tuple(mask_arr[:, t, l] for l in range(L))
        out, state, cache = step(params, state, inp, step_masks)
        caches.append(cache)
        act = active[:, t]
        done = p >= T2
        must = (T1 - i) < (T2 - p)
        f = act & (done | must)
        fval = np.where(done, 0, 1)
        if replay:
            dec = np.array([int(d[t]) if t < len(d) else 0 for d in decisions], dtype=np.int64)
            bad = f & (dec != fval)
            if np.any(bad):
                raise InputError(f"replayed decision violates the forcing rule at step {i}")
        else:
            dec = np.zeros(B, dtype=np.int64)
            for k in np.flatnonzero(act & ~f):
                dec[k] = int(rngs[k].uniform() < out.emit_prob[k])
        dec = np.where(f, fval, dec) * act
        p = p + dec
        tgt = Y[rows, p]
        logsm = log_softmax(out.logits)
        lp = logsm[rows, tgt] * dec
        free = act & ~f
        log_b, log_nb = emission_logprobs(out.emit_logit)
        logp_dec = np.where(dec == 1, log_b, log_nb)
        reg = _regularizer_from_logp(logp_dec, dec, reward_cfg)
        reward[:, t] = lp + np.where(free, reg, 0.0)
        forced[:, t] = f
        decision[:, t] = dec
        position[:, t] = p
        feedback[:, t] = tgt
        target[:, t] = np.where(dec == 1, tgt, -1)
        emit_logit[:, t] = out.emit_logit
        emit_prob[:, t] = out.emit_prob
        probs[:, t] = out.probs
        emit_logprob[:, t] = lp
        hidden[:, t] = out.top
        prev_emit = dec.astype(np.float64)
        prev_tok = tgt
    draws = [r.draws - d0 for r, d0 in zip(rngs, draws_before)] if rngs is not None else [0] * B
    seeds = [r.seed for r in rngs] if rngs is not None else [None] * B
    return BatchTrace(examples, T1, T2, active, forced, decision, position, feedback, target,
                      emit_logit, emit_prob, probs, emit_logprob, reward, hidden, caches,
                      reward_cfg.lam, mask_arr, seeds, draws)


def rollout_train(params: ModelParams, example: Example, reward_cfg: RewardConfig,
                  rng: Rng, dropout_rate: float = 0.0) -> Rollout:
    return run_batch(params, [example], reward_cfg, [rng], dropout_rate).rollouts()[0]


@dataclass
class DecodeTrace:
    emit_prob: np.ndarray
    decision: np.ndarray
    position: np.ndarray
    tokens: list[int]

    @property
    def T1(self) -> int:
        return len(self.decision)


def decode_greedy_batch(params: ModelParams, inputs: Sequence[np.ndarray],
                        max_outputs: int | None = None) -> list[DecodeTrace]:
    """Threshold decoding: emit iff b_i >= 0.5, token = argmax d_i, self-fed.

    Each sequence stops after emitting EOS, after its last frame, or once
    ``max_outputs`` tokens are out.
    """
    hyper = params.hyper
    B = len(inputs)
    if B == 0:
        return []
    lens = np.array([len(x) for x in inputs])
    T = int(lens.max())
    X = np.zeros((B, T, hyper.input_dim))
    for k, x in enumerate(inputs):
        X[k, :len(x)] = x
    limit = np.iinfo(np.int64).max if max_outputs is None else max_outputs
    state = zero_state(hyper, B)
    prev_emit = np.zeros(B)
    prev_tok = np.full(B, hyper.bos, dtype=np.int64)
    running = lens > 0
    stop_at = lens.copy()
    count = np.zeros(B, dtype=np.int64)
    bprob = np.zeros((B, T))
    dec = np.zeros((B, T), dtype=np.int64)
    pos = np.zeros((B, T), dtype=np.int64)
    tokens: list[list[int]] = [[] for _ in range(B)]
    for t in range(T):
        if not running.any():
            break
        inp = feedback_input(hyper, X[:, t], prev_emit, prev_tok)
        out, state, _ = step(params, state, inp)
        emit = running & (out.emit_prob >= 0.5)
        tok = np.argmax(out.probs, axis=1)
        bprob[:, t] = out.emit_prob
        dec[:, t] = emit
        count += emit
        pos[:, t] = count
        for k in np.flatnonzero(emit):
            tokens[k].append(int(tok[k]))
        prev_emit = emit.astype(np.float64)
        prev_tok = np.where(emit, tok, prev_tok)
        ended = running & ((emit & (tok == hyper.eos)) | (count >= limit) | (t + 1 >= lens))
        stop_at[ended] = t + 1
        running &= ~ended
    return [DecodeTrace(bprob[k, :stop_at[k]], dec[k, :stop_at[k]], pos[k, :stop_at[k]], tokens[k])
            for k in range(B)]


def decode_greedy(params: ModelParams, inputs: np.ndarray, max_outputs: int | None = None):
    """Returns ``(tokens, trace)`` for one input sequence."""
    trace = decode_greedy_batch(params, [np.asarray(inputs, dtype=np.float64)], max_outputs)[0]
    return trace.tokens, trace


def render_trace(rollout, group: int = 3) -> str:
    """One 'x' per group of ``group`` frames containing an emission, '-' otherwise."""
    if group < 1:
        raise ValueError("group must be >= 1")
    d = np.asarray(rollout.decision)
    n = len(d)
    return "".join("x" if d[s:s + group].any() else "-" for s in range(0, n, group))


def edge_emission_fraction(rollouts: Sequence, edge: float = 0.15) -> float:
    """Fraction of all emissions that land in the first or last ``edge`` of each input."""
    hits = total = 0
    for r in rollouts:
        n = len(r.decision)
        steps = np.flatnonzero(np.asarray(r.decision))
        rel = (steps + 0.5) / n
        hits += int(np.sum((rel <= edge) | (rel >= 1.0 - edge)))
        total += len(steps)
    return hits / total if total else 0.0
