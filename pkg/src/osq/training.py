"""Adam training loop with clipping, entropy/dropout schedules, bucketing and checkpoints."""

from __future__ import annotations

import json
import logging
import os
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .episode import Example, RewardConfig, decode_greedy_batch, run_batch
from .gradient import (BaselineState, EstimatorConfig, _backward, _with_diagnostics,
                       baseline_update_trace)
from .model import Hyperparams, ModelParams, ShapeError, init_params
from .numerics import NumericDomainError, Rng, clip_global_norm
from .tasks import label_error_rate

log = logging.getLogger(__name__)

MAGIC = b"OSQ2SQ1\0"


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------- schedules

@dataclass(frozen=True)
class EntropyScheduleSpec:
    """Entropy weight as a function of the update counter.

    timit:     scale * base**(step / divisor) + offset
    wsj:       hold_value while step < hold_steps, then
               scale * base**(step / divisor - shift) + offset
    constant:  hold_value
    """
    variant: str = "timit"
    base: float = 0.97
    divisor: float = 10000.0
    scale: float = 1.0
    offset: float = 0.1
    hold_steps: int = 0
    hold_value: float = 1.0
    shift: float = 0.0

    @classmethod
    def timit(cls) -> "EntropyScheduleSpec":
        return cls("timit")

    @classmethod
    def wsj(cls) -> "EntropyScheduleSpec":
        return cls("wsj", scale=0.8, offset=0.2, hold_steps=200000, hold_value=1.0, shift=20.0)

    @classmethod
    def constant(cls, value: float) -> "EntropyScheduleSpec":
        return cls("constant", hold_value=value)

    def validate(self) -> None:
        if self.variant not in ("timit", "wsj", "constant"):
            raise ConfigError(f"entropy.variant: unknown variant {self.variant!r}")
        if self.variant == "constant":
            if self.hold_value < 0:
                raise ConfigError("entropy.hold_value: must be >= 0")
            return
        if not 0 < self.base <= 1:
            raise ConfigError("entropy.base: must lie in (0, 1] so lambda stays bounded")
        if self.divisor <= 0:
            raise ConfigError("entropy.divisor: must be > 0")
        if self.scale < 0 or self.offset < 0 or self.hold_value < 0:
            raise ConfigError("entropy.scale/offset/hold_value: must be >= 0")


def entropy_schedule(step: int, spec: EntropyScheduleSpec) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    if spec.variant == "constant":
        return float(spec.hold_value)
    if spec.variant == "wsj" and step < spec.hold_steps:
        return float(spec.hold_value)
    return spec.scale * spec.base ** (step / spec.divisor - spec.shift) + spec.offset


@dataclass(frozen=True)
class DropoutRamp:
    start: int = 5000
    end: int = 20000
    target: float = 0.0

    def validate(self) -> None:
        if self.end <= self.start:
            raise ConfigError("dropout.end: must be greater than dropout.start")
        if not 0.0 <= self.target < 1.0:
            raise ConfigError("dropout.target: must lie in [0, 1)")


def dropout_schedule(step: int, ramp: DropoutRamp) -> float:
    ramp.validate()
    if step <= ramp.start:
        return 0.0
    if step >= ramp.end:
        return ramp.target
    return ramp.target * (step - ramp.start) / (ramp.end - ramp.start)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, params: ModelParams) -> "OptimizerState":
        return cls(params.zeros_like(), params.zeros_like())


def adam_step(state: OptimizerState, params: ModelParams, grads: dict[str, np.ndarray],
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam moving *up* the reward gradient.

    Returns ``(params, state)`` as new objects.  A non-finite gradient skips
    the update and bumps ``state.skipped``.
    """
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        return params, replace(state, skipped=state.skipped + 1)
    t = state.t + 1
    m, v, new = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new[name] = p + lr * (m[name] / c1) / (np.sqrt(v[name] / c2) + eps)
    return ModelParams(params.hyper, new), OptimizerState(m, v, t, state.skipped)


# ---------------------------------------------------------------- bucketing

def make_buckets(examples: Sequence[Example], boundaries: Sequence[int]) -> list[list[int]]:
    """Indices grouped by input length; the last list is the overflow bucket."""
    bounds = list(boundaries)
    if any(b2 <= b1 for b1, b2 in zip(bounds, bounds[1:])):
        raise ConfigError("bucket boundaries must be strictly increasing")
    buckets: list[list[int]] = [[] for _ in range(len(bounds) + 1)]
    for j, ex in enumerate(examples):
        k = next((n for n, cut in enumerate(bounds) if ex.T1 <= cut), len(bounds))
        buckets[k].append(j)
    return buckets


def iter_batches(examples: Sequence[Example], boundaries: Sequence[int], batch_size: int,
                 seed: int) -> Iterator[list[Example]]:
    """Endless stream of single-bucket batches, reshuffled each epoch from ``seed``."""
    buckets = [b for b in make_buckets(examples, boundaries) if b]
    if not buckets:
        raise ConfigError("training set is empty")
    epoch = 0
    while True:
        rng = Rng.derive(seed, "epoch", epoch)
        batches = []
        for idx in buckets:
            order = rng.gen.permutation(idx)
            batches.extend(order[s:s + batch_size] for s in range(0, len(order), batch_size))
        for n in rng.gen.permutation(len(batches)):
            yield [examples[j] for j in batches[n]]
        epoch += 1


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: ModelParams
    opt_state: OptimizerState
    step: int
    baseline_stats: np.ndarray = field(default_factory=lambda: np.zeros(3))
    extra: dict = field(default_factory=dict)


def _checkpoint_tensors(params: ModelParams, opt: OptimizerState, stats: np.ndarray):
    out = list(params.items())
    out += [(f"opt.m.{k}", v) for k, v in opt.m.items()]
    out += [(f"opt.v.{k}", v) for k, v in opt.v.items()]
    out.append(("baseline.stats", np.asarray(stats, dtype=np.float64)))
    return out


def save_checkpoint(params: ModelParams, opt_state: OptimizerState, step: int, path,
                    baseline_stats=None, extra: dict | None = None) -> Path:
    """Write magic, u64 header length, JSON header, then little-endian f64 payloads."""
    path = Path(path)
    stats = np.zeros(3) if baseline_stats is None else np.asarray(baseline_stats, dtype=np.float64)
    tensors = _checkpoint_tensors(params, opt_state, stats)
    header = {
        "hyperparams": params.hyper.to_dict(),
        "step": int(step),
        "opt_step": int(opt_state.t),
        "opt_skipped": int(opt_state.skipped),
        "extra": extra or {},
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": "f64"} for n, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with tmp.open("wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for _, a in tensors:
                fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        os.replace(tmp, path)
    except OSError as err:
        raise OSError(f"cannot write checkpoint {path}: {err}") from err
    return path


def load_checkpoint(path, expect: Hyperparams | None = None) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise OSError(f"cannot read checkpoint {path}: {err}") from err
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header length at offset 8")
    (n,) = struct.unpack("<Q", data[8:16])
    if 16 + n > len(data):
        raise FormatError(f"{path}: header runs past end of file at offset 16")
    try:
        header = json.loads(data[16:16 + n].decode("utf-8"))
        hyper = Hyperparams(**header["hyperparams"])
        manifest = header["tensors"]
    except (ValueError, KeyError, TypeError) as err:
        raise FormatError(f"{path}: unreadable header at offset 16 ({err})") from err
    offset = 16 + n
    arrays = {}
    for entry in manifest:
        if entry.get("dtype") != "f64":
            raise FormatError(f"{path}: tensor {entry.get('name')} has unsupported dtype at offset {offset}")
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(data):
            raise FormatError(f"{path}: tensor {entry['name']} truncated at offset {offset}")
        arrays[entry["name"]] = np.frombuffer(data[offset:offset + nbytes], dtype="<f8").reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes at offset {offset}")
    if expect is not None:
        for name, shape in expect.shapes().items():
            got = arrays.get(name)
            if got is None:
                raise ShapeError(f"checkpoint lacks tensor {name}")
            if got.shape != shape:
                raise ShapeError(f"tensor {name}: checkpoint shape {got.shape} != expected {shape}")
    names = list(hyper.shapes())
    try:
        params = ModelParams(hyper, {k: arrays[k] for k in names})
        opt = OptimizerState({k: arrays[f"opt.m.{k}"] for k in names},
                             {k: arrays[f"opt.v.{k}"] for k in names},
                             int(header["opt_step"]), int(header.get("opt_skipped", 0)))
    except KeyError as err:
        raise FormatError(f"{path}: manifest lacks tensor {err}") from err
    return Checkpoint(params, opt, int(header["step"]), arrays.get("baseline.stats", np.zeros(3)),
                      header.get("extra", {}))


# ---------------------------------------------------------------- loop

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 30.0
    batch_size: int = 16
    max_steps: int = 20000
    entropy: EntropyScheduleSpec = EntropyScheduleSpec()
    regularizer: str = "entropy"
    kl_target_rate: float = 0.5
    dropout: DropoutRamp = DropoutRamp()
    bucket_boundaries: tuple[int, ...] = ()
    seed: int = 0
    eval_interval: int = 500
    checkpoint_interval: int = 5000
    use_baseline: bool = True
    use_rao_blackwell: bool = True
    baseline_lr: float = 1e-2
    stop_ler: float | None = None
    max_skips: int = 10

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError("train.lr: must be > 0")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must lie in [0, 1)")
        if not self.clip_norm > 0:
            raise ConfigError("train.clip_norm: must be > 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size: must be >= 1")
        if self.max_steps < 0:
            raise ConfigError("train.max_steps: must be >= 0")
        if self.eval_interval < 1 or self.checkpoint_interval < 1:
            raise ConfigError("train.eval_interval/checkpoint_interval: must be >= 1")
        b = list(self.bucket_boundaries)
        if any(y <= x for x, y in zip(b, b[1:])):
            raise ConfigError("train.bucket_boundaries: must be strictly increasing")
        if self.regularizer not in ("entropy", "kl"):
            raise ConfigError("train.regularizer: must be 'entropy' or 'kl'")
        if not 0 < self.kl_target_rate < 1:
            raise ConfigError("train.kl_target_rate: must lie in (0, 1)")
        self.entropy.validate()
        self.dropout.validate()


@dataclass
class TrainResult:
    params: ModelParams
    opt_state: OptimizerState
    baseline: BaselineState
    records: list[dict]
    checkpoints: list[Path]
    steps_done: int
    final_ler: float | None


def evaluate_ler(params: ModelParams, examples: Sequence[Example], batch_size: int = 256) -> float:
    refs, hyps = [], []
    for s in range(0, len(examples), batch_size):
        chunk = examples[s:s + batch_size]
        traces = decode_greedy_batch(params, [ex.inputs for ex in chunk],
                                     max_outputs=None)
        refs.extend(ex.targets for ex in chunk)
        hyps.extend(t.tokens for t in traces)
    return label_error_rate(refs, hyps, eos=params.hyper.eos)


def train_loop(cfg: TrainConfig, hyper: Hyperparams, train_set: Sequence[Example],
               eval_set: Sequence[Example] = (), out_dir=None,
               eval_hook: Callable[[int, ModelParams], dict] | None = None,
               init: Checkpoint | None = None) -> TrainResult:
    """Run ``cfg.max_steps`` updates (or until ``cfg.stop_ler`` is reached on ``eval_set``).

    Writes ``ckpt-<step>.osq`` and ``log.jsonl`` under ``out_dir`` when given.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if init is None:
        params = init_params(hyper, Rng.derive(cfg.seed, "init"))
        opt = OptimizerState.zeros(params)
        baseline = BaselineState.from_params(params, lr=cfg.baseline_lr)
        start = 0
    else:
        params, opt, start = init.params.copy(), init.opt_state, init.step
        baseline = BaselineState.from_params(params, init.baseline_stats, lr=cfg.baseline_lr)
    est_cfg = EstimatorConfig(cfg.use_baseline, cfg.use_rao_blackwell,
                              RewardConfig(cfg.regularizer, 0.0, cfg.kl_target_rate))
    records: list[dict] = []
    checkpoints: list[Path] = []
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = (out / "log.jsonl").open("w" if start == 0 else "a", encoding="utf-8")

    def checkpoint(step: int) -> None:
        if out is None:
            return
        baseline.write_into(params)
        checkpoints.append(save_checkpoint(params, opt, step, out / f"ckpt-{step:07d}.osq",
                                           baseline.stats()))

    if start == 0:
        checkpoint(0)
    batches = iter_batches(train_set, cfg.bucket_boundaries, cfg.batch_size, cfg.seed)
    for _ in range(start):
        next(batches)
    consecutive_skips = 0
    last_good = checkpoints[-1] if checkpoints else None
    final_ler = None
    step = start
    try:
        while step < cfg.max_steps:
            t0 = time.perf_counter()
            lam = entropy_schedule(step, cfg.entropy)
            rate = dropout_schedule(step, cfg.dropout)
            batch = next(batches)
            reward_cfg = RewardConfig(cfg.regularizer, lam, cfg.kl_target_rate)
            rngs = [Rng.derive(cfg.seed, "rollout", step, ex.id) for ex in batch]
            trace = run_batch(params, batch, reward_cfg, rngs, rate)
            B = len(batch)
            grads = _backward(params, trace, replace(est_cfg, reward_cfg=reward_cfg), baseline,
                              np.full(B, 1.0 / B))
            est = _with_diagnostics(grads, trace)
            try:
                clipped_grads, norm = clip_global_norm(grads, cfg.clip_norm)
            except NumericDomainError:
                clipped_grads, norm = grads, float("nan")
            new_params, new_opt = adam_step(opt, params, clipped_grads, cfg.lr,
                                            cfg.beta1, cfg.beta2, cfg.adam_eps)
            step += 1
            if new_opt.skipped > opt.skipped:
                consecutive_skips += 1
                opt = new_opt
                log.warning("step %d: non-finite gradient, update skipped", step)
                if consecutive_skips >= cfg.max_skips:
                    raise TrainingAborted(
                        f"{consecutive_skips} consecutive non-finite gradients at step {step}; "
                        f"last good checkpoint: {last_good}")
            else:
                consecutive_skips = 0
                params, opt = new_params, new_opt
                baseline = baseline_update_trace(baseline, trace)
            n_tok = int(trace.T2.sum())
            rec = {
                "step": step,
                "lambda": lam,
                "dropout": rate,
                "mean_reward": est.total_reward,
                "nll_per_token": float(-trace.emit_logprob[trace.active].sum() / n_tok),
                "emission_rate": est.mean_emission_prob,
                "grad_norm_preclip": norm,
                "clipped": bool(norm > cfg.clip_norm),
            }
            stop = False
            if eval_set and (step % cfg.eval_interval == 0 or step == cfg.max_steps):
                final_ler = evaluate_ler(params, eval_set)
                rec["ler"] = final_ler
                if eval_hook is not None:
                    rec.update(eval_hook(step, params))
                log.info("step %d  lambda %.4f  reward %.3f  nll/tok %.4f  ler %.4f",
                         step, lam, est.total_reward, rec["nll_per_token"], final_ler)
                stop = cfg.stop_ler is not None and final_ler <= cfg.stop_ler
            rec["wall_ms"] = (time.perf_counter() - t0) * 1e3
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
            if step % cfg.checkpoint_interval == 0 or step == cfg.max_steps or stop:
                checkpoint(step)
                last_good = checkpoints[-1] if checkpoints else None
            if stop:
                break
    finally:
        if log_fh is not None:
            log_fh.close()
    baseline.write_into(params)
    return TrainResult(params, opt, baseline, records, checkpoints, step, final_ler)
