"""Command-line entry point: ``osq {train,eval,trace,gradcheck,varlab,gen-data}``.

Machine-readable outputs:
  log.jsonl   one object per update: step, lambda, dropout, mean_reward,
              nll_per_token, emission_rate, grad_norm_preclip, clipped,
              ler (eval steps only), wall_ms
  trace       one line per example: <id> TAB <trace>; with --probs a CSV
              example_id,step,b,decision
  varlab      CSV variant,coord,mean,variance,bias
  gradcheck   TSV variant,lambda,max_rel_err,status

Set OSQ_LOG_LEVEL to error, info (default) or debug.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .checks import GRADCHECK_TOL, run_gradcheck, run_varlab
from .config import load_config
from .episode import InputError, RewardConfig, decode_greedy_batch, run_batch, render_trace
from .gradient import CapacityError
from .model import ShapeError
from .numerics import Rng
from .tasks import (UndefinedRateError, edit_distance, gen_dataset, label_error_rate, read_dataset,
                    stack_example, write_dataset)
from .training import ConfigError, FormatError, TrainingAborted, load_checkpoint, train_loop

log = logging.getLogger("osq")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("OSQ_LOG_LEVEL", "info").lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"OSQ_LOG_LEVEL: must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(message)s", stream=sys.stderr)


def _load_datasets(cfg, seed):
    """Train and eval sets from files when configured, else generated from the task spec."""
    spec = cfg.task_spec(seed)
    train = read_dataset(cfg["data.train"]) if cfg["data.train"] else \
        gen_dataset(spec, cfg["task.train_size"], "train")
    evals = read_dataset(cfg["data.eval"]) if cfg["data.eval"] else \
        gen_dataset(spec, cfg["task.eval_size"], "eval")
    if not train:
        raise ConfigError("data.train: dataset is empty")
    return train, evals


def _stacked(examples, k):
    return examples if k == 1 else [stack_example(ex, k) for ex in examples]


def cmd_train(args) -> int:
    overrides = {"train.seed": args.seed, "train.max_steps": args.max_steps, "data.train": args.dataset}
    cfg = load_config(args.config, overrides)
    seed = cfg["train.seed"]
    train, evals = _load_datasets(cfg, cfg["task.seed"])
    vocab = cfg["task.vocab_size"]
    width = train[0].inputs.shape[1]
    k = cfg["model.stack"]
    hyper = cfg.hyperparams(width, vocab)
    train, evals = _stacked(train, k), _stacked(evals, k)
    for ex in list(train) + list(evals):
        ex.validate(hyper)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    log.info("training %d-layer %d-unit model, seed %d, %d train / %d eval examples",
             hyper.num_layers, hyper.hidden_size, seed, len(train), len(evals))
    try:
        result = train_loop(cfg.train_config(), hyper, train, evals, out)
    except TrainingAborted as err:
        log.error("aborted: %s", err)
        return 1
    msg = f"done: {result.steps_done} steps"
    if result.final_ler is not None:
        msg += f", held-out LER {result.final_ler:.4f}"
    print(msg)
    return 0


def _checkpoint_and_data(args):
    if not args.checkpoint or not args.dataset:
        raise ConfigError("--checkpoint and --dataset are required")
    ckpt = load_checkpoint(args.checkpoint)
    examples = read_dataset(args.dataset)
    hyper = ckpt.params.hyper
    if examples:
        width = examples[0].inputs.shape[1]
        if hyper.input_dim % width:
            raise ShapeError(f"dataset frame width {width} does not divide model input width {hyper.input_dim}")
        examples = _stacked(examples, hyper.input_dim // width)
    for ex in examples:
        ex.validate(hyper)
    return ckpt, examples


def _fmt(seq) -> str:
    return " ".join(str(t) for t in seq)


def cmd_eval(args) -> int:
    ckpt, examples = _checkpoint_and_data(args)
    eos = ckpt.params.hyper.eos
    traces = decode_greedy_batch(ckpt.params, [ex.inputs for ex in examples])
    refs = [list(ex.targets) for ex in examples]
    hyps = [t.tokens for t in traces]
    ler = label_error_rate(refs, hyps, eos=eos)
    dump = None
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        dump = (Path(args.out) / "transcripts.txt").open("w", encoding="utf-8")
    try:
        for ex, r, h in zip(examples, refs, hyps):
            r_s = [t for t in r if t != eos]
            h_s = [t for t in h if t != eos]
            print(f"{ex.id}\t{edit_distance(r_s, h_s)}\t{len(r_s)}")
            if dump is not None:
                dump.write(f"REF: {_fmt(r_s)}\nHYP: {_fmt(h_s)}\n")
    finally:
        if dump is not None:
            dump.close()
    print(f"LER {ler:.6f}")
    return 0


def cmd_trace(args) -> int:
    ckpt, examples = _checkpoint_and_data(args)
    seed = 0 if args.seed is None else args.seed
    rc = RewardConfig("entropy", 0.0)
    rollouts = []
    if examples:
        rngs = [Rng.derive(seed, "trace", ex.id) for ex in examples]
        rollouts = run_batch(ckpt.params, examples, rc, rngs).rollouts()
    for r in rollouts:
        print(f"{r.example_id}\t{render_trace(r, args.group)}")
    if args.probs:
        fh = sys.stdout if not args.out else _open_out(args.out, "probs.csv")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["example_id", "step", "b", "decision"])
        for r in rollouts:
            for i, (b, d) in enumerate(zip(r.emit_prob, r.decision)):
                writer.writerow([r.example_id, i, repr(float(b)), int(d)])
        if fh is not sys.stdout:
            fh.close()
    return 0


def _open_out(out_dir, name):
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    return (Path(out_dir) / name).open("w", encoding="utf-8", newline="")


def cmd_gradcheck(args) -> int:
    result = run_gradcheck(hidden=args.hidden, t1=args.t1, t2=args.t2, vocab=args.vocab,
                           seed=0 if args.seed is None else args.seed)
    print(result.report())
    if not result.passed:
        log.error("gradcheck failed: max relative error above %g", GRADCHECK_TOL)
        return 2
    return 0


def cmd_varlab(args) -> int:
    rows, totals = run_varlab(args.samples, 0 if args.seed is None else args.seed)
    fh = sys.stdout if not args.out else _open_out(args.out, "varlab.csv")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["variant", "coord", "mean", "variance", "bias"])
    for v, coord, mean, var, bias in rows:
        writer.writerow([v, coord, repr(mean), repr(var), repr(bias)])
    if fh is not sys.stdout:
        fh.close()
    for v, t in totals.items():
        log.info("total variance %-24s %.6g", v, t)
    return 0


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config, {"task.seed": args.seed, "task.vocab_size": args.vocab})
    spec = cfg.task_spec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", cfg["task.train_size"]), ("eval", cfg["task.eval_size"])):
        write_dataset(gen_dataset(spec, n, split), out / f"{split}.jsonl")
    meta = {k: v for k, v in cfg.values.items() if k.startswith("task.")}
    (out / "task.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {out / 'train.jsonl'} and {out / 'eval.jsonl'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="osq", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model; writes config.json, log.jsonl, ckpt-*.osq")
    t.add_argument("--config", metavar="PATH")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--dataset", metavar="PATH", help="training set (JSONL); overrides data.train")
    t.add_argument("--out", metavar="DIR", default="run")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy-decode a dataset and print per-example distances and LER")
    e.add_argument("--checkpoint", metavar="PATH")
    e.add_argument("--dataset", metavar="PATH")
    e.add_argument("--out", metavar="DIR", help="write REF:/HYP: transcripts here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("trace", help="render sampled emission traces, one line per example")
    r.add_argument("--checkpoint", metavar="PATH")
    r.add_argument("--dataset", metavar="PATH")
    r.add_argument("--group", type=int, default=3)
    r.add_argument("--probs", action="store_true", help="also write per-step CSV example_id,step,b,decision")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", metavar="DIR", help="write probs.csv here instead of stdout")
    r.set_defaults(func=cmd_trace)

    g = sub.add_parser("gradcheck", help="enumerated estimator expectations vs finite differences")
    g.add_argument("--hidden", type=int, default=2)
    g.add_argument("--t1", type=int, default=6)
    g.add_argument("--t2", type=int, default=3)
    g.add_argument("--vocab", type=int, default=3)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gradcheck)

    v = sub.add_parser("varlab", help="per-coordinate estimator variance and bias as CSV")
    v.add_argument("--samples", type=int, default=10000)
    v.add_argument("--seed", type=int)
    v.add_argument("--out", metavar="DIR", help="write varlab.csv here instead of stdout")
    v.set_defaults(func=cmd_varlab)

    d = sub.add_parser("gen-data", help="write train.jsonl and eval.jsonl for a synthetic task")
    d.add_argument("--config", metavar="PATH")
    d.add_argument("--seed", type=int)
    d.add_argument("--vocab", type=int)
    d.add_argument("--out", metavar="DIR", default="data")
    d.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        return args.func(args)
    except (ConfigError, UndefinedRateError, CapacityError, InputError, ShapeError,
            FormatError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
