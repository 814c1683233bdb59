"""Synthetic monotonic transduction tasks, frame stacking and error-rate scoring."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .episode import Example, InputError
from .numerics import Rng

EOS = 0


@dataclass(frozen=True)
class TaskSpec:
    """Generator settings.

    ``vocab_size`` counts EOS (0) and BOS (``vocab_size - 1``); symbols are
    ``1 .. vocab_size - 2``.  Inputs are one-hot frames of width ``vocab_size``.
    ``run_range`` is the stretch factor range for ``stretch_copy`` and the
    blank-run range for ``blank_interleave``.
    """
    kind: str = "stretch_copy"
    vocab_size: int = 8
    min_len: int = 5
    max_len: int = 10
    run_range: tuple[int, int] = (1, 3)
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("stretch_copy", "blank_interleave"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must leave at least one symbol besides EOS and BOS")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        lo, hi = self.run_range
        if hi < lo or lo < (1 if self.kind == "stretch_copy" else 0):
            raise ValueError(f"bad run_range {self.run_range} for {self.kind}")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")

    @property
    def input_dim(self) -> int:
        return self.vocab_size

    @property
    def num_symbols(self) -> int:
        return self.vocab_size - 2


def _draw_symbols(spec: TaskSpec, rng: Rng) -> list[int]:
    n = int(rng.integers(spec.min_len, spec.max_len))
    out: list[int] = []
    for _ in range(n):
        # no immediate repeats: a run of identical frames would be ambiguous
        choices = [s for s in range(1, spec.num_symbols + 1) if not out or s != out[-1]]
        if not choices:
            choices = [1]
        out.append(choices[int(rng.integers(0, len(choices) - 1))])
    return out


def gen_example(spec: TaskSpec, rng: Rng, example_id: str = "", runs: Sequence[int] | None = None) -> Example:
    """Draw one example.

    ``stretch_copy`` repeats each symbol's one-hot frame ``k`` times;
    ``blank_interleave`` shows each symbol once, followed by ``k`` blank frames.
    Both end with a single EOS frame.  ``runs`` pins the per-symbol ``k``
    values (the symbols are still drawn from ``rng``).
    """
    symbols = _draw_symbols(spec, rng)
    lo, hi = spec.run_range
    if runs is None:
        runs = [int(rng.integers(lo, hi)) for _ in symbols]
    elif len(runs) != len(symbols):
        raise InputError("runs must have one entry per symbol")
    frames: list[np.ndarray] = []
    onsets = []
    V = spec.vocab_size
    for s, k in zip(symbols, runs):
        onsets.append(len(frames))
        one = np.zeros(V)
        one[s] = 1.0
        if spec.kind == "stretch_copy":
            frames.extend([one] * k)
        else:
            frames.append(one)
            frames.extend([np.zeros(V)] * k)
    onsets.append(len(frames))
    eos = np.zeros(V)
    eos[EOS] = 1.0
    frames.append(eos)
    x = np.array(frames)
    if spec.noise > 0:
        x = x + rng.normal(x.shape, spec.noise)
    return Example(inputs=x, targets=tuple(symbols) + (EOS,), id=example_id,
                   meta={"onsets": onsets, "runs": list(runs)})


def gen_dataset(spec: TaskSpec, n: int, split: str = "train") -> list[Example]:
    """``n`` examples; example ``j`` depends only on (spec.seed, split, j)."""
    return [gen_example(spec, Rng.derive(spec.seed, split, j), f"{split}-{j}") for j in range(n)]


def stack_frames(inputs: np.ndarray, k: int) -> np.ndarray:
    """Concatenate non-overlapping groups of ``k`` frames; the last group is zero-padded."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(inputs, dtype=np.float64)
    T, D = x.shape
    n = -(-T // k)
    padded = np.zeros((n * k, D))
    padded[:T] = x
    return padded.reshape(n, k * D)


def unstack_frames(stacked: np.ndarray, k: int) -> np.ndarray:
    s = np.asarray(stacked)
    return s.reshape(s.shape[0] * k, s.shape[1] // k)


def stack_example(ex: Example, k: int) -> Example:
    return Example(stack_frames(ex.inputs, k), ex.targets, ex.id, dict(ex.meta))


class CollapseMap:
    """Total map from raw label ids onto scored label ids."""

    def __init__(self, mapping: Mapping[int, int]):
        self.mapping = {int(k): int(v) for k, v in mapping.items()}

    @classmethod
    def identity(cls, vocab_size: int) -> "CollapseMap":
        return cls({i: i for i in range(vocab_size)})

    def scored_labels(self) -> set[int]:
        return set(self.mapping.values())


def collapse_labels(seq: Iterable[int], cmap: CollapseMap | Mapping[int, int]) -> list[int]:
    m = cmap.mapping if isinstance(cmap, CollapseMap) else cmap
    out = []
    for t in seq:
        if t not in m:
            raise InputError(f"token {t} not in collapse map")
        out.append(m[t])
    return out


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Unit-cost Levenshtein distance, two-row dynamic program."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


class UndefinedRateError(ValueError):
    pass


def _strip_eos(seq, eos: int) -> list[int]:
    return [t for t in seq if t != eos]


def label_error_rate(refs: Sequence[Sequence[int]], hyps: Sequence[Sequence[int]],
                     cmap: CollapseMap | None = None, eos: int = EOS) -> float:
    """Total edit distance over total reference length, EOS removed from both sides."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps differ in length")
    dist = total = 0
    for r, h in zip(refs, hyps):
        r, h = _strip_eos(r, eos), _strip_eos(h, eos)
        if cmap is not None:
            r, h = collapse_labels(r, cmap), collapse_labels(h, cmap)
        dist += edit_distance(r, h)
        total += len(r)
    if total == 0:
        raise UndefinedRateError("reference corpus has no scored tokens")
    return dist / total


# dataset files: JSON lines {id, inputs, targets}

def example_to_json(ex: Example) -> str:
    return json.dumps({"id": ex.id, "inputs": ex.inputs.tolist(), "targets": list(ex.targets)})


def write_dataset(examples: Iterable[Example], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(example_to_json(ex) + "\n")


def iter_dataset(path) -> Iterator[Example]:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                yield Example(np.asarray(rec["inputs"], dtype=np.float64).reshape(len(rec["inputs"]), -1),
                              tuple(int(t) for t in rec["targets"]), str(rec["id"]))
            except (KeyError, ValueError, TypeError) as err:
                raise InputError(f"{path}:{lineno}: bad example record ({err})") from err


def read_dataset(path) -> list[Example]:
    return list(iter_dataset(path))


def spec_to_dict(spec: TaskSpec) -> dict:
    d = asdict(spec)
    d["run_range"] = list(spec.run_range)
    return d
