"""Stacked LSTM with an emission head and an output head.

Token conventions: index 0 is end-of-sequence, index ``vocab_size - 1`` is
beginning-of-sequence (the two coincide for a one-token vocabulary).  The
first layer reads ``concat(x_i, prev_emit, onehot(prev_token))``; both heads
read the top layer's (dropped-out) hidden vector.

All step functions are batched: state arrays are ``(B, H)`` and inputs are
``(B, D)``.  Gate order inside the fused weight matrices is (i, f, o, g).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .numerics import Rng, gate, log_sigmoid, sigmoid, softmax, log_softmax


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparams:
    num_layers: int
    hidden_size: int
    input_dim: int
    vocab_size: int
    dropout_target: float = 0.0
    init_scale: float = 0.1

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "input_dim", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 <= self.dropout_target < 1.0:
            raise ValueError("dropout_target must lie in [0, 1)")
        if self.init_scale < 0:
            raise ValueError("init_scale must be nonnegative")

    @property
    def eos(self) -> int:
        return 0

    @property
    def bos(self) -> int:
        return self.vocab_size - 1

    def layer_input_width(self, layer: int) -> int:
        if layer == 0:
            return self.input_dim + 1 + self.vocab_size
        return self.hidden_size

    def shapes(self) -> dict[str, tuple[int, ...]]:
        H, V = self.hidden_size, self.vocab_size
        out: dict[str, tuple[int, ...]] = {}
        for l in range(self.num_layers):
            out[f"lstm{l}.W"] = (4 * H, self.layer_input_width(l) + H)
            out[f"lstm{l}.b"] = (4 * H,)
        out["emit.W"] = (H,)
        out["emit.b"] = (1,)
        out["out.W"] = (V, H)
        out["out.b"] = (V,)
        out["baseline.W"] = (H,)
        out["baseline.b"] = (1,)
        return out

    def to_dict(self) -> dict:
        return asdict(self)


# Tensors that receive reward gradients; the baseline head is trained apart.
def policy_names(hyper: Hyperparams) -> list[str]:
    return [n for n in hyper.shapes() if not n.startswith("baseline.")]


class ModelParams:
    """Ordered mapping of tensor name to float64 array, plus the hyperparameters."""

    def __init__(self, hyper: Hyperparams, tensors: dict[str, np.ndarray]):
        shapes = hyper.shapes()
        if list(tensors) != list(shapes):
            missing = set(shapes) ^ set(tensors)
            raise ShapeError(f"tensor set mismatch: {sorted(missing)}" if missing
                             else "tensor order mismatch")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.hyper = hyper
        self.tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def copy(self) -> "ModelParams":
        return ModelParams(self.hyper, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def num_values(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(hyper: Hyperparams, rng: Rng) -> ModelParams:
    """Uniform weights in [-init_scale, init_scale]; zero biases, forget bias 1."""
    H = hyper.hidden_size
    tensors = {}
    for name, shape in hyper.shapes().items():
        if name.endswith(".W"):
            u = rng.gen.uniform(-1.0, 1.0, size=shape)
            tensors[name] = u * hyper.init_scale
        else:
            b = np.zeros(shape)
            if name.startswith("lstm"):
                b[H:2 * H] = 1.0
            tensors[name] = b
    return ModelParams(hyper, tensors)


class LstmState(NamedTuple):
    h: tuple[np.ndarray, ...]
    c: tuple[np.ndarray, ...]


def zero_state(hyper: Hyperparams, batch: int = 1) -> LstmState:
    z = tuple(np.zeros((batch, hyper.hidden_size)) for _ in range(hyper.num_layers))
    return LstmState(z, tuple(a.copy() for a in z))


class LstmCache(NamedTuple):
    xh: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    tanh_c: np.ndarray


def lstm_step(W: np.ndarray, b: np.ndarray, h: np.ndarray, c: np.ndarray, x: np.ndarray):
    """Standard LSTM cell update. Returns ``(h_new, c_new, cache)``."""
    H = h.shape[-1]
    if x.shape[-1] + H != W.shape[1]:
        raise ShapeError(f"lstm input width {x.shape[-1]} does not match weights {W.shape[1] - H}")
    xh = np.concatenate([x, h], axis=-1)
    z = xh @ W.T + b
    ifo = gate(z[..., :3 * H])
    i, f, o = ifo[..., :H], ifo[..., H:2 * H], ifo[..., 2 * H:]
    g = np.tanh(z[..., 3 * H:])
    c_new = f * c + i * g
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c
    return h_new, c_new, LstmCache(xh, c, i, f, o, g, tanh_c)


def lstm_step_backward(W: np.ndarray, cache: LstmCache, dh: np.ndarray, dc: np.ndarray,
                       dW: np.ndarray | None = None, db: np.ndarray | None = None):
    """Backprop one cell step.

    ``dh``/``dc`` are gradients w.r.t. the step's outputs.  Weight gradients
    are accumulated in place into ``dW``/``db`` when given: summed over the
    batch for 2-d ``dW``, kept per example when ``dW`` has a leading batch axis.
    Returns ``(dx, dh_prev, dc_prev)``.
    """
    i, f, o, g, tanh_c = cache.i, cache.f, cache.o, cache.g, cache.tanh_c
    H = i.shape[-1]
    do = dh * tanh_c
    dc_total = dc + dh * o * (1.0 - tanh_c * tanh_c)
    dz = np.concatenate([
        dc_total * g * i * (1.0 - i),
        dc_total * cache.c_prev * f * (1.0 - f),
        do * o * (1.0 - o),
        dc_total * i * (1.0 - g * g),
    ], axis=-1)
    if dW is not None:
        if dW.ndim == 3:
            dW += dz[:, :, None] * cache.xh[:, None, :]
            db += dz
        else:
            dW += dz.T @ cache.xh
            db += dz.sum(axis=0)
    dxh = dz @ W
    n_in = dxh.shape[-1] - H
    return dxh[..., :n_in], dxh[..., n_in:], dc_total * f


def apply_dropout(h: np.ndarray, rate: float, rng: Rng) -> np.ndarray:
    """Inverted dropout; the identity when ``rate == 0`` (no draws consumed)."""
    return h * dropout_mask(np.shape(h), rate, rng)


def dropout_mask(shape, rate: float, rng: Rng) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.gen.random(shape) >= rate
    return keep / (1.0 - rate)


class StepOutputs(NamedTuple):
    emit_logit: np.ndarray   # (B,)
    emit_prob: np.ndarray    # (B,)
    logits: np.ndarray       # (B, V)
    probs: np.ndarray        # (B, V)
    top: np.ndarray          # (B, H) top-layer output after dropout


class StepCache(NamedTuple):
    cells: tuple[LstmCache, ...]
    masks: tuple[np.ndarray, ...] | None
    h_raw: tuple[np.ndarray, ...]
    top: np.ndarray


def feedback_input(hyper: Hyperparams, x: np.ndarray, prev_emit, prev_token) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    B = x.shape[0]
    if x.shape[1] != hyper.input_dim:
        raise ShapeError(f"input width {x.shape[1]} != input_dim {hyper.input_dim}")
    prev_token = np.broadcast_to(np.asarray(prev_token, dtype=np.int64), (B,))
    if np.any(prev_token < 0) or np.any(prev_token >= hyper.vocab_size):
        raise ShapeError("previous token outside vocabulary")
    onehot = np.zeros((B, hyper.vocab_size))
    onehot[np.arange(B), prev_token] = 1.0
    emit = np.broadcast_to(np.asarray(prev_emit, dtype=np.float64), (B,))[:, None]
    return np.concatenate([x, emit, onehot], axis=1)


def step(params: ModelParams, state: LstmState, layer0_input: np.ndarray,
         masks: tuple[np.ndarray, ...] | None = None):
    """Advance every layer one step. Returns ``(StepOutputs, new_state, StepCache)``."""
    hyper = params.hyper
    inp = layer0_input
    hs, cs, cells, raw = [], [], [], []
    for l in range(hyper.num_layers):
        h, c, cache = lstm_step(params[f"lstm{l}.W"], params[f"lstm{l}.b"],
                                state.h[l], state.c[l], inp)
        hs.append(h)
        cs.append(c)
        cells.append(cache)
        raw.append(h)
        inp = h * masks[l] if masks is not None else h
    top = inp
    emit_logit = top @ params["emit.W"] + params["emit.b"][0]
    logits = top @ params["out.W"].T + params["out.b"]
    out = StepOutputs(emit_logit, sigmoid(emit_logit), logits, softmax(logits), top)
    return out, LstmState(tuple(hs), tuple(cs)), StepCache(tuple(cells), masks, tuple(raw), top)


def forward_step(params: ModelParams, state: LstmState, x, prev_emit, prev_token,
                 dropout_rate: float = 0.0, rng: Rng | None = None):
    """Single (possibly batched) model step with feedback inputs.

    Returns ``(StepOutputs, new_state)``; ``state`` is not modified.
    """
    hyper = params.hyper
    inp = feedback_input(hyper, x, prev_emit, prev_token)
    masks = None
    if dropout_rate > 0.0:
        if rng is None:
            raise ValueError("dropout needs an rng")
        masks = tuple(dropout_mask((inp.shape[0], hyper.hidden_size), dropout_rate, rng)
                      for _ in range(hyper.num_layers))
    out, new_state, _ = step(params, state, inp, masks)
    return out, new_state


def step_backward(params: ModelParams, cache: StepCache, d_emit_logit: np.ndarray,
                  d_logits: np.ndarray, dh_next: list, dc_next: list, grads: dict,
                  per_example: bool = False):
    """Backprop one model step, accumulating into ``grads``.

    ``d_emit_logit`` is ``(B,)`` and ``d_logits`` is ``(B, V)``; ``dh_next``
    and ``dc_next`` hold per-layer recurrent gradients and are updated in place
    to the gradients w.r.t. the previous step's state.  With ``per_example``
    every entry of ``grads`` carries a leading batch axis.
    """
    hyper = params.hyper
    top = cache.top
    if per_example:
        grads["emit.W"] += d_emit_logit[:, None] * top
        grads["emit.b"][:, 0] += d_emit_logit
        grads["out.W"] += d_logits[:, :, None] * top[:, None, :]
        grads["out.b"] += d_logits
    else:
        grads["emit.W"] += d_emit_logit @ top
        grads["emit.b"][0] += d_emit_logit.sum()
        grads["out.W"] += d_logits.T @ top
        grads["out.b"] += d_logits.sum(axis=0)
    d_inp = d_emit_logit[:, None] * params["emit.W"][None, :] + d_logits @ params["out.W"]
    for l in reversed(range(hyper.num_layers)):
        dh = dh_next[l] + (d_inp * cache.masks[l] if cache.masks is not None else d_inp)
        dx, dh_next[l], dc_next[l] = lstm_step_backward(
            params[f"lstm{l}.W"], cache.cells[l], dh, dc_next[l],
            grads[f"lstm{l}.W"], grads[f"lstm{l}.b"])
        d_inp = dx


def emission_logprobs(emit_logit: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(log b, log(1 - b))`` computed from the logit without clamping."""
    return log_sigmoid(emit_logit), log_sigmoid(-emit_logit)


__all__ = [
    "Hyperparams", "ModelParams", "LstmState", "ShapeError", "StepOutputs", "StepCache",
    "init_params", "zero_state", "lstm_step", "lstm_step_backward", "apply_dropout",
    "dropout_mask", "forward_step", "step", "step_backward", "feedback_input",
    "policy_names", "emission_logprobs", "log_softmax",
]
