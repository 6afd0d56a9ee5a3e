"""Network building blocks: embeddings, LSTM cells, MLPs and pooling."""

from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

ACTIVATIONS = {
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "softplus": T.softplus,
    "linear": None,
}


class Module:
    """Parameter container; child modules and parameters are found by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters().values():
            p.data = np.ascontiguousarray(p.data.astype(dtype))
            p.zero_grad()
        return self

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


def param(rng: np.random.Generator, shape: Sequence[int], std: float) -> Tensor:
    data = (rng.standard_normal(tuple(shape)) * std).astype(T.get_default_dtype())
    return Tensor(data, requires_grad=True)


def zeros_param(shape: Sequence[int]) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=T.get_default_dtype()), requires_grad=True)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        self.vocab_size = vocab_size
        self.dim = dim
        self.weight = param(rng, (vocab_size, dim), std)

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, std: float = 0.02):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = param(rng, (in_dim, out_dim), std)
        self.bias = zeros_param((out_dim,))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise ShapeError("linear", x.shape, self.weight.shape)
        if x.ndim == 2:
            return T.matmul(x, self.weight) + self.bias
        lead = x.shape[:-1]
        flat = T.reshape(x, (-1, self.in_dim))
        return T.reshape(T.matmul(flat, self.weight) + self.bias, (*lead, self.out_dim))


class MLP(Module):
    """Stack of affine layers, each followed by its named activation.

    ``dims`` lists the input size followed by every layer's output size;
    ``activations`` has one entry per layer (``"linear"`` for none).
    """

    def __init__(self, dims: Sequence[int], activations: Sequence[str], rng: np.random.Generator,
                 std: float = 0.02):
        if len(activations) != len(dims) - 1:
            raise ValueError("need exactly one activation per layer")
        for act in activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        self.dims = list(dims)
        self.activations = list(activations)
        self.layers = [Linear(dims[i], dims[i + 1], rng, std) for i in range(len(dims) - 1)]

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self, x)


def mlp_forward(mlp: MLP, x: Tensor) -> Tensor:
    for layer, act in zip(mlp.layers, mlp.activations):
        x = layer(x)
        fn = ACTIVATIONS[act]
        if fn is not None:
            x = fn(x)
    return x


class LSTMCell(Module):
    """Single-layer LSTM; gate blocks are ordered input, forget, candidate, output."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator, std: float = 0.02,
                 forget_bias: float = 1.0):
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        self.weight = param(rng, (input_dim + hidden_dim, 4 * hidden_dim), std)
        bias = np.zeros(4 * hidden_dim, dtype=T.get_default_dtype())
        bias[hidden_dim:2 * hidden_dim] = forget_bias
        self.bias = Tensor(bias, requires_grad=True)

    def initial_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden_dim), dtype=self.weight.data.dtype)
        return Tensor(z), Tensor(z.copy())

    def __call__(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h, c = state
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError("lstm_step", x.shape, (x.shape[0], self.input_dim))
        if h.shape != (x.shape[0], self.hidden_dim) or c.shape != h.shape:
            raise ShapeError("lstm_step", h.shape, (x.shape[0], self.hidden_dim))
        H = self.hidden_dim
        gates = T.matmul(T.concat([x, h], axis=1), self.weight) + self.bias
        i = T.sigmoid(gates[:, :H])
        f = T.sigmoid(gates[:, H:2 * H])
        g = T.tanh(gates[:, 2 * H:3 * H])
        o = T.sigmoid(gates[:, 3 * H:])
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        return h_new, c_new


def lstm_encode(cell: LSTMCell, inputs: Tensor | Sequence[Tensor]) -> list[Tensor]:
    """Run ``cell`` from a zero state; ``inputs`` is ``[B, L, D]`` or a list of ``[B, D]``.

    Returns the hidden state after every step.
    """
    if isinstance(inputs, Tensor):
        if inputs.ndim != 3:
            raise ShapeError("lstm_encode", inputs.shape)
        steps = [inputs[:, t, :] for t in range(inputs.shape[1])]
    else:
        steps = list(inputs)
    if not steps:
        raise ValueError("lstm_encode needs a non-empty sequence")
    state = cell.initial_state(steps[0].shape[0])
    out = []
    for x in steps:
        state = cell(x, state)
        out.append(state[0])
    return out


def mean_pool(states: Sequence[Tensor], mask: np.ndarray | None = None) -> Tensor:
    """Average of per-step states ``[B, H]``; ``mask`` ``[B, L]`` drops padded steps."""
    if len(states) == 0:
        raise ValueError("mean_pool needs at least one state")
    stacked = T.stack(states, axis=1)
    if mask is None:
        return T.mean(stacked, axis=1)
    mask = np.asarray(mask, dtype=stacked.data.dtype)
    lengths = mask.sum(axis=1, keepdims=True)
    if np.any(lengths == 0):
        raise ValueError("mean_pool: a row has no unmasked steps")
    summed = T.sum_(stacked * mask[:, :, None], axis=1)
    return summed * (1.0 / lengths)


def max_pool(states: Sequence[Tensor], mask: np.ndarray | None = None) -> Tensor:
    """Elementwise maximum over steps; padded steps are pushed far below any state."""
    stacked = T.stack(states, axis=1)
    if mask is not None:
        penalty = (1.0 - np.asarray(mask, dtype=stacked.data.dtype)) * -1e4
        stacked = stacked + penalty[:, :, None]
    return T.max_(stacked, axis=1)


class ConditionalDecoder(Module):
    """LSTM decoder fed ``[previous-word embedding; enc]`` at every step."""

    def __init__(self, vocab_size: int, embed_dim: int, enc_dim: int, hidden_dim: int,
                 rng: np.random.Generator, std: float = 0.02):
        self.enc_dim = enc_dim
        self.embed = Embedding(vocab_size, embed_dim, rng, std)
        self.cell = LSTMCell(embed_dim + enc_dim, hidden_dim, rng, std)
        self.out = Linear(hidden_dim, vocab_size, rng, std)

    def step(self, prev_ids, enc: Tensor, state: tuple[Tensor, Tensor]):
        return lstm_decode_step(self, self.embed(prev_ids), enc, state)


def lstm_decode_step(decoder: ConditionalDecoder, prev_embedding: Tensor, enc: Tensor,
                     state: tuple[Tensor, Tensor]) -> tuple[Tensor, tuple[Tensor, Tensor]]:
    """Advance the decoder one step; returns ``(logits [B, V], new_state)``."""
    if enc.ndim != 2 or enc.shape[1] != decoder.enc_dim or enc.shape[0] != prev_embedding.shape[0]:
        raise ShapeError("lstm_decode_step", enc.shape, (prev_embedding.shape[0], decoder.enc_dim))
    state = decoder.cell(T.concat([prev_embedding, enc], axis=1), state)
    return decoder.out(state[0]), state
