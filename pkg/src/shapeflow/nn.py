"""Network building blocks shared by the autoencoder and the velocity net."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .tensor import (Tensor, add, gelu, matmul, reshape, softmax_rows,
                     transpose)


@dataclass
class Linear:
    w: Tensor  # (n_in, n_out)
    b: Tensor  # (n_out,)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)


def linear_init(n_in: int, n_out: int, rng: np.random.Generator,
                zero: bool = False) -> Linear:
    if zero:
        w = np.zeros((n_in, n_out))
    else:
        w = rng.normal(0.0, n_in ** -0.5, size=(n_in, n_out))
    return Linear(Tensor(w, requires_grad=True),
                  Tensor(np.zeros(n_out), requires_grad=True))


@dataclass
class Attention:
    """Multi-head attention; key/value width may differ from query width."""

    wq: Linear
    wk: Linear
    wv: Linear
    wo: Linear
    num_heads: int

    def __call__(self, queries: Tensor, keys_values: Tensor) -> Tensor:
        n = queries.shape[0]
        m = keys_values.shape[0]
        width = self.wq.w.shape[1]
        heads = self.num_heads
        head_dim = width // heads

        q = transpose(reshape(self.wq(queries), (n, heads, head_dim)), (1, 0, 2))
        k = transpose(reshape(self.wk(keys_values), (m, heads, head_dim)), (1, 0, 2))
        v = transpose(reshape(self.wv(keys_values), (m, heads, head_dim)), (1, 0, 2))

        scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(head_dim))
        weights = softmax_rows(scores)          # (heads, n, m)
        mixed = matmul(weights, v)              # (heads, n, head_dim)
        merged = reshape(transpose(mixed, (1, 0, 2)), (n, width))
        return self.wo(merged)


def attention_init(width: int, num_heads: int, rng: np.random.Generator,
                   kv_width: int | None = None) -> Attention:
    if width % num_heads != 0:
        raise ValueError(f"width {width} not divisible by {num_heads} heads")
    kv_width = width if kv_width is None else kv_width
    return Attention(
        wq=linear_init(width, width, rng),
        wk=linear_init(kv_width, width, rng),
        wv=linear_init(kv_width, width, rng),
        wo=linear_init(width, width, rng),
        num_heads=num_heads,
    )


@dataclass
class FeedForward:
    """Two-layer MLP with GELU, hidden width a multiple of the input width."""

    fc1: Linear
    fc2: Linear

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


def feed_forward_init(width: int, rng: np.random.Generator,
                      mult: int = 4) -> FeedForward:
    return FeedForward(linear_init(width, width * mult, rng),
                       linear_init(width * mult, width, rng))


def named_parameters(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Walk dataclasses / lists / dicts, yielding dotted-name Tensor leaves."""
    if isinstance(obj, Tensor):
        yield prefix or "param", obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from named_parameters(child, name)
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            yield from named_parameters(child, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, child in obj.items():
            yield from named_parameters(child, f"{prefix}.{key}" if prefix else str(key))
    # scalars / config fields are not parameters


def parameter_list(obj) -> list[Tensor]:
    return [t for _, t in named_parameters(obj)]


def load_parameters(obj, arrays: dict[str, np.ndarray], prefix: str = ""):
    """Copy checkpoint arrays into an existing parameter structure."""
    for name, tensor in named_parameters(obj, prefix):
        if name not in arrays:
            raise KeyError(f"checkpoint missing parameter {name!r}")
        arr = arrays[name]
        if arr.shape != tensor.data.shape:
            raise ValueError(
                f"checkpoint parameter {name!r} has shape {arr.shape}, "
                f"expected {tensor.data.shape}")
        tensor.data = arr.astype(tensor.data.dtype)
