"""Small module system on top of :mod:`courant.tensor`.

Parameters are discovered by walking instance attributes in definition
order, so the parameter manifest of a model is stable across runs and
doubles as the checkpoint layout.
"""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A named leaf tensor owned by a module.

    ``trainable=False`` turns it into a buffer: persisted in checkpoints,
    listed in the manifest, never updated by the optimizer.
    """

    __slots__ = ("trainable",)

    def __init__(self, data, trainable: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.trainable = trainable


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{k}", item

    def parameters(self, trainable_only: bool = True) -> list[Parameter]:
        return [p for _, p in self.named_parameters() if p.trainable or not trainable_only]

    def zero_grad(self) -> None:
        for p in self.parameters(trainable_only=False):
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as (in, out)."""

    def __init__(
        self,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        bias: bool = True,
        zero: bool = False,
    ):
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(max(d_in, 1)), size=(d_in, d_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def __call__(self, x) -> Tensor:
        return T.layernorm(x, self.gain, self.bias)


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(
        self,
        d_in: int,
        d_hidden: int,
        d_out: int,
        rng: np.random.Generator,
        zero_last: bool = False,
    ):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero=zero_last)

    def __call__(self, x) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads of width ``d // heads``.

    ``bias`` (queries x keys) is added to the logits of every head.
    Returns the projected output and the (heads, queries, keys) weights.
    """

    def __init__(self, d_q: int, d_kv: int, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"latent width {d} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d_q, d, rng)
        self.k = Linear(d_kv, d, rng)
        self.v = Linear(d_kv, d, rng)
        self.o = Linear(d, d, rng)

    def split(self, x: Tensor) -> Tensor:
        n, d = x.shape
        return x.reshape(n, self.heads, d // self.heads).transpose(1, 0, 2)

    def __call__(self, xq, xkv, bias=None) -> tuple[Tensor, Tensor]:
        q = self.split(self.q(xq))
        k = self.split(self.k(xkv))
        v = self.split(self.v(xkv))
        dh = q.shape[-1]
        logits = T.matmul(q, k.transpose(0, 2, 1)) * (1.0 / math.sqrt(dh))
        if bias is not None:
            logits = logits + bias
        w = T.softmax(logits, axis=-1)
        heads_out = T.matmul(w, v)
        h, n, _ = heads_out.shape
        merged = heads_out.transpose(1, 0, 2).reshape(n, h * dh)
        return self.o(merged), w
