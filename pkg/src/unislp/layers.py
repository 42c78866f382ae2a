"""Parameter containers and the transformer building blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

NEG_INF = -1e30


class Module:
    """Walks attributes in definition order to give hierarchical parameter names."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]


def _walk(value, path: str):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")
    elif isinstance(value, dict):
        for k, item in value.items():
            yield from _walk(item, f"{path}.{k}")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, init: str = "xavier"):
        if init == "xavier":
            w = xavier_uniform(rng, d_in, d_out)
        elif init == "zeros":
            w = np.zeros((d_in, d_out))
        elif init == "identity":
            if d_in != d_out:
                raise ValueError("identity init needs a square weight")
            w = np.eye(d_in)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self._eps)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.o = Linear(d_model, d_model, rng)
        self._h = n_heads
        self._dh = d_model // n_heads

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self._h, self._dh).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, memory: Tensor, mask: np.ndarray | None) -> Tensor:
        """``mask`` is boolean, True where attention is blocked; broadcastable to [B, H, Tq, Tk]."""
        b, tq, d = x.shape
        q = self._split(self.q(x))
        k = self.k(memory).reshape(b, memory.shape[1], self._h, self._dh).transpose(0, 2, 3, 1)
        v = self._split(self.v(memory))
        scores = (q @ k) * (1.0 / math.sqrt(self._dh))
        if mask is not None:
            scores = T.masked_fill(scores, mask, NEG_INF)
        ctx = T.softmax(scores, axis=-1) @ v
        return self.o(ctx.transpose(0, 2, 1, 3).reshape(b, tq, d))


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, rng: np.random.Generator):
        self.fc1 = Linear(d_model, d_ff, rng)
        self.fc2 = Linear(d_ff, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))
