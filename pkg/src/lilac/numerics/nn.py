"""Small layer library on top of :mod:`lilac.numerics.tensor`.

Modules hold parameters as attributes; ``named_parameters`` walks attributes in
definition order so parameter names (and therefore checkpoints) are stable.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...] | None = None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise T.ShapeMismatch(f"{name}: checkpoint {value.shape} vs model {p.shape}")
            p.data = value.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def freeze(module: Module) -> Module:
    """Exclude every parameter of ``module`` from optimisation and checkpoints."""
    for p in module.parameters():
        p.requires_grad = False
    return module


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = parameter(glorot_uniform(rng, d_in, d_out))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class MultiHeadAttention(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int):
        if d_model % n_heads:
            raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q = Linear(rng, d_model, d_model)
        self.k = Linear(rng, d_model, d_model)
        self.v = Linear(rng, d_model, d_model)
        self.o = Linear(rng, d_model, d_model)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return T.transpose(x.reshape(b, n, self.n_heads, d // self.n_heads), (0, 2, 1, 3))

    def __call__(self, x: Tensor, context: Tensor | None = None, causal: bool = False,
                 mask: np.ndarray | None = None) -> Tensor:
        context = x if context is None else context
        b, n, d = x.shape
        if context.shape[0] != b or context.shape[2] != d:
            raise T.ShapeMismatch(f"context {context.shape} incompatible with queries {x.shape}")
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        heads = T.attention(q, k, v, causal=causal, mask=mask)
        merged = T.transpose(heads, (0, 2, 1, 3)).reshape(b, n, d)
        return self.o(merged)


class FeedForward(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, d_hidden: int):
        self.up = Linear(rng, d_model, d_hidden)
        self.down = Linear(rng, d_hidden, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(T.relu(self.up(x)))


class EncoderLayer(Module):
    """Pre-norm bidirectional transformer block."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int, ffn_mult: int = 2):
        self.norm1 = LayerNorm(d_model)
        self.attn = MultiHeadAttention(rng, d_model, n_heads)
        self.norm2 = LayerNorm(d_model)
        self.ffn = FeedForward(rng, d_model, ffn_mult * d_model)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.ffn(self.norm2(x))


class DecoderLayer(Module):
    """Pre-norm block: masked self-attention, cross-attention, feed-forward."""

    def __init__(self, rng: np.random.Generator, d_model: int, n_heads: int, ffn_mult: int = 2):
        self.norm1 = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.norm2 = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, n_heads)
        self.norm3 = LayerNorm(d_model)
        self.ffn = FeedForward(rng, d_model, ffn_mult * d_model)

    def __call__(self, x: Tensor, memory: Tensor, causal: bool = True,
                 mask: np.ndarray | None = None, memory_mask: np.ndarray | None = None) -> Tensor:
        x = x + self.self_attn(self.norm1(x), causal=causal, mask=mask)
        x = x + self.cross_attn(self.norm2(x), context=memory, mask=memory_mask)
        return x + self.ffn(self.norm3(x))


def key_padding_mask(valid: np.ndarray | None) -> np.ndarray | None:
    """(B, Lk) validity flags -> (B, 1, 1, Lk) mask for multi-head attention."""
    if valid is None or valid.all():
        return None
    return valid[:, None, None, :]
