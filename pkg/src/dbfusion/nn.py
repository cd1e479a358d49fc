"""Layers built on the tensor core: linear maps, layer norm, attention blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

MASKED = -1e9


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{k}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        std = d_in ** -0.5 if std is None else std
        self.weight = Parameter(rng.standard_normal((d_in, d_out)) * std)
        self.bias = Parameter(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 out_std: float | None = None):
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, std=out_std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Attention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, out_std: float | None = None):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng, std=out_std)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        # x: (B, S, d); mask: additive (S, S)
        B, S, d = x.shape
        h, dh = self.heads, d // self.heads

        def split(t):
            return t.reshape(B, S, h, dh).transpose(0, 2, 1, 3)

        ctx = T.attention(split(self.q(x)), split(self.k(x)), split(self.v(x)), mask)
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(B, S, d))


class Block(Module):
    """Pre-norm transformer block: ``x + attn(ln(x))`` then ``x + mlp(ln(x))``."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2,
                 n_layers: int = 1):
        out_std = (d * 2 * n_layers) ** -0.5
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng, out_std=out_std)
        self.ln2 = LayerNorm(d)
        self.mlp = MLP(d, mlp_ratio * d, d, rng, out_std=(mlp_ratio * d * 2 * n_layers) ** -0.5)

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


def prefix_causal_mask(prefix: int, total: int) -> np.ndarray:
    """Additive mask: the first ``prefix`` rows see each other, the rest are causal."""
    i = np.arange(total)[:, None]
    j = np.arange(total)[None, :]
    allowed = (j < prefix) | (j <= i)
    return np.where(allowed, 0.0, MASKED)


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
