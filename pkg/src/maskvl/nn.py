"""Parameter containers and transformer building blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import LN_EPS, Tensor, gelu, layer_norm, matmul, softmax

# Additive attention bias for ignored keys; exp() of it underflows to exactly 0.
NEG_INF = -1e9


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every value lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    """Walks attributes to find parameters and submodules by dotted name."""

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

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used by the float64 gradient oracle)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = param(rng.uniform(-bound, bound, size=(d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        # one 2-D GEMM instead of a broadcast batch of small ones
        y = matmul(x.reshape(-1, x.shape[-1]), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(*lead, y.shape[-1])


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = LN_EPS):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Attention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.last_weights: np.ndarray | None = None

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None, keep_weights: bool = False) -> Tensor:
        B, S, d = x.shape
        h = self.heads
        dh = d // h
        qkv = self.qkv(x).reshape(B, S, 3, h, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        if key_bias is not None:
            scores = scores + Tensor(key_bias[:, None, None, :].astype(x.dtype))
        weights = softmax(scores, axis=-1)
        if keep_weights:
            self.last_weights = weights.data
        out = matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, S, d)
        return self.proj(out)


class Mlp(Module):
    def __init__(self, d: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, d: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng)
        self.norm2 = LayerNorm(d)
        self.mlp = Mlp(d, mlp_ratio * d, d, rng)

    def __call__(self, x: Tensor, key_bias: np.ndarray | None = None, keep_weights: bool = False) -> Tensor:
        x = x + self.attn(self.norm1(x), key_bias, keep_weights)
        return x + self.mlp(self.norm2(x))


def block_param_count(d: int, mlp_ratio: int) -> int:
    """Closed form for one :class:`Block`: (4 + 2r) d^2 + (9 + r) d."""
    return (4 + 2 * mlp_ratio) * d * d + (9 + mlp_ratio) * d
