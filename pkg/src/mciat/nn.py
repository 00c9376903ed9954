"""Small layer library on top of :mod:`mciat.autograd`."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(dtype)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            if missing:
                raise KeyError(f"missing parameters: {missing}")
        for name, arr in state.items():
            if name not in own:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            if own[name].shape != tuple(arr.shape):
                raise ValueError(
                    f"parameter {name!r}: checkpoint shape {tuple(arr.shape)} != model shape {own[name].shape}"
                )
            own[name].data[...] = arr


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float32, bias: bool = True, std: float = 0.02):
        self.weight = parameter(trunc_normal(rng, (d_in, d_out), std, dtype))
        self.bias = parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return y if self.bias is None else ag.add(y, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.gain = parameter(np.ones(dim, dtype=dtype))
        self.bias = parameter(np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.add(ag.mul(ag.layer_norm(x), self.gain), self.bias)


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng, dtype=np.float32, std: float = 0.02):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype, std=std)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype, std=std)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


@dataclass
class AttentionMaps:
    """Diagnostics of one attention layer for a batch.

    ``scores`` is the head-averaged scaled dot-product matrix before softmax,
    shape (B, n, n); ``weights`` holds the per-head softmax maps, (B, H, n, n).
    """

    scores: np.ndarray
    weights: np.ndarray


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng, dtype=np.float32, std: float = 0.02):
        if dim % heads:
            raise ValueError(f"hidden size {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype, bias=False, std=std)
        self.k = Linear(dim, dim, rng, dtype, bias=False, std=std)
        self.v = Linear(dim, dim, rng, dtype, bias=False, std=std)
        self.proj = Linear(dim, dim, rng, dtype, std=std)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return ag.transpose(ag.reshape(x, (b, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, collect: bool = False):
        b, n, d = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scale = (d // self.heads) ** -0.5
        scores = ag.matmul(ag.mul(q, scale), ag.transpose(k))
        weights = ag.softmax(scores, axis=-1)
        ctx = ag.reshape(ag.transpose(ag.matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
        maps = AttentionMaps(scores.data.mean(axis=1), weights.data.copy()) if collect else None
        return self.proj(ctx), maps


class Block(Module):
    """Pre-norm transformer block: x + MSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng, dtype=np.float32, std: float = 0.02):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, heads, rng, dtype, std)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, dim * mlp_ratio, dim, rng, dtype, std)

    def __call__(self, x: Tensor, collect: bool = False):
        if x.ndim != 3:
            raise ag.ShapeError(f"block expects (batch, tokens, dim), got {x.shape}")
        a, maps = self.attn(self.norm1(x), collect)
        x = ag.add(x, a)
        x = ag.add(x, self.mlp(self.norm2(x)))
        return x, maps
