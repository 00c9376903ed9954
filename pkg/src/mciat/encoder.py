"""Shared ViT encoder over 3D patch tokens."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import AttentionMaps, Block, LayerNorm, Linear, Module, parameter, trunc_normal


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    patch_len: int = 216
    n_tokens: int = 150

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"hidden size {self.dim} is not divisible by {self.heads} heads")
        if self.depth < 1:
            raise ValueError("encoder needs at least one block")

    @classmethod
    def full_scale(cls) -> "EncoderConfig":
        # 512 is not divisible by 12, so the head count falls back to 8
        return cls(dim=512, depth=8, heads=8, mlp_ratio=4, patch_len=30**3, n_tokens=150)


@dataclass
class Encoded:
    """Per-block token snapshots, optional attention maps and the normed output."""

    layers: list[Tensor]
    attention: list[AttentionMaps] | None
    output: Tensor
    extra: dict = field(default_factory=dict)


class ViTEncoder(Module):
    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32, std: float = 0.02):
        self.config = config
        d = config.dim
        self.patch_embed = Linear(config.patch_len, d, rng, dtype, std=std)
        self.pos_embed = parameter(trunc_normal(rng, (config.n_tokens, d), std, dtype))
        self.blocks = [Block(d, config.heads, config.mlp_ratio, rng, dtype, std) for _ in range(config.depth)]
        self.norm = LayerNorm(d, dtype)

    def embed(self, patches, positions) -> Tensor:
        """Project patches to tokens and add the embedding of each original grid position."""
        patches = ag.as_tensor(patches, like=self.pos_embed)
        if patches.shape[-1] != self.config.patch_len:
            raise ag.ShapeError(
                f"patch length {patches.shape[-1]} does not match encoder patch length {self.config.patch_len}"
            )
        positions = np.asarray(positions)
        if positions.shape != patches.shape[:-1]:
            positions = np.broadcast_to(positions, patches.shape[:-1])
        return ag.add(self.patch_embed(patches), ag.gather(self.pos_embed, positions))

    def encode(self, tokens: Tensor, collect: bool = False) -> Encoded:
        if tokens.shape[1] > self.config.n_tokens + 1:
            raise ag.ShapeError(f"{tokens.shape[1]} tokens exceed the encoder limit of {self.config.n_tokens + 1}")
        layers, maps = [], [] if collect else None
        x = tokens
        for block in self.blocks:
            x, m = block(x, collect)
            layers.append(x)
            if collect:
                maps.append(m)
        return Encoded(layers, maps, self.norm(x))

    def __call__(self, patches, positions, collect: bool = False) -> Encoded:
        return self.encode(self.embed(patches, positions), collect)
