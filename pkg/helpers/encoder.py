"""
Tiny Vision-Transformer representation function.

Images are cut into non-overlapping patches, embedded, prefixed with a class token and run through
pre-norm transformer blocks. The class and patch tokens of the last four blocks form the grid
representation: per block every patch token gets the class token appended channelwise, and the four
blocks are concatenated along channels.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from helpers import diffmath as dm
from helpers.diffmath import Parameter, Tensor
from helpers.errors import ContractViolation
from helpers.layers import LayerNorm, Linear, Module, trunc_normal
from triplane_data_classes import EncoderConfig


@dataclass
class FeatureMap:
    """
    grid: (B, g, g, D); pooled: (B, D), the mean of the grid over positions
    """
    grid: Tensor
    pooled: Tensor


class SelfAttention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.qkv = Linear(width, 3 * width, rng)
        self.proj = Linear(width, width, rng)

    def forward(self, x: Tensor) -> Tensor:
        batch, tokens, width = x.shape
        head_dim = width // self.heads
        qkv = dm.reshape(self.qkv(x), (batch, tokens, 3, self.heads, head_dim))
        qkv = dm.transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ dm.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(head_dim))
        attended = dm.softmax(scores) @ v
        merged = dm.reshape(dm.transpose(attended, (0, 2, 1, 3)), (batch, tokens, width))
        return self.proj(merged)


class TransformerBlock(Module):
    def __init__(self, width: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(width)
        self.attn = SelfAttention(width, heads, rng)
        self.norm2 = LayerNorm(width)
        self.fc1 = Linear(width, mlp_ratio * width, rng)
        self.fc2 = Linear(mlp_ratio * width, width, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(dm.gelu(self.fc1(self.norm2(x))))


class Encoder(Module):
    """
    Maps images (B, S, S, 3) in [0, 1] to a FeatureMap
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        patch_dim = config.patch_size * config.patch_size * 3
        tokens = config.grid_size * config.grid_size + 1
        self.patch_embed = Linear(patch_dim, config.width, rng)
        self.cls_token = Parameter(trunc_normal(rng, (1, 1, config.width)))
        self.pos_embed = Parameter(trunc_normal(rng, (1, tokens, config.width)))
        self.blocks = [TransformerBlock(config.width, config.heads, config.mlp_ratio, rng)
                       for _ in range(config.depth)]
        # output norms of the tapped blocks, the last learned map before the grid
        self.tap_norms = [LayerNorm(config.width) for _ in range(EncoderConfig.TAPPED_LAYERS)]

    def patchify(self, images: Tensor) -> Tensor:
        batch = images.shape[0]
        g, p = self.config.grid_size, self.config.patch_size
        x = dm.reshape(images, (batch, g, p, g, p, 3))
        x = dm.transpose(x, (0, 1, 3, 2, 4, 5))
        return dm.reshape(x, (batch, g * g, p * p * 3))

    def forward(self, images) -> FeatureMap:
        images = dm.as_tensor(images)
        size = self.config.image_size
        if images.ndim == 3:
            images = dm.reshape(images, (1,) + images.shape)
        if images.ndim != 4 or images.shape[1:] != (size, size, 3):
            raise ContractViolation(f"encoder expects images of shape (B, {size}, {size}, 3), got {images.shape}")
        batch = images.shape[0]
        g, width = self.config.grid_size, self.config.width

        x = self.patch_embed(self.patchify(images))
        cls = dm.expand(self.cls_token, (batch, 1, width))
        x = dm.concat([cls, x], axis=1) + self.pos_embed

        first_tap = self.config.depth - EncoderConfig.TAPPED_LAYERS
        taps: List[Tensor] = []
        for index, block in enumerate(self.blocks):
            x = block(x)
            if index >= first_tap:
                tokens = self.tap_norms[index - first_tap](x)
                patch_tokens = tokens[:, 1:, :]
                cls_tokens = dm.expand(tokens[:, 0:1, :], (batch, g * g, width))
                taps.append(dm.concat([patch_tokens, cls_tokens], axis=-1))

        merged = dm.concat(taps, axis=-1)
        grid = dm.reshape(merged, (batch, g, g, self.config.feature_dim))
        pooled = dm.mean(merged, axis=1)
        return FeatureMap(grid=grid, pooled=pooled)

    def zero_output_projection(self, rng: Optional[np.random.Generator] = None) -> None:
        """
        Zeroes the scale of the tapped output norms so the grid equals their shifts
        """
        for norm in self.tap_norms:
            norm.gamma.data[...] = 0.0
            if rng is not None:
                norm.beta.data[...] = rng.normal(size=norm.beta.shape)


def encode(encoder: Encoder, image) -> FeatureMap:
    """
    Runs the representation function on one image (S, S, 3) or a batch (B, S, S, 3)
    """
    return encoder(image)
