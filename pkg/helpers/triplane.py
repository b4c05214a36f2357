from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from helpers import diffmath as dm
from helpers.diffmath import Parameter, Tensor
from helpers.encoder import FeatureMap
from helpers.errors import ContractViolation
from helpers.layers import Conv3x3, LayerNorm, Linear, Module, trunc_normal
from triplane_data_classes import TriplaneConfig

# (first, second) coordinate read by the XY, XZ and YZ planes
PLANE_AXES = ((0, 1), (0, 2), (1, 2))


@dataclass
class Triplane:
    """
    Three axis-aligned feature planes stacked as (..., 3, R, R, C) in XY, XZ, YZ order
    """
    planes: Tensor

    @property
    def resolution(self) -> int:
        return self.planes.shape[-2]

    @property
    def channels(self) -> int:
        return self.planes.shape[-1]

    def __getitem__(self, index) -> Triplane:
        return Triplane(self.planes[index])


class CrossAttention(Module):
    """
    Multi-head attention of a query set onto a token set
    """

    def __init__(self, query_dim: int, token_dim: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(query_dim, query_dim, rng)
        self.k = Linear(token_dim, query_dim, rng)
        self.v = Linear(token_dim, query_dim, rng)
        self.out = Linear(query_dim, query_dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        batch, count, width = x.shape
        return dm.transpose(dm.reshape(x, (batch, count, self.heads, width // self.heads)), (0, 2, 1, 3))

    def attend(self, queries: Tensor, tokens: Tensor) -> Tensor:
        """
        @param queries: (B, Q, E)
        @param tokens: (B, T, D)
        @return: (B, Q, E), the attention-weighted value projections with heads merged
        """
        batch, count, width = queries.shape
        q, k, v = self._split(self.q(queries)), self._split(self.k(tokens)), self._split(self.v(tokens))
        scores = (q @ dm.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(width // self.heads))
        attended = dm.softmax(scores) @ v
        return dm.reshape(dm.transpose(attended, (0, 2, 1, 3)), (batch, count, width))

    def forward(self, queries: Tensor, tokens: Tensor) -> Tensor:
        return self.out(self.attend(queries, tokens))


class TriplaneDecoder(Module):
    """
    Cross-attends learned low-resolution plane embeddings onto the image grid, then grows the planes
    with (2x bilinear upsample, 3x3 conv, GELU) blocks up to the plane resolution
    """

    def __init__(self, config: TriplaneConfig, feature_dim: int, rng: np.random.Generator):
        config.validate()
        self.config = config
        r, width = config.embedding_resolution, config.embedding_dim
        self.embeddings = Parameter(trunc_normal(rng, (r * r * 3, width)))
        self.query_norm = LayerNorm(width)
        self.token_norm = LayerNorm(feature_dim)
        self.cross_attention = CrossAttention(width, feature_dim, config.heads, rng)
        self.up_convs = [Conv3x3(width if i == 0 else config.channels, config.channels, rng)
                         for i in range(config.upsample_blocks)]
        self.out_conv = Conv3x3(config.channels, config.channels, rng)

    def forward(self, features: FeatureMap) -> Triplane:
        grid = features.grid
        if grid.ndim != 4:
            raise ContractViolation(f"decoder expects a (B, g, g, D) grid, got {grid.shape}")
        batch = grid.shape[0]
        r, width = self.config.embedding_resolution, self.config.embedding_dim
        tokens = self.token_norm(dm.reshape(grid, (batch, grid.shape[1] * grid.shape[2], grid.shape[3])))
        xi = dm.expand(dm.reshape(self.embeddings, (1, r * r * 3, width)), (batch, r * r * 3, width))
        x = xi + self.cross_attention(self.query_norm(xi), tokens)
        x = dm.reshape(x, (batch * 3, r, r, width))
        for conv in self.up_convs:
            x = dm.gelu(conv(dm.upsample2x(x)))
        x = self.out_conv(x)
        size = self.config.plane_resolution
        return Triplane(dm.reshape(x, (batch, 3, size, size, self.config.channels)))


def decode(decoder: TriplaneDecoder, features: FeatureMap) -> Triplane:
    return decoder(features)


def project(points: Tensor) -> Tensor:
    """
    Drops the orthogonal coordinate per plane
    @param points: (..., N, 3)
    @return: (..., 3, N, 2)
    """
    axes = [dm.concat([points[..., a:a + 1], points[..., b:b + 1]], axis=-1) for a, b in PLANE_AXES]
    return dm.stack(axes, axis=-3)


def query_features(triplane: Triplane, points) -> Tensor:
    """
    Samples the three planes at the projections of points and sums the results
    @param triplane: planes (..., 3, R, R, C)
    @param points: (..., N, 3) with the same leading shape
    @return: (..., N, C)
    """
    points = dm.as_tensor(points)
    if points.shape[-1] != 3:
        raise ContractViolation(f"points must have 3 coordinates, got shape {points.shape}")
    sampled = dm.bilinear_sample(triplane.planes, project(points))
    return dm.sum_(sampled, axis=-3)
