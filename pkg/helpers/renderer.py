"""
Differentiable volume rendering of triplanes under the fixed camera.

Sample positions along a ray are z-depths t in [near, far]. A ray with unit direction d reaches
depth t after travelling t / (d . axis); RayBatch.depth_scale holds that factor, so sample points are
origin + t * depth_scale * d and compositing interval lengths are scaled by it. Expected depth is
reported in the same z-depth units as the scene oracle.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from helpers import diffmath as dm
from helpers.diffmath import Tensor
from helpers.errors import ContractViolation, DatasetError
from helpers.layers import Linear, Module
from helpers.triplane import Triplane, query_features
from triplane_data_classes import Camera

DEPTH_MAGIC = b"TPDM"
DEPTH_HEADER = struct.Struct("<4sIII")


@dataclass
class RayBatch:
    """
    origins, directions: (N, 3); pixels: (N, 2) row/column; depth_scale: (N,) travel per unit z-depth
    """
    origins: np.ndarray
    directions: np.ndarray
    pixels: np.ndarray
    depth_scale: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    def points(self, t: np.ndarray) -> np.ndarray:
        """
        @param t: (N, S) z-depths
        @return: (N, S, 3) world points
        """
        travel = t * self.depth_scale[:, None]
        return self.origins[:, None, :] + travel[..., None] * self.directions[:, None, :]


@dataclass
class FieldSample:
    """
    sigma: (..., S) nonnegative densities; rgb: (..., S, 3) in [0, 1]
    """
    sigma: Tensor
    rgb: Tensor


@dataclass
class Composite:
    color: Tensor
    depth: Tensor
    weights: Tensor
    residual: Tensor


@dataclass
class RenderResult:
    """
    image: (res, res, 3); depth: (res, res); sigma: every density queried in the final pass
    """
    image: Tensor
    depth: Tensor
    sigma: Tensor
    weights: Tensor
    t: np.ndarray


def generate_rays(camera: Camera, resolution: int) -> RayBatch:
    """
    One pinhole ray per pixel, through the pixel center. Row 0 is the top of the image
    """
    if resolution < 2:
        raise ContractViolation(f"resolution must be >= 2, got {resolution}")
    focal = camera.focal_length(resolution)
    cx, cy = camera.principal_point(resolution)
    rows, cols = np.meshgrid(np.arange(resolution), np.arange(resolution), indexing="ij")
    local = np.stack([(cols + 0.5 - cx) / focal, -(rows + 0.5 - cy) / focal, np.ones_like(rows, dtype=float)],
                     axis=-1).reshape(-1, 3)
    local /= np.linalg.norm(local, axis=-1, keepdims=True)
    directions = local @ camera.rotation().T
    axis = camera.rotation()[:, 2]
    origins = np.broadcast_to(camera.position(), directions.shape).copy()
    pixels = np.stack([rows.reshape(-1), cols.reshape(-1)], axis=-1)
    return RayBatch(origins=origins, directions=directions, pixels=pixels,
                    depth_scale=1.0 / (directions @ axis))


def stratified_samples(n_rays: int, count: int, near: float, far: float,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    One draw per equal-width bin of [near, far]. Without rng the draw is the bin midpoint
    @return: (n_rays, count) sorted depths
    """
    if count < 1:
        raise ContractViolation(f"need at least one sample per ray, got {count}")
    width = (far - near) / count
    offsets = np.full((n_rays, count), 0.5) if rng is None else rng.random((n_rays, count))
    return near + (np.arange(count) + offsets) * width


def importance_samples(t_coarse: np.ndarray, weights: np.ndarray, count: int, near: float, far: float,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Inverse-CDF draws from the piecewise-constant density that gives the i-th equal-width bin of
    [near, far] a mass proportional to weights[..., i]. Rays whose weights sum below 1e-8 use uniform
    mass. Without rng the draws are the quantiles (k + 0.5) / count
    @param t_coarse: (N, S) sorted coarse depths, one per bin
    @param weights: (N, S) nonnegative compositing weights of the coarse depths
    @param count: refined samples per ray
    @return: (N, S + count) merged and sorted depths
    """
    weights = np.asarray(weights, dtype=np.float64)
    if count == 0:
        return np.asarray(t_coarse)
    if np.any(weights < 0):
        raise ContractViolation("importance weights must be nonnegative")
    n_rays, bins = weights.shape
    totals = weights.sum(axis=-1, keepdims=True)
    uniform = totals < 1e-8
    pdf = np.where(uniform, 1.0 / bins, weights / np.where(uniform, 1.0, totals))
    cdf = np.cumsum(pdf, axis=-1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(count) + 0.5) / count, (n_rays, count))
    else:
        u = rng.random((n_rays, count))
    index = np.stack([np.searchsorted(cdf[i], u[i], side="right") for i in range(n_rays)])
    index = np.minimum(index, bins - 1)
    below = np.where(index > 0, np.take_along_axis(cdf, np.maximum(index - 1, 0), axis=-1), 0.0)
    mass = np.take_along_axis(pdf, index, axis=-1)
    frac = np.clip((u - below) / np.maximum(mass, 1e-12), 0.0, 1.0)
    width = (far - near) / bins
    refined = near + (index + frac) * width
    return np.sort(np.concatenate([t_coarse, refined.astype(t_coarse.dtype)], axis=-1), axis=-1)


class RadianceMLP(Module):
    """
    Two-layer MLP from triplane features to density and color
    """

    def __init__(self, channels: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(channels, hidden, rng, std=1.0 / np.sqrt(channels))
        self.fc2 = Linear(hidden, 4, rng, std=1.0 / np.sqrt(hidden))

    def forward(self, features: Tensor) -> FieldSample:
        out = self.fc2(dm.softplus(self.fc1(features)))
        sigma = dm.softplus(out[..., 0])
        rgb = dm.sigmoid(out[..., 1:4])
        return FieldSample(sigma=sigma, rgb=rgb)

    def zero_(self) -> None:
        for param in self.parameters():
            param.data[...] = 0.0


def radiance_field(triplane: Triplane, points, mlp: RadianceMLP) -> FieldSample:
    """
    @param triplane: planes (..., 3, R, R, C)
    @param points: (..., N, 3)
    """
    return mlp(query_features(triplane, points))


def composite(t, sigma, rgb, far: float, delta_scale: Optional[np.ndarray] = None) -> Composite:
    """
    Front-to-back alpha compositing over a black background
    @param t: (N, S) sorted sample depths
    @param sigma: (N, S) densities
    @param rgb: (N, S, 3) colors
    @param far: far bound, closes the last interval and completes the depth of unoccluded rays
    @param delta_scale: optional (N,) factor turning depth intervals into travelled distance
    """
    t = np.asarray(t.data if isinstance(t, Tensor) else t)
    sigma, rgb = dm.as_tensor(sigma), dm.as_tensor(rgb)
    if np.any(np.diff(t, axis=-1) < 0):
        raise ContractViolation("composite needs sample depths sorted along each ray")
    delta = np.concatenate([np.diff(t, axis=-1), far - t[..., -1:]], axis=-1)
    if delta_scale is not None:
        delta = delta * np.asarray(delta_scale)[..., None]
    optical = sigma * delta
    transmittance = dm.exp(-dm.exclusive_cumsum(optical))
    alpha = 1.0 - dm.exp(-optical)
    weights = transmittance * alpha
    residual = dm.exp(-dm.sum_(optical, axis=-1))
    color = dm.sum_(dm.reshape(weights, weights.shape + (1,)) * rgb, axis=-2)
    depth = dm.sum_(weights * t, axis=-1) + residual * far
    return Composite(color=color, depth=depth, weights=weights, residual=residual)


def render(triplane: Triplane, camera: Camera, resolution: int, mlp: RadianceMLP, n_coarse: int = 8,
           n_fine: int = 8, rng: Optional[np.random.Generator] = None, rays: Optional[RayBatch] = None) -> RenderResult:
    """
    Coarse stratified pass without gradients, importance resampling, then the differentiable pass on
    the merged depths
    @param triplane: planes (3, R, R, C) of a single scene
    """
    if triplane.planes.ndim != 4:
        raise ContractViolation(f"render takes the planes of one scene, got {triplane.planes.shape}")
    rays = rays if rays is not None else generate_rays(camera, resolution)
    n = len(rays)
    t = stratified_samples(n, n_coarse, camera.near, camera.far, rng)
    if n_fine > 0:
        with dm.no_grad():
            coarse = radiance_field(triplane, rays.points(t).reshape(-1, 3), mlp)
            weights = composite(t, dm.reshape(coarse.sigma, (n, n_coarse)),
                                dm.reshape(coarse.rgb, (n, n_coarse, 3)), camera.far, rays.depth_scale).weights
        t = importance_samples(t, weights.data, n_fine, camera.near, camera.far, rng)
    samples = t.shape[-1]
    field = radiance_field(triplane, rays.points(t).reshape(-1, 3), mlp)
    sigma = dm.reshape(field.sigma, (n, samples))
    result = composite(t, sigma, dm.reshape(field.rgb, (n, samples, 3)), camera.far, rays.depth_scale)
    return RenderResult(image=dm.reshape(result.color, (resolution, resolution, 3)),
                        depth=dm.reshape(result.depth, (resolution, resolution)),
                        sigma=sigma, weights=result.weights, t=t)


def write_depth(path: str, depth: np.ndarray) -> None:
    """
    Writes a raw float32 depth map: "TPDM", u32 width, u32 height, u32 reserved, then row-major data
    """
    depth = np.asarray(depth, dtype="<f4")
    height, width = depth.shape
    with open(path, "wb") as depth_file:
        depth_file.write(DEPTH_HEADER.pack(DEPTH_MAGIC, width, height, 0))
        depth_file.write(depth.tobytes(order="C"))


def read_depth(path: str) -> np.ndarray:
    with open(path, "rb") as depth_file:
        content = depth_file.read()
    if len(content) < DEPTH_HEADER.size:
        raise DatasetError(f"{path}: truncated depth file")
    magic, width, height, _ = DEPTH_HEADER.unpack_from(content)
    if magic != DEPTH_MAGIC:
        raise DatasetError(f"{path}: not a TPDM depth file")
    expected = DEPTH_HEADER.size + 4 * width * height
    if len(content) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes for {width}x{height}, found {len(content)}")
    return np.frombuffer(content, dtype="<f4", offset=DEPTH_HEADER.size).reshape(height, width).astype(np.float32)
