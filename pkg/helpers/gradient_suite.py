"""
Finite-difference checks of every differentiable piece, run in float64
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from helpers import diffmath as dm
from helpers.diffmath import Tensor
from helpers.objective import density_norm_loss, depth_loss, distillation_loss, rgb_loss, total_loss
from helpers.renderer import RadianceMLP, composite, render, stratified_samples
from helpers.triplane import Triplane, query_features
from triplane_data_classes import Camera, LossWeights

logger = logging.getLogger(__name__)

PRIMITIVE_THRESHOLD = 1e-5
END_TO_END_THRESHOLD = 1e-4


@dataclass
class GradientCheck:
    name: str
    error: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.error < self.threshold


def _weighted(out: Tensor, rng_seed: int = 11) -> Tensor:
    """
    Contracts an output with fixed random weights into a scalar
    """
    weights = np.random.default_rng(rng_seed).normal(size=out.shape)
    return dm.sum_(out * weights)


def _primitive_cases(rng: np.random.Generator):
    other = rng.normal(size=(3, 4))
    matrix = rng.normal(size=(4, 5))
    gamma, beta = rng.normal(size=4), rng.normal(size=4)
    conv_w, conv_b = rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)
    plane = rng.normal(size=(2, 4, 4, 3))
    target = rng.normal(size=(3, 4))
    labels = np.array([0, 3, 1])
    return [
        ("matmul", rng.normal(size=(3, 4)), lambda x: _weighted(x @ matrix)),
        ("add", rng.normal(size=(3, 4)), lambda x: _weighted(x + other)),
        ("sub", rng.normal(size=(3, 4)), lambda x: _weighted(other - x)),
        ("mul", rng.normal(size=(3, 4)), lambda x: _weighted(x * other)),
        ("neg", rng.normal(size=(3, 4)), lambda x: _weighted(-x)),
        ("exp", rng.normal(size=(3, 4)), lambda x: _weighted(dm.exp(x))),
        ("sigmoid", rng.normal(size=(3, 4)), lambda x: _weighted(dm.sigmoid(x))),
        ("softplus", rng.normal(size=(3, 4)), lambda x: _weighted(dm.softplus(x))),
        ("relu", rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4)),
         lambda x: _weighted(dm.relu(x))),
        ("gelu", rng.normal(size=(3, 4)), lambda x: _weighted(dm.gelu(x))),
        ("softmax", rng.normal(size=(3, 4)), lambda x: _weighted(dm.softmax(x))),
        ("log_softmax", rng.normal(size=(3, 4)), lambda x: _weighted(dm.log_softmax(x))),
        ("layer_norm", rng.normal(size=(3, 4)), lambda x: _weighted(dm.layer_norm(x, gamma, beta))),
        ("sum", rng.normal(size=(3, 4)), lambda x: _weighted(dm.sum_(x, axis=0))),
        ("mean", rng.normal(size=(3, 4)), lambda x: _weighted(dm.mean(x, axis=1))),
        ("concat", rng.normal(size=(3, 4)), lambda x: _weighted(dm.concat([x, x * 2.0], axis=0))),
        ("slice", rng.normal(size=(3, 4)), lambda x: _weighted(x[1:, ::2])),
        ("reshape", rng.normal(size=(3, 4)), lambda x: _weighted(dm.reshape(x, (2, 6)))),
        ("transpose", rng.normal(size=(3, 4)), lambda x: _weighted(dm.transpose(x, (1, 0)))),
        ("exclusive_cumsum", rng.normal(size=(3, 4)), lambda x: _weighted(dm.exclusive_cumsum(x))),
        ("conv3x3", rng.normal(size=(1, 4, 4, 2)), lambda x: _weighted(dm.conv3x3(x, conv_w, conv_b))),
        ("conv3x3_weight", conv_w, lambda w: _weighted(dm.conv3x3(plane[..., :2][:1], w, conv_b))),
        ("upsample2x", rng.normal(size=(1, 3, 3, 2)), lambda x: _weighted(dm.upsample2x(x))),
        ("bilinear_sample_plane", plane,
         lambda p: _weighted(dm.bilinear_sample(p, np.array([[[0.1, -0.3], [0.55, 0.2]], [[-0.7, 0.4], [0.3, 0.9]]])))),
        ("bilinear_sample_coords", rng.uniform(-0.8, 0.8, size=(2, 5, 2)) + 0.013,
         lambda c: _weighted(dm.bilinear_sample(plane, c))),
        ("mse", rng.normal(size=(3, 4)), lambda x: dm.mse(x, target)),
        ("mae", target + rng.uniform(0.1, 1.0, size=(3, 4)), lambda x: dm.mae(x, target)),
        ("cross_entropy", rng.normal(size=(3, 5)), lambda x: dm.cross_entropy(x, labels)),
    ]


def _field_setup(rng: np.random.Generator, resolution: int = 4, channels: int = 3):
    planes = rng.normal(scale=0.5, size=(3, resolution, resolution, channels))
    mlp = RadianceMLP(channels, 8, rng).astype(np.float64)
    return planes, mlp


def _objective_cases(rng: np.random.Generator):
    target = rng.uniform(size=(2, 3, 3))
    teacher = dm.Tensor(rng.normal(size=(2, 4)))
    return [
        ("rgb_loss", rng.uniform(size=(2, 3, 3)), lambda x: rgb_loss(target, x)),
        ("depth_loss", rng.uniform(1.7, 3.7, size=(2, 3, 3)), lambda x: depth_loss(target + 2.0, x)),
        ("density_norm_loss", rng.uniform(0.1, 1.0, size=(2, 8)), lambda x: density_norm_loss(x)),
        ("distillation_loss", rng.normal(size=(2, 4)), lambda x: distillation_loss(x, teacher)),
        ("total_loss", rng.normal(size=(2, 4)),
         lambda x: total_loss({"rgb": dm.mse(x, teacher), "dist": dm.mse(x * 2.0, teacher),
                               "depth": dm.mse(x, np.zeros((2, 4))), "norm": dm.mean(dm.softplus(x))},
                              LossWeights())[0]),
    ]


def run_suite(seed: int = 0, progress: Optional[Callable[[GradientCheck], None]] = None) -> List[GradientCheck]:
    """
    Runs every check
    @param progress: called after each check
    """
    results: List[GradientCheck] = []

    def record(name: str, error: float, threshold: float) -> None:
        check = GradientCheck(name, error, threshold)
        results.append(check)
        logger.debug("%s: %.3e", name, error)
        if progress is not None:
            progress(check)

    started = time.perf_counter()
    with dm.float64_mode():
        rng = np.random.default_rng(seed)
        for name, point, function in _primitive_cases(rng) + _objective_cases(rng):
            record(name, dm.check_gradients(function, point), PRIMITIVE_THRESHOLD)

        planes, mlp = _field_setup(rng)
        points = rng.uniform(-0.9, 0.9, size=(6, 3))

        def field_output() -> Tensor:
            field = mlp(query_features(Triplane(dm.Tensor(planes)), points))
            return _weighted(dm.concat([field.rgb, dm.reshape(field.sigma, (6, 1))], axis=-1))

        for param_name, error in dm.check_parameter_gradients(field_output, dict(mlp.named_parameters())).items():
            record(f"radiance_mlp.{param_name}", error, PRIMITIVE_THRESHOLD)

        t = stratified_samples(3, 5, 1.7, 3.7, rng)
        rgb = rng.uniform(size=(3, 5, 3))
        sigma = rng.uniform(0.1, 2.0, size=(3, 5))

        def composite_output(s: Tensor, c: Tensor) -> Tensor:
            result = composite(t, s, c, 3.7)
            return _weighted(dm.concat([result.color, dm.reshape(result.depth, (3, 1))], axis=-1))

        record("composite_sigma", dm.check_gradients(lambda s: composite_output(s, rgb), sigma), PRIMITIVE_THRESHOLD)
        record("composite_rgb", dm.check_gradients(lambda c: composite_output(sigma, c), rgb), PRIMITIVE_THRESHOLD)

        camera = Camera()
        target = rng.uniform(size=(4, 4, 3))
        target_depth = rng.uniform(camera.near, camera.far, size=(4, 4))

        def render_loss(p: Tensor) -> Tensor:
            result = render(Triplane(p), camera, 4, mlp, n_coarse=2, n_fine=0)
            return dm.mse(result.image, target) + dm.mse(result.depth, target_depth)

        record("render_to_loss", dm.check_gradients(render_loss, planes), END_TO_END_THRESHOLD)
    logger.info("gradient suite took %.1fs", time.perf_counter() - started)
    return results
