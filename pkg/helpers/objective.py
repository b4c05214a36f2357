from __future__ import annotations

from typing import Dict, Optional, Tuple

from helpers import diffmath as dm
from helpers.diffmath import Tensor
from helpers.errors import ContractViolation
from triplane_data_classes import LossReport, LossWeights

LOSS_NAMES = ("rgb", "depth", "dist", "norm")


def rgb_loss(images, reconstructions) -> Tensor:
    """
    Per-element mean squared error between the input and the rendered images
    """
    return dm.mse(reconstructions, images)


def depth_loss(depths, rendered_depths) -> Tensor:
    """
    Per-element mean squared error against the oracle depth, in scene units
    """
    return dm.mse(rendered_depths, depths)


def density_norm_loss(sigma) -> Tensor:
    """
    L1 norm of the queried densities divided by the number of points
    """
    sigma = dm.as_tensor(sigma)
    if sigma.size == 0:
        return dm.as_tensor(0.0)
    return dm.mean(sigma)


def distillation_loss(student_grids, teacher_grids: Tensor) -> Tensor:
    """
    Per-element mean squared difference of student and teacher grids. The teacher grid must come from a
    frozen encoder: it may not carry a graph or require gradients
    """
    if isinstance(teacher_grids, Tensor) and (teacher_grids.requires_grad or teacher_grids._node is not None):
        raise ContractViolation("teacher grids must be detached from any graph")
    return dm.mse(student_grids, teacher_grids)


def total_loss(terms: Dict[str, Optional[Tensor]], weights: LossWeights) -> Tuple[Tensor, LossReport]:
    """
    Weighted sum of the loss terms. Missing terms count as zero
    @param terms: Tensors keyed by 'rgb', 'depth', 'dist', 'norm'
    @param weights: Loss weights, validated here
    @return: The total as a Tensor for backward and the LossReport of all values
    """
    weights.validate()
    unknown = set(terms) - set(LOSS_NAMES)
    if unknown:
        raise ContractViolation(f"unknown loss terms {sorted(unknown)}")
    total = dm.as_tensor(0.0)
    values = {}
    for name in LOSS_NAMES:
        term = terms.get(name)
        coefficient = getattr(weights, name)
        values[name] = 0.0 if term is None else term.item()
        if term is not None and coefficient != 0.0:
            total = total + term * coefficient
    return total, LossReport(total=total.item(), **values)
