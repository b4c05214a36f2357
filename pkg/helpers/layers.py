from __future__ import annotations

from collections import OrderedDict
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.stats import truncnorm

from helpers import diffmath as dm
from helpers.diffmath import Parameter, Tensor
from helpers.errors import ContractViolation

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float = INIT_STD) -> np.ndarray:
    """
    Draws from a normal distribution truncated at two standard deviations
    @param rng: Seeded generator
    @param shape: Shape of the returned array
    @param std: Standard deviation before truncation
    @return: float array of the given shape
    """
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


class Module:
    """
    Base class for everything that owns parameters. Parameters and sub-modules are discovered from the
    instance attributes in assignment order, which fixes the order of state_dict and checkpoints
    """

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        result: List[Tuple[str, Parameter]] = []
        for name, value in vars(self).items():
            full_name = f"{prefix}{name}"
            if isinstance(value, Parameter):
                result.append((full_name, value))
            elif isinstance(value, Module):
                result.extend(value.named_parameters(f"{full_name}."))
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        result.extend(item.named_parameters(f"{full_name}.{index}."))
        return result

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(param.size for param in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, param.data.copy()) for name, param in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = [name for name in own if name not in state]
            unexpected = [name for name in state if name not in own]
            if missing or unexpected:
                raise ContractViolation(f"state dict mismatch, missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, param in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != param.shape:
                raise ContractViolation(f"parameter '{name}' has shape {param.shape}, state holds {value.shape}")
            param.data = value.astype(param.dtype, copy=True)

    def astype(self, dtype) -> Module:
        """
        Casts every parameter in place. Gradient checks run the model in float64
        """
        for param in self.parameters():
            param.data = param.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class Linear(Module):
    """
    y = x W + b over the last axis
    """

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, std: Optional[float] = None):
        self.weight = Parameter(trunc_normal(rng, (in_features, out_features), INIT_STD if std is None else std))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 1:
            return dm.reshape(dm.reshape(x, (1, -1)) @ self.weight, (-1,)) + self.bias
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return dm.layer_norm(x, self.gamma, self.beta)


class Conv3x3(Module):
    """
    Same-size 3x3 convolution on NHWC tensors. Weights default to a fan-in scaled truncated normal
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, std: Optional[float] = None):
        if std is None:
            std = 1.0 / np.sqrt(9 * in_channels)
        self.weight = Parameter(trunc_normal(rng, (3, 3, in_channels, out_channels), std))
        self.bias = Parameter(np.zeros(out_channels))

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        return dm.conv3x3(x, self.weight, self.bias)
