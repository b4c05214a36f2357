import numpy as np
import pytest

from helpers import diffmath as dm
from helpers.errors import ContractViolation
from helpers.layers import Conv3x3, LayerNorm, Linear, Module, trunc_normal


class TwoLayers(Module):
    def __init__(self, rng):
        self.first = Linear(3, 4, rng)
        self.norm = LayerNorm(4)
        self.convs = [Conv3x3(2, 2, rng), Conv3x3(2, 1, rng)]

    def forward(self, x):
        return self.norm(self.first(x))


def test_trunc_normal_stays_within_two_std():
    values = trunc_normal(np.random.default_rng(0), (1000,), std=0.5)
    assert np.all(np.abs(values) <= 1.0)
    assert values.std() == pytest.approx(0.5 * 0.88, rel=0.1)


def test_named_parameters_follow_assignment_order():
    names = [name for name, _ in TwoLayers(np.random.default_rng(0)).named_parameters()]
    assert names == ["first.weight", "first.bias", "norm.gamma", "norm.beta", "convs.0.weight", "convs.0.bias",
                     "convs.1.weight", "convs.1.bias"]


def test_state_dict_round_trip():
    source, target = TwoLayers(np.random.default_rng(0)), TwoLayers(np.random.default_rng(1))
    target.load_state_dict(source.state_dict())
    for (name, a), (_, b) in zip(source.named_parameters(), target.named_parameters()):
        np.testing.assert_array_equal(a.data, b.data, err_msg=name)


def test_load_state_dict_rejects_mismatch():
    module = TwoLayers(np.random.default_rng(0))
    state = module.state_dict()
    state.pop("norm.beta")
    with pytest.raises(ContractViolation):
        module.load_state_dict(state)
    state = module.state_dict()
    state["first.weight"] = np.zeros((4, 3))
    with pytest.raises(ContractViolation, match="first.weight"):
        module.load_state_dict(state)


def test_linear_accepts_vectors():
    layer = Linear(3, 2, np.random.default_rng(0))
    assert layer(dm.Tensor(np.ones(3))).shape == (2,)
    assert layer(dm.Tensor(np.ones((5, 3)))).shape == (5, 2)


def test_parameter_count_and_zero_grad():
    module = TwoLayers(np.random.default_rng(0))
    assert module.parameter_count() == 3 * 4 + 4 + 4 + 4 + 9 * 4 + 2 + 9 * 2 + 1
    loss = dm.sum_(module(dm.Tensor(np.ones((2, 3)))))
    loss.backward()
    assert module.first.weight.grad is not None
    module.zero_grad()
    assert all(param.grad is None for param in module.parameters())


def test_astype_casts_every_parameter():
    module = TwoLayers(np.random.default_rng(0)).astype(np.float64)
    assert all(param.dtype == np.float64 for param in module.parameters())
