"""
Minimal reverse-mode differentiation engine on top of numpy.

Every op returns a new Tensor. When gradients are enabled and an input requires them,
the result carries a Node with the op name, its inputs and a backward rule mapping the
output gradient to one gradient per input. Graph.trace orders the nodes reachable from a
loss, backward walks them in reverse and accumulates in a fixed order, so two runs on the
same inputs give bit-identical gradients.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse
from scipy.special import expit

from helpers.errors import ContractViolation, NonFiniteError

ArrayLike = Union["Tensor", np.ndarray, float, int]

EXP_CLAMP = 80.0
GELU_COEFF = 0.044715
SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))

_state = {"dtype": np.float32, "grad_enabled": True}
_counter = itertools.count()


def default_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """
    Tensors created inside this block are 64-bit. Used for gradient checking
    """
    previous = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """
    Ops inside this block record no graph
    """
    previous = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = previous


def grad_enabled() -> bool:
    return _state["grad_enabled"]


class Node:
    __slots__ = ("op", "inputs", "backward_fn", "index")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.index = next(_counter)


class Tensor:
    """
    n-dimensional float array with an optional graph node
    """
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        dtype = dtype or default_dtype()
        if isinstance(data, np.ndarray) and data.dtype == dtype:
            self.data = data
        else:
            self.data = np.array(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    # -- metadata -------------------------------------------------------------------------------------------------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def op(self) -> str:
        return self._node.op if self._node else "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> Dict[Tensor, np.ndarray]:
        return backward(Graph.trace(self), self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators ------------------------------------------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractViolation("division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """
    A leaf tensor that is optimized
    """

    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=default_dtype()))


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Sums grad over the axes that broadcasting added or stretched to reach its shape
    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- graph ------------------------------------------------------------------------------------------------------------

class Graph:
    """
    Topologically ordered record of the ops that produced a loss
    """

    def __init__(self, order: List[Tensor]):
        self.order = order

    @staticmethod
    def trace(loss: Tensor) -> Graph:
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor._node is not None:
                for parent in reversed(tensor._node.inputs):
                    if id(parent) not in visited and parent.requires_grad:
                        stack.append((parent, False))
        return Graph(order)

    def leaves(self) -> List[Tensor]:
        return [t for t in self.order if t._node is None and t.requires_grad]

    def __len__(self):
        return len(self.order)


def backward(graph: Graph, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """
    Reverse-mode pass over graph
    @param graph: Graph traced from loss
    @param loss: scalar Tensor
    @return: gradient of loss for every leaf tensor that requires grad. Also stored in leaf.grad
    """
    if loss.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(graph.order):
        grad = grads.get(id(tensor))
        if grad is None or tensor._node is None:
            continue
        node = tensor._node
        input_grads = node.backward_fn(grad)
        for parent, parent_grad in zip(node.inputs, input_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(parent_grad)):
                raise NonFiniteError(f"non-finite gradient produced by op '{node.op}'")
            parent_grad = parent_grad.astype(parent.data.dtype, copy=False)
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + parent_grad
            else:
                grads[id(parent)] = parent_grad
    result: Dict[Tensor, np.ndarray] = {}
    for leaf in graph.leaves():
        grad = grads.get(id(leaf))
        if grad is None:
            grad = np.zeros_like(leaf.data)
        leaf.grad = grad if leaf.grad is None else leaf.grad + grad
        result[leaf] = grad
    return result


# -- elementwise ------------------------------------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), _backward)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", a.data - b.data, (a, b), _backward)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", a.data * b.data, (a, b), _backward)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    clamped = a.data > EXP_CLAMP
    out = np.exp(np.minimum(a.data, EXP_CLAMP))

    def _backward(g):
        return (np.where(clamped, 0.0, g * out),)

    return _make("exp", out, (a,), _backward)


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(np.logaddexp(0.0, a.data), 0.0).astype(a.data.dtype)
    return _make("softplus", out, (a,), lambda g: (g * expit(a.data),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def gelu(a: ArrayLike) -> Tensor:
    """
    tanh approximation of GELU
    """
    a = as_tensor(a)
    x = a.data
    inner = SQRT_2_OVER_PI * (x + GELU_COEFF * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def _backward(g):
        d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return _make("gelu", out, (a,), _backward)


# -- reductions and normalisation -------------------------------------------------------------------------------------

def _normalize_axis(axis, ndim) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), _backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.sum(axis=axes, keepdims=keepdims) / count

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make("mean", np.asarray(out, dtype=a.data.dtype), (a,), _backward)


def softmax(a: ArrayLike) -> Tensor:
    """
    Softmax over the last axis
    """
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make("softmax", out, (a,), _backward)


def log_softmax(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_norm

    def _backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (a,), _backward)


def layer_norm(a: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5) -> Tensor:
    """
    Normalizes over the last axis, then scales by gamma and shifts by beta
    """
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    out = x_hat * gamma.data + beta.data

    def _backward(g):
        d = a.shape[-1]
        g_hat = g * gamma.data
        g_a = inv_std / d * (d * g_hat - g_hat.sum(axis=-1, keepdims=True)
                             - x_hat * (g_hat * x_hat).sum(axis=-1, keepdims=True))
        return g_a, _unbroadcast(g * x_hat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make("layer_norm", out, (a, gamma, beta), _backward)


def exclusive_cumsum(a: ArrayLike) -> Tensor:
    """
    y_i = sum of x_j for j < i along the last axis
    """
    a = as_tensor(a)
    inclusive = np.cumsum(a.data, axis=-1)
    out = np.concatenate([np.zeros_like(inclusive[..., :1]), inclusive[..., :-1]], axis=-1)

    def _backward(g):
        rev = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
        return (np.concatenate([rev[..., 1:], np.zeros_like(rev[..., :1])], axis=-1),)

    return _make("exclusive_cumsum", out, (a,), _backward)


# -- linear algebra and shape plumbing --------------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")

    def _backward(g):
        g_a = g @ np.swapaxes(b.data, -1, -2)
        g_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(g_a, a.shape), _unbroadcast(g_b, b.shape)

    return _make("matmul", a.data @ b.data, (a, b), _backward)


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    inverse = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def expand(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    """
    Broadcasts a to shape
    """
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return _make("expand", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (int, slice, type(Ellipsis))) or p is None for p in parts)


def getitem(a: ArrayLike, key) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic_index(key)

    def _backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            # repeated indices accumulate
            np.add.at(full, key, g)
        return (full,)

    return _make("slice", np.array(a.data[key]), (a,), _backward)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# -- image ops --------------------------------------------------------------------------------------------------------

def conv3x3(x: ArrayLike, weight: ArrayLike, bias: ArrayLike) -> Tensor:
    """
    3x3 convolution, stride 1, zero padding 1
    @param x: (N, H, W, C_in)
    @param weight: (3, 3, C_in, C_out)
    @param bias: (C_out,)
    @return: (N, H, W, C_out)
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.shape[:2] != (3, 3) or weight.shape[2] != x.shape[-1]:
        raise ContractViolation(f"conv3x3 got input {x.shape} and weight {weight.shape}")
    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = sliding_window_view(padded, (3, 3), axis=(1, 2))
    out = np.einsum("nhwcab,abco->nhwo", cols, weight.data, optimize=True) + bias.data

    def _backward(g):
        g_padded = np.pad(g, ((0, 0), (1, 1), (1, 1), (0, 0)))
        g_cols = sliding_window_view(g_padded, (3, 3), axis=(1, 2))
        flipped = weight.data[::-1, ::-1]
        g_x = np.einsum("nhwoab,abco->nhwc", g_cols, flipped, optimize=True)
        g_w = np.einsum("nhwcab,nhwo->abco", cols, g, optimize=True)
        return g_x, g_w, g.sum(axis=(0, 1, 2))

    return _make("conv3x3", out, (x, weight, bias), _backward)


def _upsample_matrix(size: int, dtype) -> np.ndarray:
    """
    (2*size, size) bilinear interpolation matrix with half-pixel centers
    """
    out = np.zeros((2 * size, size), dtype=dtype)
    for o in range(2 * size):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), size - 1)
        i1 = min(i0 + 1, size - 1)
        frac = src - i0
        out[o, i0] += 1.0 - frac
        out[o, i1] += frac
    return out


def upsample2x(x: ArrayLike) -> Tensor:
    """
    2x bilinear upsampling of (N, H, W, C)
    """
    x = as_tensor(x)
    _, h, w, _ = x.shape
    u_h = _upsample_matrix(h, x.dtype)
    u_w = _upsample_matrix(w, x.dtype)
    out = np.einsum("ip,jq,npqc->nijc", u_h, u_w, x.data, optimize=True)

    def _backward(g):
        return (np.einsum("ip,jq,nijc->npqc", u_h, u_w, g, optimize=True),)

    return _make("upsample2x", out, (x,), _backward)


def bilinear_sample(plane: ArrayLike, coords: ArrayLike) -> Tensor:
    """
    Bilinear lookup of feature planes. Grid nodes sit at -1 + 2k/(R-1); coordinates outside [-1, 1] are
    clamped to the border and get zero coordinate gradient there
    @param plane: (..., R, R, C); the first coordinate walks the columns, the second the rows
    @param coords: (..., N, 2) with the same leading shape as plane
    @return: (..., N, C)
    """
    plane, coords = as_tensor(plane), as_tensor(coords)
    if plane.ndim < 3 or plane.shape[-3] != plane.shape[-2]:
        raise ContractViolation(f"bilinear_sample needs square planes (..., R, R, C), got {plane.shape}")
    res, channels = plane.shape[-2], plane.shape[-1]
    if channels == 0 or res < 2:
        raise ContractViolation(f"bilinear_sample needs R >= 2 and C > 0, got R={res}, C={channels}")
    lead = plane.shape[:-3]
    if coords.shape[:-2] != lead or coords.shape[-1] != 2:
        raise ContractViolation(f"coords {coords.shape} do not match planes {plane.shape}")
    if not np.all(np.isfinite(coords.data)):
        raise ContractViolation("bilinear_sample got non-finite coordinates")
    n_planes = int(np.prod(lead)) if lead else 1
    n = coords.shape[-2]
    flat_plane = plane.data.reshape(n_planes * res * res, channels)
    c = coords.data.reshape(n_planes, n, 2)
    inside = (c >= -1.0) & (c <= 1.0)
    pos = (np.clip(c, -1.0, 1.0) + 1.0) * 0.5 * (res - 1)
    cell = np.minimum(np.floor(pos).astype(np.int64), res - 2)
    frac = pos - cell
    fx, fy = frac[..., 0], frac[..., 1]
    base = (np.arange(n_planes, dtype=np.int64) * res * res)[:, None]
    idx00 = base + cell[..., 1] * res + cell[..., 0]
    corner_index = np.stack([idx00, idx00 + 1, idx00 + res, idx00 + res + 1], axis=-1).reshape(-1)
    corner_weight = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1).reshape(-1)
    rows = np.repeat(np.arange(n_planes * n), 4)
    interp = sparse.csr_matrix((corner_weight.astype(plane.dtype), (rows, corner_index)),
                               shape=(n_planes * n, n_planes * res * res))
    out = np.asarray(interp @ flat_plane).reshape(lead + (n, channels))

    def _backward(g):
        g_flat = g.reshape(n_planes * n, channels)
        g_plane = np.asarray(interp.T @ g_flat).reshape(plane.shape)
        values = flat_plane[corner_index].reshape(n_planes, n, 4, channels)
        v00, v01, v10, v11 = values[..., 0, :], values[..., 1, :], values[..., 2, :], values[..., 3, :]
        g3 = g.reshape(n_planes, n, channels)
        d_fx = (((1 - fy)[..., None] * (v01 - v00) + fy[..., None] * (v11 - v10)) * g3).sum(axis=-1)
        d_fy = (((1 - fx)[..., None] * (v10 - v00) + fx[..., None] * (v11 - v01)) * g3).sum(axis=-1)
        scale = 0.5 * (res - 1)
        g_coords = np.stack([d_fx, d_fy], axis=-1) * scale * inside
        return g_plane, g_coords.reshape(coords.shape)

    return _make("bilinear_sample", out, (plane, coords), _backward)


# -- losses -----------------------------------------------------------------------------------------------------------

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{op} got mismatched shapes {a.shape} and {b.shape}")


def mse(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Mean over all elements of (a - b)^2
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mse")
    diff = a.data - b.data
    count = max(diff.size, 1)

    def _backward(g):
        d = 2.0 * diff * g / count
        return d, -d

    return _make("mse", np.asarray((diff ** 2).sum() / count, dtype=diff.dtype), (a, b), _backward)


def mae(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Mean over all elements of |a - b|
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "mae")
    diff = a.data - b.data
    count = max(diff.size, 1)

    def _backward(g):
        d = np.sign(diff) * g / count
        return d, -d

    return _make("mae", np.asarray(np.abs(diff).sum() / count, dtype=diff.dtype), (a, b), _backward)


def cross_entropy(logits: ArrayLike, labels: np.ndarray) -> Tensor:
    """
    Mean negative log-likelihood of integer labels under softmax(logits)
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    log_probs = log_softmax(logits)
    picked = getitem(log_probs, (np.arange(labels.shape[0]), labels))
    return neg(mean(picked))


# -- gradient checking ------------------------------------------------------------------------------------------------

def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check_gradients(function: Callable[[Tensor], Tensor], point: ArrayLike, step: float = 1e-5) -> float:
    """
    Compares reverse-mode gradients with central differences. Runs in 64-bit mode
    @param function: maps a Tensor to a scalar Tensor; must be smooth at point
    @param point: where the gradient is evaluated
    @param step: finite-difference step
    @return: max over coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    """
    with float64_mode():
        base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
        x = Tensor(base.copy(), requires_grad=True)
        loss = function(x)
        analytic = backward(Graph.trace(loss), loss).get(x, np.zeros_like(base))
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                plus = function(Tensor(base.copy())).item()
                flat[i] = original - step
                minus = function(Tensor(base.copy())).item()
                flat[i] = original
                numeric.reshape(-1)[i] = (plus - minus) / (2.0 * step)
    return _relative_error(analytic, numeric)


def check_parameter_gradients(function: Callable[[], Tensor], parameters: Dict[str, Tensor], step: float = 1e-5,
                              max_coordinates: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """
    Gradient check of a closure over many parameters. Parameters must already be 64-bit
    @param function: recomputes the scalar loss from the current parameter values
    @param parameters: named parameters to check
    @param step: finite-difference step
    @param max_coordinates: if set, checks a seeded random subset of that many coordinates per parameter
    @param seed: seed of the coordinate subset
    @return: max relative error per parameter name
    """
    for name, param in parameters.items():
        if param.dtype != np.float64:
            raise ContractViolation(f"parameter '{name}' is {param.dtype}; gradient checks need float64")
        param.zero_grad()
    loss = function()
    grads = backward(Graph.trace(loss), loss)
    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}
    with no_grad():
        for name, param in parameters.items():
            analytic_full = grads.get(param, np.zeros_like(param.data)).reshape(-1)
            flat = param.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coordinates is not None and flat.size > max_coordinates:
                coords = np.sort(rng.choice(flat.size, size=max_coordinates, replace=False))
            numeric = np.zeros(coords.size)
            for j, i in enumerate(coords):
                original = flat[i]
                flat[i] = original + step
                plus = function().item()
                flat[i] = original - step
                minus = function().item()
                flat[i] = original
                numeric[j] = (plus - minus) / (2.0 * step)
            errors[name] = _relative_error(analytic_full[coords], numeric)
    return errors
