"""Minimal dense-network engine.

Float64 tensors with reverse-mode automatic differentiation over a small,
closed op set (affine, rectifier, exp/log, reductions, elementwise), a
fully-connected rectifier network, exact Hessian-vector products via double
backpropagation, and plain SGD. Everything is sized to stay checkable
against finite differences.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Sequence
from contextlib import contextmanager

import numpy as np

from .errors import ConfigError, DimensionError, NumericalError, StateError

Array = np.ndarray

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation fast path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data: Array, what: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite values in {what}")


class Tensor:
    """Node of the autodiff graph: a float64 array plus backward closures.

    The backward closures operate on Tensors, so gradients are themselves
    graph nodes and can be differentiated again (double backpropagation).
    """

    __slots__ = ("data", "requires_grad", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = requires_grad
        self._vjps: tuple = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data: Array, vjps) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled:
            tracked = tuple((p, fn) for p, fn in vjps if p.requires_grad)
            if tracked:
                out.requires_grad = True
                out._vjps = tracked
        return out

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    # -- elementwise arithmetic (broadcasting-aware) ------------------------

    def __add__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        return Tensor._make(
            self.data + other.data,
            [(self, lambda ct: _sum_to(ct, self.shape)),
             (other, lambda ct: _sum_to(ct, other.shape))],
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, [(self, lambda ct: -ct)])

    def __sub__(self, other) -> "Tensor":
        return self + (-Tensor._wrap(other))

    def __rsub__(self, other) -> "Tensor":
        return (-self) + Tensor._wrap(other)

    def __mul__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        return Tensor._make(
            self.data * other.data,
            [(self, lambda ct: _sum_to(ct * other, self.shape)),
             (other, lambda ct: _sum_to(ct * self, other.shape))],
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        return Tensor._make(
            self.data / other.data,
            [(self, lambda ct: _sum_to(ct / other, self.shape)),
             (other, lambda ct: _sum_to(-ct * self / (other * other), other.shape))],
        )

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor._wrap(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        c = float(exponent)
        return Tensor._make(
            self.data ** c,
            [(self, lambda ct: ct * (self ** (c - 1.0)) * c)],
        )

    # -- linear algebra ------------------------------------------------------

    def __matmul__(self, other) -> "Tensor":
        other = Tensor._wrap(other)
        if self.ndim != 2 or other.ndim != 2:
            raise DimensionError(
                f"matmul expects 2-D operands, got {self.shape} @ {other.shape}")
        return Tensor._make(
            self.data @ other.data,
            [(self, lambda ct: ct @ other.transpose()),
             (other, lambda ct: self.transpose() @ ct)],
        )

    def transpose(self) -> "Tensor":
        return Tensor._make(self.data.T.copy(), [(self, lambda ct: ct.transpose())])

    # -- nonlinearities ------------------------------------------------------

    def relu(self) -> "Tensor":
        mask = Tensor((self.data > 0).astype(np.float64))  # subgradient 0 at 0
        return Tensor._make(np.maximum(self.data, 0.0), [(self, lambda ct: ct * mask)])

    def exp(self) -> "Tensor":
        out = Tensor._make(np.exp(self.data), [(self, lambda ct: ct * out)])
        return out

    def log(self) -> "Tensor":
        return Tensor._make(np.log(self.data), [(self, lambda ct: ct / self)])

    def clip(self, lo: float | None = None, hi: float | None = None) -> "Tensor":
        # pass-through gradient strictly inside (lo, hi), zero on the clamped part
        inside = np.ones_like(self.data)
        if lo is not None:
            inside *= self.data > lo
        if hi is not None:
            inside *= self.data < hi
        mask = Tensor(inside)
        return Tensor._make(np.clip(self.data, lo, hi), [(self, lambda ct: ct * mask)])

    # -- reductions and shape ops ---------------------------------------------

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def vjp(ct: "Tensor") -> "Tensor":
            if axis is not None and not keepdims:
                ct = ct.reshape(_keepdims_shape(shape, axis))
            return ct.broadcast_to(shape)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), [(self, vjp)])

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        target = tuple(shape)
        return Tensor._make(
            self.data.reshape(target).copy(),
            [(self, lambda ct: ct.reshape(self.shape))],
        )

    def broadcast_to(self, shape: Sequence[int]) -> "Tensor":
        target = tuple(shape)
        return Tensor._make(
            np.broadcast_to(self.data, target).copy(),
            [(self, lambda ct: _sum_to(ct, self.shape))],
        )

    def slice_cols(self, lo: int, hi: int) -> "Tensor":
        total = self.shape[-1]
        return Tensor._make(
            self.data[..., lo:hi].copy(),
            [(self, lambda ct: ct.pad_cols(lo, total))],
        )

    def pad_cols(self, lo: int, total: int) -> "Tensor":
        width = self.shape[-1]
        padded = np.zeros(self.shape[:-1] + (total,))
        padded[..., lo:lo + width] = self.data
        return Tensor._make(padded, [(self, lambda ct: ct.slice_cols(lo, lo + width))])

    def max_lastaxis(self, keepdims: bool = False) -> "Tensor":
        # routes the gradient to the first maximal entry (ties -> lowest index)
        idx = np.argmax(self.data, axis=-1)
        mask = np.zeros_like(self.data)
        np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
        return (self * Tensor(mask)).sum(axis=-1, keepdims=keepdims)


def _keepdims_shape(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    s = list(shape)
    s[axis] = 1
    return tuple(s)


def _sum_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reverse broadcasting: reduce t down to the given shape."""
    while t.ndim > len(shape):
        t = t.sum(axis=0)
    for i, (have, want) in enumerate(zip(t.shape, shape)):
        if want == 1 and have != 1:
            t = t.sum(axis=i, keepdims=True)
    return t


def softmax_lastaxis(t: Tensor) -> Tensor:
    """Softmax over the last axis, shift-stabilized by the (constant) row max."""
    shifted = t - Tensor(t.data.max(axis=-1, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp_lastaxis(t: Tensor, keepdims: bool = False) -> Tensor:
    """log(sum(exp(t))) over the last axis, shift-stabilized."""
    mx = Tensor(t.data.max(axis=-1, keepdims=True))
    out = (t - mx).exp().sum(axis=-1, keepdims=True).log() + mx
    return out if keepdims else out.reshape(out.shape[:-1])


# -- gradient engine ---------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def grad_of(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar output with respect to the given leaves.

    With create_graph=True the returned gradients carry their own graph and
    can be differentiated again; leaves the accumulated .grad fields of any
    Parameter untouched. Missing dependencies yield zero gradients.
    """
    if output.data.size != 1:
        raise DimensionError(f"grad_of needs a scalar output, got shape {output.shape}")
    cot: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}

    def run() -> None:
        for node in reversed(_toposort(output)):
            ct = cot.get(id(node))
            if ct is None:
                continue
            for parent, vjp in node._vjps:
                contrib = vjp(ct)
                prev = cot.get(id(parent))
                cot[id(parent)] = contrib if prev is None else prev + contrib

    if create_graph:
        run()
    else:
        with no_grad():
            run()

    grads = []
    for leaf in wrt:
        g = cot.get(id(leaf))
        if g is None or g.shape != leaf.shape:
            g = Tensor(np.zeros_like(leaf.data))
        grads.append(g)
    return grads


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(parameter) into .grad for every reachable Parameter."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    params = collect_parameters(loss)
    if not params:
        raise StateError("backward called on a loss with no preceding forward pass "
                         "(no parameters reachable from the loss node)")
    for p, g in zip(params, grad_of(loss, params)):
        p.grad += g.data


def collect_parameters(root: Tensor) -> list["Parameter"]:
    """All Parameter leaves reachable from root, ordered by id."""
    found = {id(n): n for n in _toposort(root) if isinstance(n, Parameter)}
    return sorted(found.values(), key=lambda p: p.pid)


# -- parameters and the model -------------------------------------------------


class Parameter(Tensor):
    """Trainable leaf tensor with an accumulated gradient and a stable ordinal."""

    __slots__ = ("grad", "pid")

    def __init__(self, data, pid: int):
        super().__init__(data, requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.pid = pid


class SeededRng:
    """Deterministic random stream: PCG64 keyed by a 64-bit seed.

    The same seed yields a bit-identical stream on every platform and run
    (NumPy's PCG64/SeedSequence are platform-independent by construction).
    derive() produces statistically independent child streams keyed by
    integer path components, so one root seed can drive many consumers
    reproducibly.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self._key = _key
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed,) + _key)))

    def derive(self, *subkeys: int) -> "SeededRng":
        return SeededRng(self.seed, self._key + tuple(int(k) for k in subkeys))

    def standard_normal(self, shape=()) -> Array:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape=()) -> Array:
        return self._gen.uniform(low, high, shape)

    def permutation(self, n: int) -> Array:
        return self._gen.permutation(n)


class MlpModel:
    """Fully-connected network with rectifier hidden layers and a linear output.

    widths lists every layer size including input and output, e.g.
    [2, 64, 64, 2]. Weights and biases are zero-mean uniform with half-width
    sqrt(6 / (fan_in + fan_out)); random biases keep fresh models away from
    exact rectifier kinks, where two-sided difference quotients are invalid.
    """

    def __init__(self, widths: Sequence[int], rng: SeededRng):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ConfigError(f"widths must be >= 2 positive layer sizes, got {widths}")
        self.widths = widths
        self.weights: list[Parameter] = []
        self.biases: list[Parameter] = []
        self.params: list[Parameter] = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            half = math.sqrt(6.0 / (fan_in + fan_out))
            w = Parameter(rng.uniform(-half, half, (fan_in, fan_out)), pid=len(self.params))
            self.params.append(w)
            b = Parameter(rng.uniform(-half, half, (fan_out,)), pid=len(self.params))
            self.params.append(b)
            self.weights.append(w)
            self.biases.append(b)

    @property
    def num_scalars(self) -> int:
        return sum(p.data.size for p in self.params)

    def forward(self, batch) -> Tensor:
        x = Tensor._wrap(batch)
        if x.ndim != 2 or x.shape[1] != self.widths[0]:
            raise DimensionError(
                f"batch shape {x.shape} does not match model input width "
                f"({self.widths[0]},): expected (N, {self.widths[0]})")
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < last:
                x = x.relu()
        return x

    def __call__(self, batch) -> Tensor:
        return self.forward(batch)


# -- optimizer and flat-vector views ------------------------------------------


def _param_list(model_or_params) -> list[Parameter]:
    params = getattr(model_or_params, "params", model_or_params)
    return list(params)


def sgd_step(model_or_params, lr: float) -> None:
    """In-place update value -= lr * grad for every parameter, then clear grads."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for p in _param_list(model_or_params):
        p.data -= lr * p.grad
        _check_finite(p.data, "parameter after sgd_step")
        p.grad[:] = 0.0


def flatten_params(model_or_params) -> Array:
    """Concatenate parameter values (id order, row-major within each) into one vector."""
    return np.concatenate([p.data.ravel() for p in _param_list(model_or_params)])


def unflatten_params(model_or_params, flat: Array) -> None:
    """Write a flat vector back into the parameters (inverse of flatten_params)."""
    params = _param_list(model_or_params)
    total = sum(p.data.size for p in params)
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (total,):
        raise DimensionError(f"flat vector has shape {flat.shape}, expected ({total},)")
    offset = 0
    for p in params:
        n = p.data.size
        p.data[...] = flat[offset:offset + n].reshape(p.shape)
        offset += n


def flatten_grads(model_or_params) -> Array:
    return np.concatenate([p.grad.ravel() for p in _param_list(model_or_params)])


def hvp(model, loss_builder: Callable[[], Tensor], v: Array) -> Array:
    """Hessian-vector product H @ v for the scalar loss produced by loss_builder.

    Exact double backpropagation: the gradient is built with its own graph
    and the directional derivative of (gradient . v) is differentiated again.
    loss_builder must rebuild the loss at the current parameters on each call.
    """
    params = _param_list(model)
    total = sum(p.data.size for p in params)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (total,):
        raise DimensionError(f"direction has shape {v.shape}, expected ({total},)")
    loss = loss_builder()
    grads = grad_of(loss, params, create_graph=True)
    dot = Tensor(0.0)
    offset = 0
    for p, g in zip(params, grads):
        n = p.data.size
        part = Tensor(v[offset:offset + n].reshape(p.shape))
        dot = dot + (g * part).sum()
        offset += n
    hv = grad_of(dot, params)
    return np.concatenate([g.data.ravel() for g in hv])
