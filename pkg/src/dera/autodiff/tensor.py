"""Reverse-mode automatic differentiation on dense numpy arrays.

The graph is a tape of `Tensor` nodes.  Each non-leaf node keeps references
to its parents and a vector-Jacobian closure.  `backward` is a pure
function: it never mutates the graph or any accumulated state, so the same
graph can be differentiated repeatedly (the conflict-projection step relies
on this to extract two alignment gradients before the final pass).

Gradients over a named parameter subset are returned flattened into a
single vector in lexicographic name order, which makes inner products and
norms between per-loss gradients well defined and reproducible.

Training runs in float32.  Finite-difference verification constructs
float64 graphs via ``ParamStore(dtype=np.float64)``; all primitives follow
the dtype of their operands.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class ContractError(ValueError):
    """A caller violated an operation's preconditions."""


class NumericError(RuntimeError):
    """A non-finite value was produced (NaN/Inf is an error state)."""


# ---------------------------------------------------------------------------
# Non-differentiable value tape (record/replay).
#
# Finite-difference checks of losses containing detached values are only
# meaningful if the detached values are held fixed while parameters are
# perturbed.  A NondiffTape records every such value on the base evaluation
# and replays it on subsequent evaluations, so the function seen by the
# difference quotient is exactly the function the analytic gradient
# differentiates.
# ---------------------------------------------------------------------------

_TAPE_STACK: list["NondiffTape"] = []


class NondiffTape:
    """Records (then replays) values that bypass differentiation."""

    def __init__(self, mode: str = "record", items: list | None = None):
        if mode not in ("record", "replay"):
            raise ContractError(f"unknown tape mode {mode!r}")
        self.mode = mode
        self.items: list = [] if items is None else items
        self._cursor = 0

    def constant(self, value):
        if self.mode == "record":
            self.items.append(value)
            return value
        if self._cursor >= len(self.items):
            raise ContractError("nondiff tape replay ran past recorded items")
        stored = self.items[self._cursor]
        self._cursor += 1
        return stored

    def replay(self) -> "NondiffTape":
        return NondiffTape("replay", self.items)

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _active_tape() -> NondiffTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def frozen_choice(value: np.ndarray) -> np.ndarray:
    """Route a non-differentiable decision (e.g. nearest-neighbour indices)
    through the active tape so finite-difference evaluations reuse it."""
    tape = _active_tape()
    return value if tape is None else tape.constant(value)


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """A dense array node in the differentiation graph."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._op: str = "leaf"

    # -- metadata ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def assert_finite(self, where: str = "") -> "Tensor":
        if not np.isfinite(self.data).all():
            raise NumericError(f"non-finite values in {where or self._op}")
        return self

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, _lift(other, self))

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return mul(self, _lift(-1.0, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, key):
        return take_slice(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, ax1, ax2):
        return swapaxes(self, ax1, ax2)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def constant(value, dtype=None) -> Tensor:
    """Wrap raw data as a non-differentiable leaf."""
    return Tensor(value, requires_grad=False, dtype=dtype)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
        out._op = op
    else:
        out._parents = ()
        out._vjp = None
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(g, b.data.shape) if nb else None)

    return _node(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g, a.data.shape) if na else None,
                _unbroadcast(-g, b.data.shape) if nb else None)

    return _node(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        return (_unbroadcast(g * b.data, a.data.shape) if na else None,
                _unbroadcast(g * a.data, b.data.shape) if nb else None)

    return _node(a.data * b.data, (a, b), vjp, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = (g / b.data) if na else None
        gb = (-g * a.data / (b.data * b.data)) if nb else None
        return (_unbroadcast(ga, a.data.shape) if na else None,
                _unbroadcast(gb, b.data.shape) if nb else None)

    return _node(a.data / b.data, (a, b), vjp, "div")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.  Supports 2D x 2D and equal-rank stacked batches.

    Projections reshape to 2D before calling this (large BLAS calls); the
    stacked form exists for per-head attention products.
    """
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ContractError("matmul requires at least 2D operands")
    if a.data.ndim != b.data.ndim and not (a.data.ndim == 2 or b.data.ndim == 2):
        raise ContractError("matmul operands must be 2D or share batch rank")
    na, nb = a.requires_grad, b.requires_grad

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape) if na else None
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape) if nb else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), vjp, "matmul")


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def vjp(g):
        return (g.swapaxes(ax1, ax2),)

    return _node(np.ascontiguousarray(a.data.swapaxes(ax1, ax2)), (a,), vjp, "transpose")


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    """General axis permutation (transpose)."""
    axes = tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def vjp(g):
        return (g.transpose(inverse),)

    return _node(np.ascontiguousarray(a.data.transpose(axes)), (a,), vjp, "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape

    def vjp(g):
        return (np.ascontiguousarray(g).reshape(old),)

    return _node(np.ascontiguousarray(a.data).reshape(shape), (a,), vjp, "reshape")


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.data.shape

    def vjp(g):
        return (_unbroadcast(g, old),)

    return _node(np.broadcast_to(a.data, shape), (a,), vjp, "broadcast")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat")


def take_slice(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; the sliced region receives the gradient."""

    def vjp(g):
        out = np.zeros_like(a.data)
        out[key] = g
        return (out,)

    return _node(a.data[key], (a,), vjp, "slice")


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).astype(a.data.dtype, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, a.data.shape).astype(a.data.dtype, copy=False),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.data.shape[ax] for ax in axes]))
    inv = np.asarray(1.0 / count, dtype=a.data.dtype)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g * inv, a.data.shape).astype(a.data.dtype, copy=False),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2 * inv, a.data.shape).astype(a.data.dtype, copy=False),)

    return _node(a.data.mean(axis=axis, keepdims=keepdims, dtype=a.data.dtype), (a,), vjp, "mean")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def vjp(g):
        return (g * out_data,)

    return _node(out_data, (a,), vjp, "exp")


def log(a: Tensor) -> Tensor:
    def vjp(g):
        return (g / a.data,)

    return _node(np.log(a.data), (a,), vjp, "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def vjp(g):
        return (g / (2.0 * out_data),)

    return _node(out_data, (a,), vjp, "sqrt")


def relu(a: Tensor) -> Tensor:
    def vjp(g):
        return (g * (a.data > 0),)

    return _node(np.maximum(a.data, 0), (a,), vjp, "relu")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (fused in-place kernels; the tanh is cached
    for the backward pass)."""
    x = a.data
    t = x * x
    t *= x
    t *= 0.044715
    t += x
    t *= _GELU_C
    np.tanh(t, out=t)
    out_data = t + 1.0
    out_data *= x
    out_data *= 0.5

    def vjp(g):
        # dy/dx = 0.5(1+t) + 0.5x(1-t^2) * C * (1 + 3*0.044715 x^2)
        dinner = x * x
        dinner *= 3 * 0.044715
        dinner += 1.0
        dinner *= _GELU_C
        dydx = 1.0 - t * t
        dydx *= x
        dydx *= 0.5
        dydx *= dinner
        half = t + 1.0
        half *= 0.5
        dydx += half
        dydx *= g
        return (dydx,)

    return _node(out_data, (a,), vjp, "gelu")


def absolute(a: Tensor) -> Tensor:
    def vjp(g):
        return (g * np.sign(a.data),)

    return _node(np.abs(a.data), (a,), vjp, "abs")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.subtract(a.data, m)
    np.exp(e, out=e)
    denom = e.sum(axis=axis, keepdims=True)
    np.divide(e, denom, out=e)
    out_data = e

    def vjp(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (g - dot),)

    return _node(out_data, (a,), vjp, "softmax")


def layer_norm(a: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalization over the last axis with learned scale/shift."""
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True, dtype=x.dtype)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True, dtype=x.dtype)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    out_data = xhat * scale.data + shift.data

    def vjp(g):
        gs = g * scale.data
        dot1 = gs.sum(axis=-1, keepdims=True)
        dot2 = (gs * xhat).sum(axis=-1, keepdims=True)
        dx = inv / n * (n * gs - dot1 - xhat * dot2)
        batch_axes = tuple(range(g.ndim - 1))
        dscale = (g * xhat).sum(axis=batch_axes)
        dshift = g.sum(axis=batch_axes)
        return dx.astype(x.dtype, copy=False), dscale, dshift

    return _node(out_data, (a, scale, shift), vjp, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; the gradient scatter-adds into the table."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("embedding ids must be integers")

    def vjp(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        return (dt,)

    return _node(table.data[ids], (table,), vjp, "embedding")


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row negative log-likelihood of integer targets. Shape (N,V) -> (N,)."""
    targets = np.asarray(targets)
    if logits.data.ndim != 2:
        raise ContractError("cross_entropy_with_logits expects (N, V) logits")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    lse = (np.log(z) + m).reshape(-1)
    rows = np.arange(x.shape[0])
    nll = lse - x[rows, targets]

    def vjp(g):
        dx = probs * g[:, None]
        dx[rows, targets] -= g
        return (dx.astype(x.dtype, copy=False),)

    return _node(nll.astype(x.dtype, copy=False), (logits,), vjp, "cross_entropy_with_logits")


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """cos = <a,b> / (|a||b| + eps), composed from primitives.

    A small constant inside each sqrt keeps the gradient finite for
    zero-norm rows; eps in the denominator keeps the value finite.
    """
    tiny = 1e-12
    dot = reduce_sum(mul(a, b), axis=axis)
    na = sqrt(reduce_sum(mul(a, a), axis=axis) + tiny)
    nb = sqrt(reduce_sum(mul(b, b), axis=axis) + tiny)
    return div(dot, add(mul(na, nb), _lift(eps, a)))


def argmin_rows(x: np.ndarray) -> np.ndarray:
    """Index of the minimum of each row (ties -> lowest index).

    Non-differentiable index path used by the quantizer; routed through the
    active nondiff tape so frozen evaluations reuse the base decision.
    """
    idx = np.argmin(x, axis=1)
    return frozen_choice(idx)


def stop_gradient(x) -> Tensor:
    """Value-identical leaf; no gradient flows through the result."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    tape = _active_tape()
    if tape is not None:
        data = tape.constant(data)
    return Tensor(data, requires_grad=False)


def straight_through(pre: Tensor, quantized: Tensor) -> Tensor:
    """Forward the quantized values; route the gradient to the pre-quantized
    input unchanged.  The quantized operand receives no gradient.

    The forward value is exactly ``quantized.data`` (no arithmetic detour),
    so decoding a token sequence reproduces the training-path decoder input
    bitwise.  Under a replay tape the value tracks the pre-quantized input
    plus the recorded offset, which is the function the straight-through
    gradient is the true derivative of.
    """
    if pre.data.shape != quantized.data.shape:
        raise ContractError("straight_through operands must share a shape")
    tape = _active_tape()
    if tape is None:
        out_data = quantized.data
    elif tape.mode == "record":
        tape.constant(quantized.data - pre.data)
        out_data = quantized.data
    else:
        out_data = pre.data + tape.constant(None)

    def vjp(g):
        return (g, None)

    return _node(out_data, (pre, quantized), vjp, "straight_through")


def clip_unit(a: Tensor) -> Tensor:
    """Clamp to [-1, 1] as a relu composition (zero gradient when saturated)."""
    one = _lift(1.0, a)
    return sub(add(a, relu(sub(_lift(-1.0, a), a))), relu(sub(a, one)))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class Parameter:
    """A named trainable tensor."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.value = Tensor(data, requires_grad=True)
        self.grad: np.ndarray | None = None

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def _name_seed(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "little")


class ParamStore:
    """Registry of uniquely named parameters.

    Each parameter is initialized from its own RNG stream derived from
    (global seed, name), so initialization does not depend on creation
    order or on which other parameters exist.
    """

    def __init__(self, seed: int = 0, dtype=DEFAULT_DTYPE):
        self.seed = int(seed)
        self.dtype = dtype
        self._params: dict[str, Parameter] = {}

    def create(self, name: str, shape: tuple[int, ...], init: str = "normal",
               std: float = 0.02, bound: float = 1.0) -> Parameter:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        rng = np.random.default_rng([self.seed, _name_seed(name)])
        shape = tuple(int(s) for s in shape)
        if init == "normal":
            data = rng.normal(0.0, std, size=shape)
        elif init == "uniform":
            data = rng.uniform(-bound, bound, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        else:
            raise ContractError(f"unknown init {init!r}")
        param = Parameter(name, data.astype(self.dtype))
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def parameters(self) -> list[Parameter]:
        return [self._params[n] for n in self.names()]

    def subset(self, prefix: str) -> dict[str, Parameter]:
        return {n: p for n, p in self._params.items() if n.startswith(prefix)}

    def as_dict(self) -> dict[str, Parameter]:
        return dict(self._params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: self._params[n].data for n in self.names()}

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            if name not in self._params:
                raise ContractError(f"unknown parameter {name!r} in state")
            p = self._params[name]
            if p.data.shape != arr.shape:
                raise ContractError(
                    f"shape mismatch for {name!r}: {p.data.shape} vs {arr.shape}")
            p.value.data = arr.astype(self.dtype)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------


@dataclass
class GradientVector:
    """Per-loss gradient over a named parameter subset, flattened in stable
    lexicographic name order."""

    param_names: tuple[str, ...]
    flat: np.ndarray
    offsets: dict[str, tuple[int, int]]
    shapes: dict[str, tuple[int, ...]]

    def block(self, name: str) -> np.ndarray:
        lo, hi = self.offsets[name]
        return self.flat[lo:hi].reshape(self.shapes[name])

    def dot(self, other: "GradientVector") -> float:
        return float(np.dot(self.flat, other.flat))

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat))

    def scaled(self, factor: float) -> "GradientVector":
        return GradientVector(self.param_names, self.flat * factor, self.offsets, self.shapes)

    def add(self, other: "GradientVector") -> "GradientVector":
        return GradientVector(self.param_names, self.flat + other.flat, self.offsets, self.shapes)


def _normalize_params(params) -> dict[str, Parameter]:
    if isinstance(params, ParamStore):
        return params.as_dict()
    if isinstance(params, Mapping):
        return dict(params)
    named = {}
    for p in params:
        if not isinstance(p, Parameter):
            raise ContractError("params must be Parameters, a mapping, or a ParamStore")
        named[p.name] = p
    return named


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _raw_backward(loss: Tensor, wanted: dict[int, str],
                  trace_nan: bool = False) -> dict[str, np.ndarray]:
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    found: dict[str, np.ndarray] = {}
    for node in reversed(order):
        nid = id(node)
        g = grads.pop(nid, None)
        if g is None:
            continue
        if nid in wanted:
            found[wanted[nid]] = g
        if node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if trace_nan and not np.isfinite(pg).all():
                raise NumericError(f"non-finite gradient produced by op {node._op!r}")
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return found


def backward(loss: Tensor, params) -> GradientVector:
    """Exact reverse-mode gradient of a scalar loss w.r.t. named parameters.

    Pure: neither the graph nor any Parameter.grad is mutated, so further
    backward calls over the same graph return identical results.
    Parameters not reachable from the loss get zero blocks.
    """
    if not isinstance(loss, Tensor):
        raise ContractError("loss must be a Tensor")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    named = _normalize_params(params)
    if not named:
        raise ContractError("empty parameter set")

    wanted = {id(p.value): name for name, p in named.items()}
    found = _raw_backward(loss, wanted)

    names = tuple(sorted(named))
    offsets: dict[str, tuple[int, int]] = {}
    shapes: dict[str, tuple[int, ...]] = {}
    blocks = []
    pos = 0
    for name in names:
        p = named[name]
        block = found.get(name)
        if block is None:
            block = np.zeros_like(p.data)
        blocks.append(block.reshape(-1))
        shapes[name] = p.data.shape
        offsets[name] = (pos, pos + p.data.size)
        pos += p.data.size
    flat = np.concatenate(blocks) if blocks else np.zeros(0, dtype=DEFAULT_DTYPE)

    if not np.isfinite(flat).all():
        # Re-walk with per-op checking to name the first offending op.
        _raw_backward(loss, wanted, trace_nan=True)
        raise NumericError("non-finite gradient of unknown origin")
    return GradientVector(names, flat, offsets, shapes)


def accumulate_into_grads(gv: GradientVector, params) -> None:
    """Write a GradientVector's blocks into Parameter.grad slots."""
    named = _normalize_params(params)
    for name in gv.param_names:
        named[name].grad = gv.block(name).copy()
