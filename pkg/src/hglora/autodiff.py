"""Dense float64 tensors with reverse-mode differentiation.

A small tape-free autodiff engine: every primitive builds an output
``Tensor`` that remembers its parents and a closure computing the
parents' gradients from the output gradient.  ``backward`` walks the
graph in reverse topological order and returns a :class:`GradRecord`
for the trainable leaves.  ``finite_diff_grad`` is the independent
central-difference oracle used to verify every backward rule.
"""

from __future__ import annotations

import contextlib
import math
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "GradRecord",
    "ShapeError",
    "Tensor",
    "backward",
    "corrupt_backward",
    "finite_diff_grad",
    "no_grad",
    "primitive_set",
    "set_validation",
    "topk_indices",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True
_validate = False
_corruptions: dict[str, float] = {}


class ShapeError(ValueError):
    """Operand shapes do not conform; message names the offending shapes."""


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop.

    ``trainable`` marks parameter leaves that should receive gradients.
    Recorded (non-leaf) tensors are treated as immutable; parameter
    leaves may have ``data`` rewritten in place between graph recordings
    (that is how the optimizer and the finite-difference oracle work).
    """

    __slots__ = ("data", "trainable", "name", "op", "parents", "grad_fn", "needs_grad")

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.trainable = trainable
        self.name = name
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn: Callable[[np.ndarray], tuple] | None = None
        self.needs_grad = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = self.name or self.op or "const"
        return f"Tensor({tag}, shape={self.shape}, trainable={self.trainable})"


#: Maps each trainable tensor reached by ``backward`` to its gradient array.
GradRecord = dict


def set_validation(enabled: bool) -> None:
    """Toggle the per-primitive finiteness validation pass."""
    global _validate
    _validate = enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def corrupt_backward(op_name: str, factor: float):
    """Scale the output gradient of every ``op_name`` node (negative-control hook).

    Exists so gradient-checking harnesses can prove they detect a wrong
    backward rule.  Never active outside an enclosing ``with`` block.
    """
    _corruptions[op_name] = factor
    try:
        yield
    finally:
        _corruptions.pop(op_name, None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    if type(data) is not np.ndarray or data.dtype != np.float64:
        data = np.asarray(data, dtype=np.float64)
    if _validate and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"primitive '{op}' produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.trainable = False
    out.name = None
    needs = False
    if _grad_enabled:
        for p in parents:
            if p.needs_grad:
                needs = True
                break
    if needs:
        out.op = op
        out.parents = parents
        out.grad_fn = grad_fn
        out.needs_grad = True
    else:
        out.op = None
        out.parents = ()
        out.grad_fn = None
        out.needs_grad = False
    return out


_PRIMITIVES: dict[str, Callable] = {}


def _primitive(name: str):
    def register(fn):
        _PRIMITIVES[name] = fn
        return fn

    return register


def primitive_set() -> dict[str, Callable]:
    """Catalogue of differentiable primitives (each has a backward rule)."""
    return dict(_PRIMITIVES)


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Undo the limited broadcasting the arithmetic primitives allow.
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    # 1D bias broadcast over leading axes
    axes = tuple(range(grad.ndim - len(shape)))
    return grad.sum(axis=axes)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if a.shape == () or b.shape == ():
        return
    # bias-style: 1D second operand matching the last axis
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


@_primitive("add")
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    data = a.data + b.data

    def grad_fn(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return _result(data, "add", (a, b), grad_fn)


@_primitive("sub")
def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    data = a.data - b.data

    def grad_fn(g):
        return _sum_to(g, a.shape), _sum_to(-g, b.shape)

    return _result(data, "sub", (a, b), grad_fn)


@_primitive("mul")
def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not conform")
    data = a.data * b.data
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _sum_to(g * bd, a.shape), _sum_to(g * ad, b.shape)

    return _result(data, "mul", (a, b), grad_fn)


@_primitive("scale")
def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def grad_fn(g):
        return (g * c,)

    return _result(a.data * c, "scale", (a,), grad_fn)


@_primitive("neg")
def neg(a) -> Tensor:
    return scale(a, -1.0)


@_primitive("matmul")
def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, "matmul", (a, b), grad_fn)


@_primitive("transpose")
def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2D, got {a.shape}")

    def grad_fn(g):
        return (g.T,)

    return _result(a.data.T, "transpose", (a,), grad_fn)


@_primitive("reshape")
def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    old = a.shape

    def grad_fn(g):
        return (g.reshape(old),)

    return _result(a.data.reshape(shape), "reshape", (a,), grad_fn)


@_primitive("concat")
def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input")
    if axis not in (0, 1, -1):
        raise ShapeError(f"concat: unsupported axis {axis}")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]} do not conform") from exc
    ax = axis if axis >= 0 else data.ndim - 1
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(data, "concat", tuple(ts), grad_fn)


@_primitive("gather_rows")
def gather_rows(a, indices) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"gather_rows: expected 2D, got {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError(f"gather_rows: indices must be 1D, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def grad_fn(g):
        ga = np.zeros(shape)
        np.add.at(ga, idx, g)
        return (ga,)

    return _result(a.data[idx], "gather_rows", (a,), grad_fn)


@_primitive("slice_last")
def slice_last(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= start < stop <= a.shape[-1]):
        raise ShapeError(f"slice_last: [{start}:{stop}] invalid for shape {a.shape}")
    shape = a.shape

    def grad_fn(g):
        ga = np.zeros(shape)
        ga[..., start:stop] = g
        return (ga,)

    return _result(a.data[..., start:stop], "slice_last", (a,), grad_fn)


@_primitive("softmax")
def softmax(a, mask=None) -> Tensor:
    """Row-wise softmax over the last axis.

    ``mask`` (boolean, broadcastable to ``a``) marks valid positions;
    invalid positions get probability exactly 0.  A row with no valid
    position yields all zeros.
    """
    a = _as_tensor(a)
    scores = a.data
    if mask is None:
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        p = e / e.sum(axis=-1, keepdims=True)
    else:
        valid = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
        shifted = np.where(valid, scores, -np.inf)
        rowmax = np.max(shifted, axis=-1, keepdims=True)
        rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
        e = np.where(valid, np.exp(shifted - rowmax), 0.0)
        denom = e.sum(axis=-1, keepdims=True)
        p = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def grad_fn(g):
        dot = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - dot),)

    return _result(p, "softmax", (a,), grad_fn)


@_primitive("layer_norm")
def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    data = xhat * gamma.data + beta.data
    gd = gamma.data

    def grad_fn(g):
        dxhat = g * gd
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(data, "layer_norm", (x, gamma, beta), grad_fn)


@_primitive("gelu")
def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = x * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _result(data, "gelu", (a,), grad_fn)


@_primitive("leaky_relu")
def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    factor = np.where(x > 0, 1.0, float(slope))

    def grad_fn(g):
        return (g * factor,)

    return _result(x * factor, "leaky_relu", (a,), grad_fn)


@_primitive("l2_normalize")
def l2_normalize(a) -> Tensor:
    """Normalize along the last axis; zero vectors map to zero with a warning."""
    a = _as_tensor(a)
    norms = np.linalg.norm(a.data, axis=-1, keepdims=True)
    zero = norms == 0.0
    if np.any(zero):
        warnings.warn("l2_normalize: zero vector mapped to zero", RuntimeWarning, stacklevel=2)
    safe = np.where(zero, 1.0, norms)
    y = a.data / safe

    def grad_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        gx = (g - y * dot) / safe
        return (np.where(zero, 0.0, gx),)

    return _result(y, "l2_normalize", (a,), grad_fn)


def _reduce(a, axis, op_name: str, mean: bool):
    a = _as_tensor(a)
    if axis is not None and not (-a.ndim <= axis < a.ndim):
        raise ShapeError(f"{op_name}: axis {axis} invalid for shape {a.shape}")
    shape = a.shape
    if axis is None:
        data = a.data.mean() if mean else a.data.sum()
        count = a.data.size
    else:
        data = a.data.mean(axis=axis) if mean else a.data.sum(axis=axis)
        count = shape[axis]

    def grad_fn(g):
        if axis is None:
            full = np.full(shape, g)
        else:
            full = np.repeat(np.expand_dims(g, axis), shape[axis], axis=axis)
        return (full / count if mean else full,)

    return _result(data, op_name, (a,), grad_fn)


@_primitive("mean")
def mean(a, axis: int | None = None) -> Tensor:
    return _reduce(a, axis, "mean", mean=True)


@_primitive("sum")
def tsum(a, axis: int | None = None) -> Tensor:
    return _reduce(a, axis, "sum", mean=False)


@_primitive("exp")
def texp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def grad_fn(g):
        return (g * data,)

    return _result(data, "exp", (a,), grad_fn)


@_primitive("log")
def tlog(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data

    def grad_fn(g):
        return (g / x,)

    return _result(np.log(x), "log", (a,), grad_fn)


@_primitive("clamp_max")
def clamp_max(a, bound: float) -> Tensor:
    a = _as_tensor(a)
    keep = a.data <= bound

    def grad_fn(g):
        return (g * keep,)

    return _result(np.minimum(a.data, bound), "clamp_max", (a,), grad_fn)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.needs_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> GradRecord:
    """Reverse-mode gradients of a scalar loss for every trainable leaf reached.

    Returns a dict mapping trainable ``Tensor`` leaves to gradient arrays
    of identical shape.  A loss detached from all trainables yields an
    empty record.
    """
    if loss.shape not in ((), (1,)):
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    record: GradRecord = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.trainable:
            record[node] = record[node] + g if node in record else np.array(g, copy=True)
        if node.grad_fn is None:
            continue
        if node.op in _corruptions:
            g = g * _corruptions[node.op]
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if not parent.needs_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, copy=True) if np.shape(pg) == () else pg
    return record


def finite_diff_grad(
    loss_fn: Callable[[], float],
    params: Iterable[Tensor],
    epsilon: float,
) -> GradRecord:
    """Central-difference gradients (f(θ+ε) − f(θ−ε)) / 2ε per coordinate.

    ``loss_fn`` takes no arguments and must re-evaluate the loss from the
    live parameter tensors, which are perturbed in place and restored.
    This is the independent oracle for ``backward``; it never touches the
    recorded graph.
    """
    if epsilon <= 0:
        raise ValueError("finite_diff_grad: epsilon must be positive")
    record: GradRecord = {}
    for p in params:
        flat = p.data.reshape(-1)
        grad = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(loss_fn())
            flat[i] = orig - epsilon
            f_minus = float(loss_fn())
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError(
                    f"finite_diff_grad: non-finite loss probing {p.name or 'param'}[{i}]"
                )
            grad[i] = (f_plus - f_minus) / (2.0 * epsilon)
        record[p] = grad.reshape(p.shape)
    return record


def topk_indices(row, k: int, excluded: Iterable[int] = ()) -> tuple[int, ...]:
    """Indices of the k largest row entries, skipping ``excluded``.

    Ties break toward the lowest index.  Fewer than k candidates returns
    all of them; an empty candidate set returns ().  Selection is not
    differentiable: gradients flow through selected values only.
    """
    if k < 1:
        raise ValueError("topk_indices: k must be >= 1")
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise ShapeError(f"topk_indices: expected 1D row, got {row.shape}")
    banned = set(int(i) for i in excluded)
    candidates = [i for i in range(row.size) if i not in banned]
    if not candidates:
        return ()
    values = row[candidates]
    if not np.all(np.isfinite(values)):
        raise ValueError("topk_indices: non-finite candidate values")
    order = np.argsort(-values, kind="stable")
    return tuple(candidates[int(j)] for j in order[:k])
