"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations record themselves on the innermost active :class:`Tape`.  Outside
of a tape nothing is recorded, which doubles as a cheap no-grad mode for
inference and finite-difference probing.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_all(x * x)
    >>> backward(loss, tape)[x]
    array([2., 4.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """Dense float array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


class Node(NamedTuple):
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Leaf gradients accumulate across :func:`backward` calls; call
    :meth:`zero_grad` between passes.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def leaves(self) -> list[Tensor]:
        produced = {id(n.output) for n in self.nodes}
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def zero_grad(self) -> None:
        for t in self.leaves():
            t.grad = None

    def clear(self) -> None:
        self.nodes.clear()


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Wrap ``data`` as an op output and record it if any input needs a gradient."""
    tape = _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data)
    out.requires_grad = needs
    out.grad = None
    out.name = None
    if needs:
        tape.record(Node(inputs, out, backward_fn, op))
    return out


def custom_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn, op: str = "custom") -> Tensor:
    """Record a user-defined primitive; ``backward_fn(g)`` returns one gradient per input."""
    return _result(np.asarray(data), tuple(inputs), backward_fn, op)


# ---------------------------------------------------------------------------
# broadcasting


@lru_cache(maxsize=1024)
def broadcast_shape(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Shape of ``a (op) b`` under leading-axis stretching.

    Trailing axes must agree exactly; an operand may only stretch (size 1 or
    missing) on a contiguous run of leading axes.
    """
    ndim = max(len(a), len(b))
    pa = (1,) * (ndim - len(a)) + tuple(a)
    pb = (1,) * (ndim - len(b)) + tuple(b)
    out = tuple(max(x, y) for x, y in zip(pa, pb))
    for padded in (pa, pb):
        matched = False
        for dim, target in zip(padded, out):
            if dim == 1 and not matched:
                continue
            if dim == target:
                matched = True
            else:
                raise ShapeError(f"cannot broadcast shapes {tuple(a)} and {tuple(b)}")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow for large |x|
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    # keep saturated values strictly inside (0, 1)
    info = np.finfo(y.dtype)
    return np.clip(y, info.tiny, 1.0 - info.epsneg)


def sigmoid(a: Tensor) -> Tensor:
    y = _stable_sigmoid(a.data)
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * on,), "relu")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a: Tensor, b: Tensor | float | None = None) -> Tensor:
    """Dispatch an elementwise primitive by name.

    ``scale`` takes a python number as ``b``; the binary kinds take tensors.
    """
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, _lift(b, a))
    if op_kind == "scale":
        if b is None:
            raise ValueError("scale needs a factor")
        return scale(a, float(b))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of rank-2/rank-3 tensors; a rank-2 operand is shared across the batch."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul needs rank-2 or rank-3 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        if a.ndim == 2 and ga.ndim == 3:
            ga = ga.sum(axis=0)
        if b.ndim == 2 and gb.ndim == 3:
            gb = gb.sum(axis=0)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward_fn, "matmul")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}") from exc
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, tensors, backward_fn, "concat")


def sum_all(a: Tensor) -> Tensor:
    return _result(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    return _result(np.mean(a.data), (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),), "mean")


# ---------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward_fn, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit population variance, then scale and shift."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} do not match {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    lead = tuple(range(x.ndim - 1))

    def backward_fn(g):
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward_fn, "layer_norm")


# ---------------------------------------------------------------------------
# stochastic regularisers


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1/(1-rate)`` so eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def gaussian_noise(x: Tensor, sigma: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    if sigma < 0:
        raise ValueError(f"noise sigma must be non-negative, got {sigma}")
    if not training or sigma == 0.0:
        return x
    noise = rng.normal(0.0, sigma, size=x.shape).astype(x.dtype)
    return _result(x.data + noise, (x,), lambda g: (g,), "gaussian_noise")


def stochastic(op_kind: str, x: Tensor, training: bool, rng, *, rate: float = 0.1, sigma: float = 0.1) -> Tensor:
    if op_kind == "dropout":
        return dropout(x, rate, training, rng)
    if op_kind == "gaussian_noise":
        return gaussian_noise(x, sigma, training, rng)
    raise ValueError(f"unknown stochastic op {op_kind!r}")


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, tape: Tape, wrt: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Gradients are accumulated into ``.grad`` of every requires_grad leaf and
    returned as a mapping.  Tensors listed in ``wrt`` that did not take part
    in the computation receive zero gradients.
    """
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t

    result: dict[Tensor, np.ndarray] = {}
    if loss.requires_grad and id(loss) not in produced:
        leaves[id(loss)] = loss
    for key, t in leaves.items():
        g = np.asarray(grads[key], dtype=t.dtype).reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g
        result[t] = t.grad
    for t in wrt:
        if id(t) not in leaves:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            result[t] = t.grad
    return result


# ---------------------------------------------------------------------------
# finite-difference checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float

    @property
    def failed(self) -> list[str]:
        return [name for name, err in self.max_rel_error.items() if not err < self.tol]

    @property
    def passed(self) -> bool:
        return not self.failed

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_elements: int | None = None,
    seed: int = 0,
    refine_eps: float | None = 1e-3,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` must rebuild its scalar output from the current ``params`` data and be
    deterministic.  Elements are probed in place and restored.  With
    ``max_elements`` set, a seeded subset of each parameter is probed.

    The two-point central difference has an absolute noise floor of roughly
    ``ulp(f) / eps``, which swamps gradients near 1e-7.  Elements that miss
    ``tol`` are therefore re-estimated with the four-point central stencil at
    ``refine_eps`` (truncation error O(h^4)); pass ``refine_eps=None`` to
    disable this.
    """
    for t in params.values():
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f()
    grads = backward(loss, tape, wrt=params.values())

    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        analytic = grads[t].reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        numeric = np.array([_central(f, flat, i, eps) for i in idx])
        errors = relative_error(analytic[idx], numeric)
        if refine_eps is not None:
            for j in np.flatnonzero(~(errors < tol)):
                i = idx[j]
                d1 = _central(f, flat, i, refine_eps)
                d2 = _central(f, flat, i, 2.0 * refine_eps)
                errors[j] = relative_error(analytic[i], (4.0 * d1 - d2) / 3.0)
        report[name] = float(errors.max()) if idx.size else 0.0
    return GradCheckReport(report, tol)


def _central(f: Callable[[], Tensor], flat: np.ndarray, i: int, h: float) -> float:
    orig = flat[i]
    flat[i] = orig + h
    up = float(f().data)
    flat[i] = orig - h
    down = float(f().data)
    flat[i] = orig
    return (up - down) / (2.0 * h)
