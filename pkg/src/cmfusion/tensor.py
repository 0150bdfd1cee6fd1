"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is rebuilt on every forward pass. Each non-leaf tensor keeps a
reference to its parents and a closure mapping the upstream gradient to one
gradient per parent. ``Tensor.backward`` walks the graph once in reverse
topological order.

Broadcasting is deliberately limited to adding a bias vector along the
trailing axis; every other shape mismatch raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "ContractError",
    "NumericalError",
    "no_grad",
    "is_grad_enabled",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "tanh",
    "sigmoid",
    "relu",
    "concat",
    "slice_last",
    "mean",
    "sum",
    "softmax",
    "log_softmax",
    "take_last",
    "layer_norm",
    "finite_difference_check",
    "gradient_check",
    "GradCheckResult",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NumericalError(ArithmeticError):
    """A non-finite value showed up where a finite one was required."""


_GRAD_ENABLED = True
_KINK_LOG: list[bytes] | None = None


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(s <= 0 for s in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- conveniences -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    # -- differentiation --------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar output, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != output shape {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; recurrent graphs are deep enough to blow the recursion limit
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if np.isscalar(x):
        return Tensor(np.full(like.shape, float(x)))
    return Tensor(x)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ----------------------------------------------------------

def _check_binary(a: Tensor, b: Tensor, op: str, allow_bias: bool) -> bool:
    """Return True when ``b`` is a trailing-axis bias vector for ``a``."""
    if a.shape == b.shape:
        return False
    if allow_bias and b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _check_binary(a, b, "add", allow_bias=True)
    lead = tuple(range(a.ndim - 1))

    def backward(g):
        return g, (g.sum(axis=lead) if bias else g)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _check_binary(a, b, "sub", allow_bias=True)
    lead = tuple(range(a.ndim - 1))

    def backward(g):
        return g, -(g.sum(axis=lead) if bias else g)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bias = _check_binary(a, b, "mul", allow_bias=True)
    lead = tuple(range(a.ndim - 1))
    ad, bd = a.data, b.data

    def backward(g):
        gb = g * ad
        return g * bd, (gb.sum(axis=lead) if bias else gb)

    return Tensor._from_op(ad * bd, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = _sigmoid(a.data)
    return Tensor._from_op(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    on = a.data > 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(on.tobytes())
    return Tensor._from_op(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,), "relu")


# -- linear algebra and shape ---------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product.

    Supports ``[m,k] @ [k,n]``, batched ``[..., m, k] @ [k, n]`` (a weight
    shared across the batch) and ``[B, m, k] @ [B, k, n]``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim > 2:
            k = ad.shape[-1]
            gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return Tensor._from_op(out, (a, b), backward, "matmul")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got shape {a.shape}")
    return Tensor._from_op(np.swapaxes(a.data, -1, -2), (a,),
                           lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return np.split(g, cuts, axis=ax)

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax),
                           tuple(tensors), backward, "concat")


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[..., start:stop]``."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for shape {a.shape}")
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return Tensor._from_op(a.data[..., start:stop], (a,), backward, "slice")


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward, "sum")


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- normalisations -------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(y, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(y, (x,), backward, "log_softmax")


def take_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``x[..., index[...]]`` along the trailing axis."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"take_last: index shape {index.shape} does not match {x.shape[:-1]}")
    idx = index[..., None]
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.put_along_axis(full, idx, g[..., None], axis=-1)
        return (full,)

    return Tensor._from_op(np.take_along_axis(x.data, idx, axis=-1)[..., 0], (x,), backward, "take")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise over the trailing axis (population variance), then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: params {gamma.shape}/{beta.shape} do not match features of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._from_op(xhat * gd + beta.data, (x, gamma, beta), backward, "layer_norm")


# -- gradient verification ------------------------------------------------

@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern of every rectifier evaluated inside the block."""
    global _KINK_LOG
    prev = _KINK_LOG
    _KINK_LOG = log = []
    try:
        yield log
    finally:
        _KINK_LOG = prev


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None
    n_checked: int
    n_step_reductions: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def _evaluate(f: Callable[[], Tensor | float]) -> tuple[float, list[bytes]]:
    with record_kinks() as log:
        out = f()
        val = float(out.data if isinstance(out, Tensor) else out)
    return val, log


def gradient_check(f: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
                   eps: float = 1e-6, method: str = "central", kink_guard: bool = True,
                   max_reductions: int = 3, stop_above: float | None = None,
                   value: Callable[[], float] | None = None) -> GradCheckResult:
    """Compare backprop gradients with central differences, entry by entry.

    ``f`` recomputes the scalar objective from the current parameter values;
    parameters are perturbed in place and restored afterwards.

    ``method="central"`` uses ``(f(x+h) - f(x-h)) / 2h``. ``"richardson"``
    combines the central differences at ``h`` and ``h/2`` as
    ``(4 D(h/2) - D(h)) / 3``, cancelling the ``h^2`` truncation term.

    With ``kink_guard`` the step is divided by 10 (at most ``max_reductions``
    times) whenever a perturbed evaluation flips the sign of any rectifier
    input, since the difference quotient is meaningless across a kink.

    ``stop_above`` ends the scan at the first entry whose error exceeds it.

    ``value``, if given, is used instead of ``f`` for the perturbed evaluations.
    It must compute the same function (up to an additive constant) and exists
    so a caller can evaluate the objective more accurately than float64 allows.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"eps must lie in (0, 1e-3], got {eps}")
    if method not in ("central", "richardson"):
        raise ValueError(f"unknown method {method!r}")
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]

    for _, p in named:
        p.grad = None
    loss = f()
    if loss.data.size != 1:
        raise ContractError(f"objective must be scalar, got shape {loss.shape}")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for _, p in named]
    steps = (1.0,) if method == "central" else (1.0, 0.5)

    worst, worst_name, worst_idx, count, reductions = 0.0, None, None, 0, 0
    with no_grad():
        fd = value or f
        _, base = _evaluate(fd)
        for (name, p), ga in zip(named, analytic):
            flat = p.data.reshape(-1)
            for k in range(flat.size):
                idx = tuple(int(i) for i in np.unravel_index(k, p.shape))
                orig = flat[k]
                h = eps
                for attempt in range(max_reductions + 1):
                    diffs, crossed = [], False
                    for s in steps:
                        flat[k] = orig + s * h
                        fp, kp = _evaluate(fd)
                        flat[k] = orig - s * h
                        fm, km = _evaluate(fd)
                        flat[k] = orig
                        if not (np.isfinite(fp) and np.isfinite(fm)):
                            raise NumericalError(f"non-finite objective while perturbing {name}{list(idx)}")
                        crossed = crossed or kp != base or km != base
                        diffs.append((fp - fm) / (2.0 * s * h))
                    if not (kink_guard and crossed) or attempt == max_reductions:
                        break
                    h /= 10.0
                    reductions += 1
                num = diffs[0] if method == "central" else (4.0 * diffs[1] - diffs[0]) / 3.0
                an = ga.reshape(-1)[k]
                err = abs(an - num) / max(abs(an), abs(num), 1e-12)
                count += 1
                if err > worst or worst_name is None:
                    worst, worst_name, worst_idx = err, name, idx
                if stop_above is not None and err > stop_above:
                    return GradCheckResult(float(worst), worst_name, worst_idx, count, reductions)
    return GradCheckResult(float(worst), worst_name, worst_idx, count, reductions)


def finite_difference_check(f: Callable[[], Tensor], params: Sequence[Tensor] | dict[str, Tensor],
                            eps: float = 1e-6, method: str = "central") -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return gradient_check(f, params, eps, method=method).max_rel_error
