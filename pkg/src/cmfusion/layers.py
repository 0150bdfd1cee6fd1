"""Parameterised building blocks: affine maps, layer norm, feed-forward, LSTMs."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import kernels
from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Container that discovers parameters and sub-modules from its attributes.

    Discovery follows attribute assignment order, which makes parameter naming
    and ordering deterministic.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.d_in, self.d_out = d_in, d_out
        self.W = _param(xavier_uniform(rng, d_out, d_in))
        self.b = _param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    """``x W^T + b`` over the trailing axis."""
    if x.shape[-1] != layer.d_in:
        raise ShapeError(f"linear: input features {x.shape} do not match weight {layer.W.shape}")
    if x.ndim == 1:
        return _squeeze0(linear_forward(layer, _unsqueeze0(x)))
    return T.add(T.matmul(x, T.transpose(layer.W)), layer.b)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        if eps <= 0:
            raise ValueError("layer norm eps must be positive")
        self.eps = eps
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


def layer_norm(params: LayerNorm, x: Tensor) -> Tensor:
    return params(x)


class FeedForward(Module):
    """Linear, rectifier, linear; outer widths equal ``d``."""

    def __init__(self, d: int, inner: int | None, rng: np.random.Generator):
        inner = d if inner is None else inner
        self.fc1 = Linear(d, inner, rng)
        self.fc2 = Linear(inner, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


def feed_forward(params: FeedForward, x: Tensor) -> Tensor:
    return params(x)


class LSTMCell(Module):
    """Weights for one recurrent direction. Gate order: input, forget, candidate, output.

    Each gate block is its own ``[hidden, fan_in]`` Glorot-initialised matrix.
    """

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.d_in, self.hidden = d_in, hidden
        self.W_ih = _param(np.concatenate([xavier_uniform(rng, hidden, d_in) for _ in range(4)]))
        self.W_hh = _param(np.concatenate([xavier_uniform(rng, hidden, hidden) for _ in range(4)]))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        self.b = _param(b)


def lstm_cell_step(cell: LSTMCell, x_t: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    """One timestep built from primitive ops; the fused kernel must agree with it."""
    if x_t.shape[-1] != cell.d_in or h_prev.shape[-1] != cell.hidden or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"lstm step: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} vs cell in={cell.d_in} h={cell.hidden}")
    z = T.add(T.add(T.matmul(x_t, T.transpose(cell.W_ih)), T.matmul(h_prev, T.transpose(cell.W_hh))), cell.b)
    h = cell.hidden
    i = T.sigmoid(T.slice_last(z, 0, h))
    f = T.sigmoid(T.slice_last(z, h, 2 * h))
    g = T.tanh(T.slice_last(z, 2 * h, 3 * h))
    o = T.sigmoid(T.slice_last(z, 3 * h, 4 * h))
    c = T.add(T.mul(f, c_prev), T.mul(i, g))
    return T.mul(o, T.tanh(c)), c


def lstm_recurrence(xp: Tensor, w_hh: Tensor, mask: np.ndarray, reverse: bool = False) -> Tensor:
    """Differentiable wrapper around the fused kernel; ``xp`` is ``[B, T, 4h]``."""
    out, cache = kernels.lstm_forward(xp.data, w_hh.data, mask, reverse)
    w = w_hh.data

    def backward(g):
        return kernels.lstm_backward(g, w, mask, reverse, cache)

    return Tensor._from_op(out, (xp, w_hh), backward, "lstm")


def _check_sequence(X: Tensor, mask: np.ndarray | None, d_in: int) -> np.ndarray:
    if X.ndim != 3:
        raise ShapeError(f"sequence input must be [B, T, d], got {X.shape}")
    if X.shape[-1] != d_in:
        raise ShapeError(f"sequence features {X.shape} do not match cell input width {d_in}")
    if mask is None:
        return np.ones(X.shape[:2])
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != X.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match sequence {X.shape[:2]}")
    return mask


def lstm_forward(cell: LSTMCell, X: Tensor, mask: np.ndarray | None = None, reverse: bool = False) -> Tensor:
    """Unidirectional pass over ``X: [B, T, d_in]`` returning ``[B, T, h]``."""
    mask = _check_sequence(X, mask, cell.d_in)
    xp = T.add(T.matmul(X, T.transpose(cell.W_ih)), cell.b)
    return lstm_recurrence(xp, cell.W_hh, mask, reverse)


def bilstm_forward(fwd: LSTMCell, bwd: LSTMCell, X: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Forward pass concatenated with the time-reversed pass: ``[B, T, 2h]``.

    Also accepts a single sequence ``[T, d_in]``.
    """
    if X.ndim == 2:
        m = None if mask is None else np.asarray(mask)[None]
        out = bilstm_forward(fwd, bwd, _unsqueeze0(X), m)
        return _squeeze0(out)
    if X.shape[1] < 1:
        raise ShapeError("empty sequence")
    mask = _check_sequence(X, mask, fwd.d_in)
    return T.concat([lstm_forward(fwd, X, mask), lstm_forward(bwd, X, mask, reverse=True)], axis=-1)


def bilstm_reference(fwd: LSTMCell, bwd: LSTMCell, X: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Step-by-step BiLSTM from :func:`lstm_cell_step`, for cross-checking the kernel."""
    mask = _check_sequence(X, mask, fwd.d_in)
    B, steps, _ = X.shape
    halves = []
    for cell, order in ((fwd, range(steps)), (bwd, reversed(range(steps)))):
        h = Tensor(np.zeros((B, cell.hidden)))
        c = Tensor(np.zeros((B, cell.hidden)))
        outs: list[Tensor | None] = [None] * steps
        for t in order:
            x_t = _select_step(X, t)
            h_new, c_new = lstm_cell_step(cell, x_t, h, c)
            m = Tensor(np.repeat(mask[:, t:t + 1], cell.hidden, axis=1))
            keep = Tensor(1.0 - m.data)
            outs[t] = T.mul(h_new, m)
            h = T.add(T.mul(h_new, m), T.mul(h, keep))
            c = T.add(T.mul(c_new, m), T.mul(c, keep))
        halves.append(_stack_steps(outs))
    return T.concat(halves, axis=-1)


class LSTM(Module):
    """Unidirectional LSTM layer."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.cell = LSTMCell(d_in, hidden, rng)

    def __call__(self, X: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return lstm_forward(self.cell, X, mask)


class BiLSTM(Module):
    """Bidirectional LSTM whose output width is ``d_out`` (``d_out/2`` per direction)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        if d_out % 2:
            raise ValueError(f"bidirectional output width must be even, got {d_out}")
        self.fwd = LSTMCell(d_in, d_out // 2, rng)
        self.bwd = LSTMCell(d_in, d_out // 2, rng)

    def __call__(self, X: Tensor, mask: np.ndarray | None = None) -> Tensor:
        return bilstm_forward(self.fwd, self.bwd, X, mask)


# -- small shape helpers ----------------------------------------------------

def _unsqueeze0(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data[None], (x,), lambda g: (g[0],), "unsqueeze")


def _squeeze0(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data[0], (x,), lambda g: (g[None],), "squeeze")


def _select_step(X: Tensor, t: int) -> Tensor:
    shape = X.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, t] = g
        return (full,)

    return Tensor._from_op(X.data[:, t], (X,), backward, "select")


def _stack_steps(steps: list[Tensor]) -> Tensor:
    def backward(g):
        return [g[:, t] for t in range(len(steps))]

    return Tensor._from_op(np.stack([s.data for s in steps], axis=1), tuple(steps), backward, "stack")
