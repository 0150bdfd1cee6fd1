"""Fused LSTM recurrence kernels.

The per-timestep recurrence is the only inner loop in the network that cannot
be expressed as a handful of large array operations, so it gets a dedicated
forward/backward pair. Two interchangeable implementations exist:

* ``numba``: ``@njit`` step loop with one BLAS product per timestep and the
  gate arithmetic fused into a single pass (default when numba imports);
* ``numpy``: a vectorised-over-batch Python loop over timesteps.

Set ``CMF_DISABLE_NUMBA=1`` to force the numpy path, or call
:func:`set_backend` at runtime. Both paths produce the same values up to
floating-point reassociation.

Gate blocks are ordered (input, forget, candidate, output) along the ``4h``
axis. Masked timesteps carry ``(h, c)`` through unchanged and emit zeros.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_DISABLED = os.environ.get("CMF_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
_backend = "numba" if HAVE_NUMBA and not _DISABLED else "numpy"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable")
    _backend = name


# -- numpy reference ------------------------------------------------------

def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lstm_forward_np(xp, w_hh, mask, reverse):
    B, T, H4 = xp.shape
    H = H4 // 4
    out = np.zeros((B, T, H))
    gates = np.zeros((B, T, H4))
    cells = np.zeros((B, T, H))
    h_prev = np.zeros((B, T, H))
    c_prev = np.zeros((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    w_t = w_hh.T
    for s in range(T):
        t = T - 1 - s if reverse else s
        m = mask[:, t][:, None]
        z = xp[:, t] + h @ w_t
        i = _sig(z[:, :H])
        f = _sig(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = _sig(z[:, 3 * H:])
        c_new = f * c + i * g
        h_new = o * np.tanh(c_new)
        h_prev[:, t] = h
        c_prev[:, t] = c
        gates[:, t] = np.concatenate([i, f, g, o], axis=1) * m
        cells[:, t] = c_new * m
        out[:, t] = h_new * m
        h = np.where(m, h_new, h)
        c = np.where(m, c_new, c)
    return out, gates, cells, h_prev, c_prev


def _lstm_backward_np(d_out, w_hh, mask, reverse, gates, cells, h_prev, c_prev):
    B, T, H = d_out.shape
    d_xp = np.zeros((B, T, 4 * H))
    d_w = np.zeros_like(w_hh)
    dh = np.zeros((B, H))
    dc = np.zeros((B, H))
    for s in range(T):
        t = s if reverse else T - 1 - s
        m = mask[:, t][:, None]
        i = gates[:, t, :H]
        f = gates[:, t, H:2 * H]
        g = gates[:, t, 2 * H:3 * H]
        o = gates[:, t, 3 * H:]
        tc = np.tanh(cells[:, t])
        dh_t = d_out[:, t] + dh
        dc_t = dc + dh_t * o * (1.0 - tc * tc)
        dz = np.concatenate([
            dc_t * g * i * (1.0 - i),
            dc_t * c_prev[:, t] * f * (1.0 - f),
            dc_t * i * (1.0 - g * g),
            dh_t * tc * o * (1.0 - o),
        ], axis=1) * m
        d_xp[:, t] = dz
        d_w += dz.T @ h_prev[:, t]
        dh = np.where(m, dz @ w_hh, dh)
        dc = np.where(m, dc_t * f, dc)
    return d_xp, d_w


# -- numba ----------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _sig_nb(x):
        return 0.5 * (1.0 + np.tanh(0.5 * x))

    @njit(cache=True)
    def _lstm_forward_nb(xp, w_hh, mask, reverse):
        B, T, H4 = xp.shape
        H = H4 // 4
        out = np.zeros((B, T, H))
        gates = np.zeros((B, T, H4))
        cells = np.zeros((B, T, H))
        h_prev = np.zeros((B, T, H))
        c_prev = np.zeros((B, T, H))
        h = np.zeros((B, H))
        c = np.zeros((B, H))
        w_t = np.ascontiguousarray(w_hh.T)
        for s in range(T):
            t = T - 1 - s if reverse else s
            z = np.dot(h, w_t)  # one BLAS call per step, gates fused below
            for b in range(B):
                if mask[b, t] == 0.0:
                    continue
                for k in range(H):
                    h_prev[b, t, k] = h[b, k]
                    c_prev[b, t, k] = c[b, k]
                    ig = _sig_nb(xp[b, t, k] + z[b, k])
                    fg = _sig_nb(xp[b, t, H + k] + z[b, H + k])
                    gg = np.tanh(xp[b, t, 2 * H + k] + z[b, 2 * H + k])
                    og = _sig_nb(xp[b, t, 3 * H + k] + z[b, 3 * H + k])
                    cn = fg * c[b, k] + ig * gg
                    gates[b, t, k] = ig
                    gates[b, t, H + k] = fg
                    gates[b, t, 2 * H + k] = gg
                    gates[b, t, 3 * H + k] = og
                    cells[b, t, k] = cn
                    c[b, k] = cn
                    h[b, k] = og * np.tanh(cn)
                    out[b, t, k] = h[b, k]
        return out, gates, cells, h_prev, c_prev

    @njit(cache=True)
    def _lstm_backward_nb(d_out, w_hh, mask, reverse, gates, cells, h_prev, c_prev):
        B, T, H = d_out.shape
        H4 = 4 * H
        d_xp = np.zeros((B, T, H4))
        d_w = np.zeros((H4, H))
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        dz = np.zeros((B, H4))
        for s in range(T):
            t = s if reverse else T - 1 - s
            for b in range(B):
                if mask[b, t] == 0.0:
                    for r in range(H4):
                        dz[b, r] = 0.0
                    continue
                for k in range(H):
                    ig = gates[b, t, k]
                    fg = gates[b, t, H + k]
                    gg = gates[b, t, 2 * H + k]
                    og = gates[b, t, 3 * H + k]
                    tc = np.tanh(cells[b, t, k])
                    dh_t = d_out[b, t, k] + dh[b, k]
                    dc_t = dc[b, k] + dh_t * og * (1.0 - tc * tc)
                    dz[b, k] = dc_t * gg * ig * (1.0 - ig)
                    dz[b, H + k] = dc_t * c_prev[b, t, k] * fg * (1.0 - fg)
                    dz[b, 2 * H + k] = dc_t * ig * (1.0 - gg * gg)
                    dz[b, 3 * H + k] = dh_t * tc * og * (1.0 - og)
                    dc[b, k] = dc_t * fg
                for r in range(H4):
                    d_xp[b, t, r] = dz[b, r]
            d_w += np.dot(dz.T, np.ascontiguousarray(h_prev[:, t]))
            back = np.dot(dz, w_hh)
            for b in range(B):
                if mask[b, t] != 0.0:
                    for k in range(H):
                        dh[b, k] = back[b, k]
        return d_xp, d_w


# -- dispatch -------------------------------------------------------------

def lstm_forward(xp: np.ndarray, w_hh: np.ndarray, mask: np.ndarray, reverse: bool = False):
    """Run the recurrence over pre-projected inputs ``xp`` of shape ``[B, T, 4h]``.

    Returns ``(out, cache)`` where ``out`` is ``[B, T, h]`` and ``cache`` holds
    what :func:`lstm_backward` needs.
    """
    xp = np.ascontiguousarray(xp, dtype=np.float64)
    w_hh = np.ascontiguousarray(w_hh, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    if _backend == "numba":
        res = _lstm_forward_nb(xp, w_hh, mask, bool(reverse))
    else:
        res = _lstm_forward_np(xp, w_hh, mask, bool(reverse))
    return res[0], res[1:]


def lstm_backward(d_out: np.ndarray, w_hh: np.ndarray, mask: np.ndarray, reverse: bool, cache):
    """Gradients w.r.t. the pre-projected inputs and the recurrent weights."""
    d_out = np.ascontiguousarray(d_out, dtype=np.float64)
    w_hh = np.ascontiguousarray(w_hh, dtype=np.float64)
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    if _backend == "numba":
        return _lstm_backward_nb(d_out, w_hh, mask, bool(reverse), *cache)
    return _lstm_backward_np(d_out, w_hh, mask, bool(reverse), *cache)
