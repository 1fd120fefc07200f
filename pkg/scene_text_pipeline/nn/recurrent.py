# nn/recurrent.py

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from scipy.special import expit

from ..services.errors import ShapeMismatch

# Gate blocks are stacked in the order: input, forget, output, candidate.
LstmParams = Dict[str, np.ndarray]  # keys "W" [4h, D], "U" [4h, h], "b" [4h]


@dataclass
class LstmCache:
    x: np.ndarray
    gates: np.ndarray  # [T, 4h] post-activation i, f, o, g
    cells: np.ndarray  # [T, h]
    tanh_cells: np.ndarray
    h_prev: np.ndarray  # [T, h] hidden state entering each step
    c_prev: np.ndarray
    params: LstmParams


def lstm_forward(x: np.ndarray, params: LstmParams) -> Tuple[np.ndarray, LstmCache]:
    """One direction of an LSTM over x [T, D]; zero initial state, no peepholes."""
    w, u, b = params["W"], params["U"], params["b"]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"lstm: input {x.shape} does not match weight {w.shape}")
    steps = x.shape[0]
    hidden = u.shape[1]

    pre = x @ w.T + b
    gates = np.empty((steps, 4 * hidden), dtype=pre.dtype)
    cells = np.empty((steps, hidden), dtype=pre.dtype)
    tanh_cells = np.empty_like(cells)
    h_prev = np.zeros((steps, hidden), dtype=pre.dtype)
    c_prev = np.zeros_like(h_prev)
    outputs = np.empty_like(cells)

    h = np.zeros(hidden, dtype=pre.dtype)
    c = np.zeros(hidden, dtype=pre.dtype)
    for t in range(steps):
        h_prev[t], c_prev[t] = h, c
        z = pre[t] + u @ h
        gates[t, : 3 * hidden] = expit(z[: 3 * hidden])
        gates[t, 3 * hidden:] = np.tanh(z[3 * hidden:])
        i, f, o, g = np.split(gates[t], 4)
        c = f * c + i * g
        tanh_cells[t] = np.tanh(c)
        h = o * tanh_cells[t]
        cells[t] = c
        outputs[t] = h
    return outputs, LstmCache(x, gates, cells, tanh_cells, h_prev, c_prev, params)


def lstm_backward(dh_seq: np.ndarray, cache: LstmCache) -> Tuple[np.ndarray, LstmParams]:
    """BPTT through one direction. Returns (dx, {"W", "U", "b"} gradients)."""
    u = cache.params["U"]
    steps, hidden = cache.cells.shape
    dz = np.empty((steps, 4 * hidden), dtype=dh_seq.dtype)
    dh_next = np.zeros(hidden, dtype=dh_seq.dtype)
    dc_next = np.zeros(hidden, dtype=dh_seq.dtype)

    for t in range(steps - 1, -1, -1):
        i, f, o, g = np.split(cache.gates[t], 4)
        dh = dh_seq[t] + dh_next
        tc = cache.tanh_cells[t]
        dc = dh * o * (1 - tc * tc) + dc_next
        dz[t, :hidden] = dc * g * i * (1 - i)
        dz[t, hidden:2 * hidden] = dc * cache.c_prev[t] * f * (1 - f)
        dz[t, 2 * hidden:3 * hidden] = dh * tc * o * (1 - o)
        dz[t, 3 * hidden:] = dc * i * (1 - g * g)
        dc_next = dc * f
        dh_next = u.T @ dz[t]

    grads = {"W": dz.T @ cache.x, "U": dz.T @ cache.h_prev, "b": dz.sum(axis=0)}
    return dz @ cache.params["W"], grads


@dataclass
class BlstmCache:
    forward: LstmCache
    backward: LstmCache
    hidden: int


def blstm_layer(x: np.ndarray, fwd: LstmParams, bwd: LstmParams) -> Tuple[np.ndarray, BlstmCache]:
    """[T, D] -> [T, 2h]: forward-time outputs, then the reversed pass re-reversed, per timestep."""
    out_f, cache_f = lstm_forward(x, fwd)
    out_b, cache_b = lstm_forward(x[::-1], bwd)
    return np.concatenate([out_f, out_b[::-1]], axis=1), BlstmCache(cache_f, cache_b, out_f.shape[1])


def blstm_backward(dy: np.ndarray, cache: BlstmCache) -> Tuple[np.ndarray, LstmParams, LstmParams]:
    """Returns (dx, forward-direction grads, backward-direction grads)."""
    h = cache.hidden
    dx_f, grads_f = lstm_backward(dy[:, :h], cache.forward)
    dx_b, grads_b = lstm_backward(dy[::-1, h:], cache.backward)
    return dx_f + dx_b[::-1], grads_f, grads_b
