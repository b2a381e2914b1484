"""Sequence encoder layers built on the autodiff graph.

Shape conventions:
  - a batch of sequences is (batch, features, time), mirroring the
    per-example column layout (features x time)
  - per-timestep LSTM state is (batch, hidden)
  - sequence masks are plain float arrays of shape (batch, time) with 1.0
    at real tokens and 0.0 at padding; they are constants, never learned
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Node


@dataclass
class LinearParams:
    """Left-multiplying map: weight (out, in), bias (out, 1)."""
    weight: Any
    bias: Any


@dataclass
class LstmParams:
    """Gate transforms stacked as [input, forget, cell, output] blocks.

    w_in is (in_dim, 4*hidden), w_rec is (hidden, 4*hidden), bias (4*hidden,).
    """
    w_in: Any
    w_rec: Any
    bias: Any

    @property
    def hidden(self) -> int:
        return self.w_rec.shape[0] if not isinstance(self.w_rec, Node) else self.w_rec.value.shape[0]


@dataclass
class HighwayLayerParams:
    transform: LinearParams
    gate: LinearParams


@dataclass
class HighwayParams:
    layers: tuple[HighwayLayerParams, ...]


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int, dtype) -> LinearParams:
    weight = xavier_uniform(rng, (out_dim, in_dim), in_dim, out_dim, dtype)
    bias = np.zeros((out_dim, 1), dtype=dtype)
    return LinearParams(weight, bias)


def init_lstm(rng: np.random.Generator, in_dim: int, hidden: int, dtype) -> LstmParams:
    w_in = xavier_uniform(rng, (in_dim, 4 * hidden), in_dim, 4 * hidden, dtype)
    w_rec = xavier_uniform(rng, (hidden, 4 * hidden), hidden, 4 * hidden, dtype)
    bias = np.zeros(4 * hidden, dtype=dtype)
    return LstmParams(w_in, w_rec, bias)


def init_highway(rng: np.random.Generator, dim: int, n_layers: int, dtype) -> HighwayParams:
    layers = tuple(
        HighwayLayerParams(
            transform=init_linear(rng, dim, dim, dtype),
            gate=init_linear(rng, dim, dim, dtype),
        )
        for _ in range(n_layers)
    )
    return HighwayParams(layers)


def _lstm_cell(params: LstmParams, gates_x: Node, h_prev: Node, c_prev: Node,
               hidden: int) -> tuple[Node, Node]:
    """Gate math given the precomputed input projection x_t @ w_in + bias."""
    gates = ad.add(gates_x, ad.matmul(h_prev, params.w_rec))
    # One sigmoid over all four gate blocks; the candidate block's sigmoid
    # output is simply never sliced out.
    squashed = ad.sigmoid(gates)
    in_gate = ad.slice_axis(squashed, 1, 0, hidden)
    forget_gate = ad.slice_axis(squashed, 1, hidden, 2 * hidden)
    candidate = ad.tanh(ad.slice_axis(gates, 1, 2 * hidden, 3 * hidden))
    out_gate = ad.slice_axis(squashed, 1, 3 * hidden, 4 * hidden)
    c_t = ad.add(ad.mul(forget_gate, c_prev), ad.mul(in_gate, candidate))
    h_t = ad.mul(out_gate, ad.tanh(c_t))
    return h_t, c_t


def lstm_step(params: LstmParams, x_t: Node, h_prev: Node, c_prev: Node,
              hidden: int) -> tuple[Node, Node]:
    """One LSTM cell update; x_t is (batch, in_dim), states (batch, hidden)."""
    gates_x = ad.add(ad.matmul(x_t, params.w_in), params.bias)
    return _lstm_cell(params, gates_x, h_prev, c_prev, hidden)


def _scan(params: LstmParams, gates_x: list[Node], mask: np.ndarray,
          hidden: int, reverse: bool) -> list[Node]:
    """Run one direction, freezing state and zeroing outputs past the mask."""
    batch = gates_x[0].value.shape[0]
    dtype = gates_x[0].value.dtype
    h = ad.constant(np.zeros((batch, hidden), dtype=dtype))
    c = ad.constant(np.zeros((batch, hidden), dtype=dtype))
    order = range(len(gates_x) - 1, -1, -1) if reverse else range(len(gates_x))
    outputs: list[Node | None] = [None] * len(gates_x)
    for t in order:
        h_new, c_new = _lstm_cell(params, gates_x[t], h, c, hidden)
        col = mask[:, t:t + 1]
        if col.all():
            h, c = h_new, c_new
            outputs[t] = h
        else:
            keep = ad.constant(col.astype(dtype))
            drop = ad.constant((1.0 - col).astype(dtype))
            h = ad.add(ad.mul(keep, h_new), ad.mul(drop, h))
            c = ad.add(ad.mul(keep, c_new), ad.mul(drop, c))
            outputs[t] = ad.mul(keep, h)
    return outputs  # type: ignore[return-value]


def bilstm_encode(fwd: LstmParams, bwd: LstmParams, seq: Node,
                  mask: np.ndarray | None, hidden: int) -> Node:
    """Bidirectional encoding of (batch, in_dim, time) -> (batch, 2*hidden, time).

    The forward and backward passes run independently; their outputs are
    concatenated along the feature axis.  Output columns at padded positions
    are exactly zero.
    """
    batch, _, steps_n = seq.value.shape
    if steps_n == 0:
        raise ValueError("cannot encode an empty sequence")
    if mask is None:
        mask = np.ones((batch, steps_n), dtype=seq.value.dtype)
    # Project all timesteps through w_in at once; the recurrence only needs
    # the per-step (batch, 4*hidden) rows.
    seq_rows = ad.transpose(seq, (0, 2, 1))
    outputs = []
    for params, reverse in ((fwd, False), (bwd, True)):
        proj = ad.add(ad.matmul(seq_rows, params.w_in), params.bias)
        gates_x = [ad.index_axis(proj, 1, t) for t in range(steps_n)]
        outputs.append(ad.stack(_scan(params, gates_x, mask, hidden, reverse), axis=2))
    return ad.concat(outputs, axis=1)


def linear_seq(params: LinearParams, seq: Node) -> Node:
    """Apply (out, in) weight + bias along the feature axis of (B, in, T)."""
    return ad.add(ad.matmul(params.weight, seq), params.bias)


def highway_forward(params: HighwayParams, seq: Node, dropout_rate: float = 0.0,
                    rng: np.random.Generator | None = None,
                    train: bool = False) -> Node:
    """Highway network over (B, dim, T); gate mixes transform with identity."""
    out = seq
    for layer in params.layers:
        out = ad.dropout(out, dropout_rate, rng, train)
        transformed = ad.relu(linear_seq(layer.transform, out))
        gate = ad.sigmoid(linear_seq(layer.gate, out))
        carry = ad.sub(1.0, gate)
        out = ad.add(ad.mul(gate, transformed), ad.mul(carry, out))
    return out
