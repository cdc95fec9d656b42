"""MinimalRNN cell and a stacked recurrence, one stack per modality.

Weights are stored input-major (``x @ w``), so ``w_x`` is ``D_in x D'``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ops
from .core.params import xavier_uniform
from .errors import ContractError


@dataclass(frozen=True)
class CellParams:
    w_x: object
    b_x: object
    w_h: object
    w_z: object

    @classmethod
    def from_source(cls, source, prefix):
        return cls(source[f"{prefix}.w_x"], source[f"{prefix}.b_x"],
                   source[f"{prefix}.w_h"], source[f"{prefix}.w_z"])


def add_cell(store, prefix, d_in, hidden, rng):
    store.add(f"{prefix}.w_x", xavier_uniform(rng, d_in, hidden))
    store.add(f"{prefix}.b_x", np.zeros(hidden))
    store.add(f"{prefix}.w_h", xavier_uniform(rng, hidden, hidden))
    store.add(f"{prefix}.w_z", xavier_uniform(rng, hidden, hidden))


def add_stack(store, prefix, d_in, hidden, layers, rng):
    for k in range(layers):
        add_cell(store, f"{prefix}.{k}", d_in if k == 0 else hidden, hidden, rng)


def stack_params(source, prefix, layers):
    return [CellParams.from_source(source, f"{prefix}.{k}") for k in range(layers)]


def cell_step(x, h_prev, p: CellParams):
    """One cell update; returns ``(h, z)``.

    z = tanh(x W_x + b_x), g = sigmoid(h_prev W_h + z W_z),
    h = g * h_prev + (1 - g) * z, written as z + g * (h_prev - z).
    """
    xv, hv = ops.value_of(x), ops.value_of(h_prev)
    wx = ops.value_of(p.w_x)
    if xv.shape[-1] != wx.shape[0] or hv.shape[-1] != wx.shape[1]:
        raise ContractError(f"cell shapes: x {xv.shape}, h {hv.shape}, w_x {wx.shape}")
    z = ops.tanh(ops.affine(x, p.w_x, p.b_x))
    g = ops.sigmoid(ops.matmul(h_prev, p.w_h) + ops.matmul(z, p.w_z))
    h = z + g * (h_prev - z)
    return h, z


def stack_forward(u, h_prev_layers, stack):
    """Advance every layer one step; layer k > 0 reads layer k-1's new state."""
    if len(h_prev_layers) != len(stack):
        raise ContractError(f"{len(h_prev_layers)} hidden states for {len(stack)} layers")
    out = []
    inp = u
    for h_prev, p in zip(h_prev_layers, stack):
        h, _ = cell_step(inp, h_prev, p)
        out.append(h)
        inp = h
    return out
