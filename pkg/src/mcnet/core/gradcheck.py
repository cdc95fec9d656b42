"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

import numpy as np

from ..errors import ContractError
from .tape import Tape, value_of


def _scalar(loss):
    value = float(np.asarray(value_of(loss)).reshape(()))
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}")
    return value


def sample_coordinates(store, n, rng, names=None):
    """At least one coordinate per entry (while ``n`` allows), the rest uniform over all scalars."""
    names = list(store) if names is None else list(names)
    coords = [(name, int(rng.integers(store[name].size))) for name in names[:n]]
    sizes = np.array([store[name].size for name in names], dtype=float)
    while len(coords) < n:
        k = int(rng.choice(len(names), p=sizes / sizes.sum()))
        coords.append((names[k], int(rng.integers(store[names[k]].size))))
    return coords


def _central(f, step, order):
    if order == 2:
        return (f(step) - f(-step)) / (2.0 * step)
    if order == 4:
        return (8.0 * (f(step) - f(-step)) - (f(2 * step) - f(-2 * step))) / (12.0 * step)
    raise ContractError(f"stencil order must be 2 or 4, got {order}")


def gradient_errors(store, loss_fn, step=1e-5, n_coords=200, seed=0, names=None, eps=1e-10, order=2):
    """Per-coordinate ``(name, index, analytic, numeric, rel_error)`` records.

    ``loss_fn(source)`` must return a scalar; it is called with a ``Tape`` for
    the analytic pass and with the store itself for the numeric passes.
    """
    if not 0.0 < step <= 1e-3:
        raise ContractError(f"step must lie in (0, 1e-3], got {step}")
    tape = Tape(store)
    loss = loss_fn(tape)
    _scalar(loss)
    saved = {n: store.grad(n).copy() for n in store}
    store.zero_grad()
    if hasattr(loss, "tape"):
        tape.backward(loss)
    analytic = {n: store.grad(n).copy() for n in store}
    for n, g in saved.items():
        store.zero_grad([n])
        store.accumulate_grad(n, g)

    rng = np.random.default_rng(seed)
    records = []
    for name, flat in sample_coordinates(store, n_coords, rng, names):
        original = store[name]

        def shifted(delta):
            bumped = original.copy()
            bumped.flat[flat] = original.flat[flat] + delta
            store[name] = bumped
            try:
                return _scalar(loss_fn(store))
            finally:
                store[name] = original

        numeric = _central(shifted, step, order)
        a = float(analytic[name].flat[flat])
        err = abs(a - numeric) / (abs(a) + abs(numeric) + eps)
        records.append((name, flat, a, numeric, err))
    return records


def finite_difference_check(store, loss_fn, step=1e-5, n_coords=200, seed=0, names=None, eps=1e-10,
                            order=2):
    """Max over sampled coordinates of ``|analytic - numeric| / (|analytic| + |numeric| + eps)``.

    ``order=4`` uses the five-point central stencil, whose smaller truncation
    error allows a larger step and hence less round-off.
    """
    records = gradient_errors(store, loss_fn, step, n_coords, seed, names, eps, order)
    return max((r[4] for r in records), default=0.0)
