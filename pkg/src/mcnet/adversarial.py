"""Mask-supervised discriminator over imputed feature rows and the alternating update."""
from __future__ import annotations

import numpy as np

from .core import ops
from .core.params import add_linear

CLAMP = 1e-7
# widest float interval strictly inside (0, 1); saturated sigmoids round onto its ends
OPEN_UNIT = (np.finfo(np.float64).tiny, 1.0 - 2.0 ** -53)
DISC_HIDDEN = (64, 32)


def add_discriminator(store, d, rng, prefix="disc", hidden=DISC_HIDDEN):
    sizes = (d,) + tuple(hidden) + (1,)
    for k in range(len(sizes) - 1):
        add_linear(store, f"{prefix}.{k}", sizes[k], sizes[k + 1], rng)


def discriminate(u, source, prefix="disc", n_layers=len(DISC_HIDDEN) + 1):
    """Probability that each row of ``u`` (shape ``(..., D)``) was observed rather than imputed."""
    h = u
    for k in range(n_layers):
        h = ops.affine(h, source[f"{prefix}.{k}.w"], source[f"{prefix}.{k}.b"])
        if k < n_layers - 1:
            h = ops.tanh(h)
    return ops.clip(ops.sigmoid(h), *OPEN_UNIT)[..., 0]


def discriminate_rows(u, source, shared=True, prefix="disc"):
    """Probabilities for stacked rows ``(N, T, 2, D)``; per-modality discriminators when not shared."""
    if shared:
        return discriminate(u, source, prefix)
    return ops.stack([discriminate(u[:, :, k], source, f"{prefix}.{mod}")
                      for k, mod in enumerate(("mri", "pet"))], axis=-1)


def _log(p):
    return ops.log(ops.clip(p, CLAMP, 1.0 - CLAMP))


def discriminator_loss(probs, masks):
    """Masked binary cross-entropy with the mask as target, averaged over every entry."""
    masks = np.asarray(masks, dtype=np.float64)
    observed = masks > 0
    terms = ops.where(observed, _log(probs), _log(ops.sub(1.0, probs)))
    return ops.mul(ops.sum_(terms), -1.0 / masks.size)


def adversarial_loss(probs, masks):
    """Mean of log(1 - Ds(u)) over imputed entries only; 0 when nothing was imputed.

    Callers evaluate ``probs`` with the discriminator frozen so no gradient
    reaches its parameters.
    """
    imputed = np.asarray(masks) == 0
    n = int(imputed.sum())
    if n == 0:
        return 0.0
    terms = ops.where(imputed, _log(ops.sub(1.0, probs)), 0.0)
    return ops.mul(ops.sum_(terms), 1.0 / n)


def stack_inputs(trace):
    """Imputed rows as ``(N, T, 2, D)`` and matching input masks ``(N, T, 2)``."""
    u = ops.stack([ops.stack([a, b], axis=1) for a, b in zip(trace.u_mri, trace.u_pet)], axis=1)
    masks = np.stack([trace.m_mri, trace.m_pet], axis=-1)
    return u, masks


def alternate_update(tape, store, optimizer, u, masks, generator_loss, generator_names,
                     prefix="disc", step_discriminator=True, shared=True):
    """One discriminator step followed by one generator step on the same forward pass.

    ``u`` is the imputed-row node built on ``tape``.  Step 1 trains the
    discriminator on a detached copy of ``u`` (generator untouched).  Step 2
    rebuilds the discriminator branch on the live ``u`` with the updated
    discriminator frozen, passes the resulting adversarial loss to
    ``generator_loss(l_adv)`` and updates ``generator_names`` only.
    Returns ``(l_d, l_adv, total)`` as floats.
    """
    disc_names = store.names(prefix)
    l_d_value = float("nan")
    if step_discriminator:
        probs = discriminate_rows(ops.value_of(u), tape, shared, prefix)
        l_d = discriminator_loss(probs, masks)
        store.zero_grad(disc_names)
        tape.backward(l_d)
        optimizer.step(store, disc_names)
        l_d_value = float(ops.value_of(l_d))
    with tape.frozen(prefix):
        probs = discriminate_rows(u, tape, shared, prefix)
    l_adv = adversarial_loss(probs, masks)
    total = generator_loss(l_adv)
    store.zero_grad(generator_names)
    if isinstance(total, ops.Node):
        tape.backward(total)
    optimizer.step(store, generator_names)
    return l_d_value, float(ops.value_of(l_adv)), float(ops.value_of(total))
