"""Multi-view estimation of missing MRI/PET features interleaved with the recurrence.

At BL the PET estimate comes from the same-visit MRI hidden state through a
tanh layer (cross-sectional view).  From the second visit on, one affine map
of the previous MRI and PET hidden states estimates both modalities
(longitudinal view), and the PET estimate is a convex mix of both views.
Missing entries are replaced by their estimates before the cell update.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rnn
from .core import ops
from .core.params import xavier_uniform
from .errors import ContractError, RolloutError

PROVENANCE = ("observed", "imputed-cs", "imputed-lg", "imputed-mixed")


def add_imputation_params(store, d, hidden, rng):
    store.add("impute.cs.w", xavier_uniform(rng, hidden, d))
    store.add("impute.cs.b", np.zeros(d))
    store.add("impute.lg.w", xavier_uniform(rng, 2 * hidden, 2 * d))
    store.add("impute.lg.b", np.zeros(2 * d))
    # alpha = sigmoid(a - b); equal logits start the mix at 0.5
    store.add("impute.mix.a", np.zeros(1))
    store.add("impute.mix.b", np.zeros(1))


@dataclass(frozen=True)
class MixingCoefficients:
    a: object
    b: object

    @property
    def alpha(self):
        return ops.sigmoid(ops.sub(self.a, self.b))

    @property
    def beta(self):
        return 1.0 - self.alpha

    @classmethod
    def from_source(cls, source):
        return cls(source["impute.mix.a"], source["impute.mix.b"])


def estimate_cross_pet(h_mri_t, w_cs, b_cs):
    return ops.tanh(ops.affine(h_mri_t, w_cs, b_cs))


def estimate_longitudinal(h_mri_prev, h_pet_prev, w_lg, b_lg, t=None):
    """Linear estimates ``(mri, pet)`` at visit ``t`` from the hidden states of visit ``t - 1``."""
    if t is not None and t < 1:
        raise ContractError("longitudinal estimate needs a previous visit (t >= 1, zero-based)")
    out = ops.affine(ops.concat([h_mri_prev, h_pet_prev], axis=-1), w_lg, b_lg)
    d = ops.value_of(out).shape[-1] // 2
    return out[..., :d], out[..., d:]


def combine_pet(x_cs, x_lg, mix, t):
    if t == 0:
        return x_cs
    alpha = mix.alpha
    return ops.add(ops.mul(alpha, x_cs), ops.mul(1.0 - alpha, x_lg))


def impute_timepoint(x_t, m_t, x_hat_t):
    """Observed row where the (broadcast) mask is 1, estimate otherwise."""
    m = np.asarray(m_t) > 0
    xv = ops.value_of(x_t)
    if m.ndim < np.ndim(xv):
        m = m[..., None]
    return ops.where(m, x_t, x_hat_t)


@dataclass
class RolloutTrace:
    """Per-visit lists; entries are arrays or tape nodes of shape (N, D) or (N, D')."""

    h_mri: list = field(default_factory=list)
    h_pet: list = field(default_factory=list)
    x_hat_mri: list = field(default_factory=list)   # None at BL
    x_cs_pet: list = field(default_factory=list)
    x_lg_pet: list = field(default_factory=list)    # None at BL
    x_hat_pet: list = field(default_factory=list)
    u_mri: list = field(default_factory=list)
    u_pet: list = field(default_factory=list)
    m_mri: np.ndarray | None = None                 # input masks actually used
    m_pet: np.ndarray | None = None

    @property
    def t(self):
        return len(self.h_mri)


def rollout(batch, source, layers, m_mri=None, m_pet=None, fill=None, allow_missing_bl_mri=False):
    """Run imputation and both recurrences over the visit grid.

    ``m_mri``/``m_pet`` are the input masks (default: the batch's own); the
    test regime passes masks that are zero after BL.  With ``fill`` given
    (``{"mri": vec, "pet": vec}``) missing rows are mean-filled and no
    estimates are produced.
    """
    m_mri = batch.m_mri if m_mri is None else m_mri
    m_pet = batch.m_pet if m_pet is None else m_pet
    if not allow_missing_bl_mri and np.any(m_mri[:, 0] == 0):
        bad = [batch.ids[i] for i in np.flatnonzero(m_mri[:, 0] == 0)]
        raise RolloutError(f"MRI missing at BL for {bad[:5]}; such subjects are excluded by design")
    n, t_len, _ = batch.x_mri.shape
    stack_mri = rnn.stack_params(source, "rnn.mri", layers)
    stack_pet = rnn.stack_params(source, "rnn.pet", layers)
    hidden = ops.value_of(stack_mri[0].w_h).shape[0]
    h_mri = [np.zeros((n, hidden)) for _ in range(layers)]
    h_pet = [np.zeros((n, hidden)) for _ in range(layers)]
    trace = RolloutTrace(m_mri=m_mri, m_pet=m_pet)
    if fill is None:
        w_cs, b_cs = source["impute.cs.w"], source["impute.cs.b"]
        w_lg, b_lg = source["impute.lg.w"], source["impute.lg.b"]
        mix = MixingCoefficients.from_source(source)

    for t in range(t_len):
        x_mri_t, x_pet_t = batch.x_mri[:, t], batch.x_pet[:, t]
        if fill is not None:
            u_mri = impute_timepoint(x_mri_t, m_mri[:, t], fill["mri"])
            h_mri = rnn.stack_forward(u_mri, h_mri, stack_mri)
            u_pet = impute_timepoint(x_pet_t, m_pet[:, t], fill["pet"])
            h_pet = rnn.stack_forward(u_pet, h_pet, stack_pet)
            x_hat_mri = x_cs = x_lg = x_hat_pet = None
        else:
            if t == 0:
                x_hat_mri = x_lg = None
                if allow_missing_bl_mri:
                    x_hat_mri, _ = estimate_longitudinal(h_mri[-1], h_pet[-1], w_lg, b_lg)
                    u_mri = impute_timepoint(x_mri_t, m_mri[:, t], x_hat_mri)
                else:
                    u_mri = x_mri_t
            else:
                x_hat_mri, x_lg = estimate_longitudinal(h_mri[-1], h_pet[-1], w_lg, b_lg, t)
                u_mri = impute_timepoint(x_mri_t, m_mri[:, t], x_hat_mri)
            h_mri = rnn.stack_forward(u_mri, h_mri, stack_mri)
            x_cs = estimate_cross_pet(h_mri[-1], w_cs, b_cs)
            x_hat_pet = combine_pet(x_cs, x_lg, mix, t)
            u_pet = impute_timepoint(x_pet_t, m_pet[:, t], x_hat_pet)
            h_pet = rnn.stack_forward(u_pet, h_pet, stack_pet)
        trace.h_mri.append(h_mri[-1])
        trace.h_pet.append(h_pet[-1])
        trace.x_hat_mri.append(x_hat_mri)
        trace.x_cs_pet.append(x_cs)
        trace.x_lg_pet.append(x_lg)
        trace.x_hat_pet.append(x_hat_pet)
        trace.u_mri.append(u_mri)
        trace.u_pet.append(u_pet)
    return trace


def provenance(m_mri, m_pet):
    """Tags ``(N, T)`` per modality describing where each input row came from."""
    prov_mri = np.where(m_mri > 0, "observed", "imputed-lg").astype(object)
    prov_pet = np.where(m_pet > 0, "observed", "imputed-mixed").astype(object)
    prov_pet[:, 0] = np.where(m_pet[:, 0] > 0, "observed", "imputed-cs")
    return prov_mri, prov_pet


def _masked_abs_sum(x, x_hat, mask):
    """Sum of |x - x_hat| over rows with mask 1; x is (N, K, D), mask (N, K)."""
    err = ops.abs_(ops.sub(x, x_hat))
    return ops.sum_(ops.where(np.asarray(mask)[..., None] > 0, err, 0.0))


def estimation_loss(trace, batch, m_mri=None, m_pet=None):
    """Masked mean absolute error of the estimates, averaged over contributing scalars.

    MRI contributes from the second visit on (no BL estimate); PET at every
    visit.  Masks default to the batch's observed masks.
    """
    m_mri = batch.m_mri if m_mri is None else m_mri
    m_pet = batch.m_pet if m_pet is None else m_pet
    d = batch.x_mri.shape[-1]
    count = d * (float(np.sum(m_mri[:, 1:])) + float(np.sum(m_pet)))
    if count == 0:
        return 0.0
    total = 0.0
    if trace.t > 1:
        x_hat_mri = ops.stack(trace.x_hat_mri[1:], axis=1)
        total = _masked_abs_sum(batch.x_mri[:, 1:], x_hat_mri, m_mri[:, 1:])
    x_hat_pet = ops.stack(trace.x_hat_pet, axis=1)
    total = ops.add(total, _masked_abs_sum(batch.x_pet, x_hat_pet, m_pet))
    return ops.mul(total, 1.0 / count)
