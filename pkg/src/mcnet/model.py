"""Parameter layout and the full forward pass: rollout, fusion, heads and loss terms."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import adversarial, fusion, imputation, rnn
from .core import ParameterStore, ops
from .errors import ConfigError

GENERATOR_PREFIXES = ("rnn", "impute")
PREDICTOR_PREFIXES = ("attn1", "attn2", "head")
DISC_PREFIX = "disc"


@dataclass(frozen=True)
class ModelConfig:
    d: int = 90
    t: int = 5
    hidden: int = 128
    layers: int = 3
    heads: int = 4
    temporal_heads: int = 4
    pooling: str = "flatten"
    shared_discriminator: bool = True
    # ablation switches
    use_attention: bool = True
    use_imputation: bool = True

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (2 * self.hidden) % self.temporal_heads:
            raise ConfigError(f"2*hidden {2 * self.hidden} not divisible by temporal heads {self.temporal_heads}")
        if self.pooling not in ("flatten", "mean"):
            raise ConfigError(f"pooling must be 'flatten' or 'mean', got {self.pooling!r}")
        if min(self.d, self.t, self.hidden, self.layers) < 1:
            raise ConfigError("dimensions must be positive")

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in mapping.items() if k in known})

    def to_dict(self):
        return asdict(self)


def init_params(cfg: ModelConfig, seed: int) -> ParameterStore:
    """Xavier-uniform weights, zero biases; every namespace is created regardless of ablation."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    rnn.add_stack(store, "rnn.mri", cfg.d, cfg.hidden, cfg.layers, rng)
    rnn.add_stack(store, "rnn.pet", cfg.d, cfg.hidden, cfg.layers, rng)
    imputation.add_imputation_params(store, cfg.d, cfg.hidden, rng)
    if cfg.shared_discriminator:
        adversarial.add_discriminator(store, cfg.d, rng, DISC_PREFIX)
    else:
        for mod in ("mri", "pet"):
            adversarial.add_discriminator(store, cfg.d, rng, f"{DISC_PREFIX}.{mod}")
    fusion.add_attention(store, "attn1", cfg.hidden, cfg.heads, rng)
    fusion.add_attention(store, "attn2", 2 * cfg.hidden, cfg.temporal_heads, rng)
    fusion.add_heads(store, cfg.hidden, cfg.t, rng, cfg.pooling)
    return store


def names_under(store, prefixes):
    return [n for n in store if any(n == p or n.startswith(p + ".") for p in prefixes)]


@dataclass
class Prediction:
    fused: object          # (N, T, 2D') after modality attention (or plain concatenation)
    final: object          # (N, T, 2D') after temporal attention
    y_prob: object         # (N, T, 2)
    c_prob: object         # (N, 2)
    attn_modality: object = None
    attn_temporal: object = None


def predict(h_mri, h_pet, source, cfg: ModelConfig):
    """Heads on top of hidden states ``(N, T, D')`` for each modality."""
    if cfg.use_attention:
        tokens, w1 = fusion.modality_attention(h_mri, h_pet, source, cfg.heads)
    else:
        tokens, w1 = ops.stack([h_mri, h_pet], axis=-2), None
    n, t, _, hidden = ops.value_of(tokens).shape
    if cfg.pooling == "flatten":
        fused = ops.reshape(tokens, (n, t, 2 * hidden))
        y_in = fused
    else:
        fused = ops.reshape(tokens, (n, t, 2 * hidden))
        y_in = ops.mean(tokens, axis=-2)
    y_prob = fusion.longitudinal_head(y_in, source)
    if cfg.use_attention:
        final, w2 = fusion.temporal_attention(fused, source, cfg.temporal_heads)
    else:
        final, w2 = fused, None
    c_in = fusion.pool(final, 1, cfg.pooling)
    c_prob = fusion.conversion_head(c_in, source)
    return Prediction(fused, final, y_prob, c_prob, w1, w2)


def hidden_sequences(trace):
    return ops.stack(trace.h_mri, axis=1), ops.stack(trace.h_pet, axis=1)


@dataclass
class Forward:
    trace: imputation.RolloutTrace
    pred: Prediction


def forward(batch, source, cfg: ModelConfig, m_mri=None, m_pet=None, fill=None):
    """Rollout then prediction.  ``fill`` is required when imputation is ablated."""
    if not cfg.use_imputation and fill is None:
        raise ConfigError("imputation ablated: pass fill means")
    trace = imputation.rollout(batch, source, cfg.layers, m_mri, m_pet,
                               fill=None if cfg.use_imputation else fill)
    h_mri, h_pet = hidden_sequences(trace)
    return Forward(trace, predict(h_mri, h_pet, source, cfg))


def loss_terms(fwd, batch, source, cfg: ModelConfig, adversarial_on=True, freeze_discriminator=True):
    """Component losses on one batch: est, adv, cls, pred.

    Supervision always uses the batch's observed masks; the adversarial term
    uses the rollout's input masks.  With ``freeze_discriminator`` the
    discriminator parameters enter as constants (generator-side view).
    """
    terms = {}
    if cfg.use_imputation:
        terms["est"] = imputation.estimation_loss(fwd.trace, batch)
    else:
        terms["est"] = 0.0
    if adversarial_on and cfg.use_imputation:
        u, masks = adversarial.stack_inputs(fwd.trace)
        if freeze_discriminator and isinstance(source, ops.Tape):
            with source.frozen(DISC_PREFIX):
                probs = adversarial.discriminate_rows(u, source, cfg.shared_discriminator)
        else:
            probs = adversarial.discriminate_rows(u, source, cfg.shared_discriminator)
        terms["adv"] = adversarial.adversarial_loss(probs, masks)
    else:
        terms["adv"] = 0.0
    terms["cls"] = fusion.cls_loss(fwd.pred.y_prob, batch.y, batch.m_mri)
    terms["pred"] = fusion.focal_loss(fwd.pred.c_prob, batch.c)
    return terms


def combine(terms, lam, zeta, xi, use_cls=True):
    """Weighted total ``lam*est + zeta*adv + xi*(cls + pred)``."""
    if min(lam, zeta, xi) < 0:
        raise ConfigError("loss weights must be nonnegative")
    cls_term = terms["cls"] if use_cls else 0.0
    total = ops.add(ops.mul(terms["est"], lam), ops.mul(terms["adv"], zeta))
    return ops.add(total, ops.mul(ops.add(cls_term, terms["pred"]), xi))
