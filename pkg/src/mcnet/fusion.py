"""Cross-attention fusion over modalities and visits, the two classification heads and their losses."""
from __future__ import annotations

import numpy as np

from .core import ops
from .core.params import add_linear, xavier_uniform
from .errors import ConfigError

FOCAL_MU = 0.3
FOCAL_GAMMA = 2.0
CLAMP = 1e-7


def add_attention(store, prefix, dim, heads, rng):
    """Per-head projections are stored side by side: head j owns columns ``j*dim/heads:(j+1)*dim/heads``."""
    if dim % heads:
        raise ConfigError(f"token width {dim} not divisible by {heads} heads")
    for name in ("w_q", "w_k", "w_v"):
        store.add(f"{prefix}.{name}", xavier_uniform(rng, dim, dim))
    add_linear(store, f"{prefix}.out", dim, dim, rng)


def attention_block(tokens, source, prefix, heads):
    """Multi-head self-attention over the token axis with a residual connection.

    ``tokens`` has shape ``(..., n, dim)``.  Returns ``(fused, weights)`` where
    ``weights`` is ``(..., heads, n, n)`` and row-stochastic.
    """
    shape = ops.value_of(tokens).shape
    *lead, n, dim = shape
    if dim % heads:
        raise ConfigError(f"token width {dim} not divisible by {heads} heads")
    dh = dim // heads
    lead = tuple(lead)
    k = len(lead)
    split = lead + (n, heads, dh)
    to_heads = tuple(range(k)) + (k + 1, k, k + 2)

    def project(name):
        p = ops.matmul(tokens, source[f"{prefix}.{name}"])
        return ops.transpose(ops.reshape(p, split), to_heads)

    q, key, v = project("w_q"), project("w_k"), project("w_v")
    scores = ops.mul(ops.matmul(q, ops.swapaxes(key, -1, -2)), 1.0 / np.sqrt(dh))
    weights = ops.softmax(scores, axis=-1)
    heads_out = ops.matmul(weights, v)
    merged = ops.reshape(ops.transpose(heads_out, to_heads), shape)
    out = ops.affine(merged, source[f"{prefix}.out.w"], source[f"{prefix}.out.b"])
    return ops.add(out, tokens), weights


def modality_attention(h_mri, h_pet, source, heads, prefix="attn1"):
    """Fuse the MRI and PET hidden states of each visit; returns ``(..., 2, D')`` and the weights."""
    tokens = ops.stack([h_mri, h_pet], axis=-2)
    return attention_block(tokens, source, prefix, heads)


def temporal_attention(fused, source, heads, prefix="attn2"):
    """Attend across visits; ``fused`` is ``(..., T, 2D')``."""
    return attention_block(fused, source, prefix, heads)


def pool(x, axis_tokens, how):
    """Reduce the token axis by flattening (default) or averaging."""
    if how == "flatten":
        shape = ops.value_of(x).shape
        return ops.reshape(x, shape[:axis_tokens] + (-1,))
    if how == "mean":
        return ops.mean(x, axis=axis_tokens)
    raise ConfigError(f"unknown pooling {how!r}")


def add_heads(store, hidden, t, rng, pooling="flatten"):
    cls_in = 2 * hidden if pooling == "flatten" else hidden
    conv_in = t * 2 * hidden if pooling == "flatten" else 2 * hidden
    add_linear(store, "head.cls", cls_in, 2, rng)
    add_linear(store, "head.conv", conv_in, 2, rng)


def longitudinal_head(features, source):
    """Change / no-change probabilities ``(..., 2)``; column 1 is 'changed'."""
    return ops.softmax(ops.affine(features, source["head.cls.w"], source["head.cls.b"]), axis=-1)


def conversion_head(features, source):
    """sMCI / pMCI probabilities ``(N, 2)``; column 1 is pMCI."""
    return ops.softmax(ops.affine(features, source["head.conv.w"], source["head.conv.b"]), axis=-1)


def _log(p):
    return ops.log(ops.clip(p, CLAMP, 1.0 - CLAMP))


def cls_loss(y_prob, y, m_mri):
    """Binary cross-entropy of the change label, masked by MRI presence, mean over contributing visits."""
    m = np.asarray(m_mri) > 0
    count = int(m.sum())
    if count == 0:
        return 0.0
    y = np.asarray(y)
    terms = ops.where(y > 0, _log(y_prob[..., 1]), _log(y_prob[..., 0]))
    return ops.mul(ops.sum_(ops.where(m, terms, 0.0)), -1.0 / count)


def focal_loss(c_prob, c, mu=FOCAL_MU, gamma=FOCAL_GAMMA):
    """Mean over subjects of ``-mu * (1 - p)^gamma * log p`` with ``p`` the true-class probability."""
    c = np.asarray(c)
    p_true = ops.where(c > 0, c_prob[..., 1], c_prob[..., 0])
    terms = ops.mul(ops.power(ops.sub(1.0, p_true), gamma), _log(p_true))
    return ops.mul(ops.sum_(terms), -mu / c.shape[0])
