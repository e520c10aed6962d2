"""Cross-attention, masked attention and global masked attention.

All three mechanisms are single-head and unscaled by default; leading batch
axes are allowed on every operand (queries ``...xNxC``, keys/values
``...xPxC``, masks ``...xNxP``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

NEG_INF = -np.inf


@dataclass(frozen=True)
class AttentionMaskPair:
    foreground: np.ndarray
    background: np.ndarray

    def complement(self) -> "AttentionMaskPair":
        return AttentionMaskPair(self.background, self.foreground)


def build_attention_masks(prior_mask_probs) -> AttentionMaskPair:
    """Foreground keeps positions with prior >= 0.5, background the rest."""
    p = prior_mask_probs.data if isinstance(prior_mask_probs, T.Tensor) else np.asarray(prior_mask_probs)
    fg_on = p >= 0.5
    fg = np.where(fg_on, 0.0, NEG_INF).astype(np.float32)
    bg = np.where(fg_on, NEG_INF, 0.0).astype(np.float32)
    return AttentionMaskPair(fg, bg)


def _check(x_in, q, k, v):
    if q.shape[-1] != k.shape[-1]:
        raise T.DimensionError(f"query/key widths differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise T.DimensionError(f"key/value counts differ: {k.shape} vs {v.shape}")
    if x_in.shape[-2:] != (q.shape[-2], v.shape[-1]):
        raise T.DimensionError(f"residual shape {x_in.shape} does not match output")


def attention_weights(q, k, mask=None, scale=False):
    logits = T.matmul(q, T.transpose(k))
    if scale:
        logits = logits * (1.0 / np.sqrt(q.shape[-1]))
    return T.softmax_masked(logits, axis=-1, mask=mask)


def cross_attention(x_in, q, k, v, scale=False, return_weights=False):
    _check(x_in, q, k, v)
    w = attention_weights(q, k, scale=scale)
    out = T.matmul(w, v) + x_in
    return (out, w.data) if return_weights else out


def masked_attention(x_in, q, k, v, fg, scale=False, return_weights=False):
    _check(x_in, q, k, v)
    w = attention_weights(q, k, mask=fg, scale=scale)
    out = T.matmul(w, v) + x_in
    return (out, w.data) if return_weights else out


def global_masked_attention(x_in, q, k, v, masks: AttentionMaskPair, scale=False, return_weights=False):
    """Foreground term + background term + residual.

    The returned weights (when requested) are the two attention maps summed
    and renormalised per query, so each row is a distribution or zero.
    """
    _check(x_in, q, k, v)
    wf = attention_weights(q, k, mask=masks.foreground, scale=scale)
    wb = attention_weights(q, k, mask=masks.background, scale=scale)
    out = T.matmul(wf, v) + T.matmul(wb, v) + x_in
    if not return_weights:
        return out
    both = wf.data + wb.data
    tot = both.sum(axis=-1, keepdims=True)
    return out, np.where(tot > 0, both / np.where(tot > 0, tot, 1), 0)


def foreground_term(q, k, v, fg, scale=False):
    return T.matmul(attention_weights(q, k, mask=fg, scale=scale), v)


def background_term(q, k, v, bg, scale=False):
    return T.matmul(attention_weights(q, k, mask=bg, scale=scale), v)


def attend(kind: str, x_in, q, k, v, prior_mask_probs=None, scale=False, return_weights=False):
    """Dispatch on ``kind`` in {"ca", "ma", "gma"}."""
    kind = kind.lower()
    if kind == "ca":
        return cross_attention(x_in, q, k, v, scale=scale, return_weights=return_weights)
    if prior_mask_probs is None:
        raise ValueError(f"{kind} attention needs prior mask probabilities")
    masks = build_attention_masks(prior_mask_probs)
    if kind == "ma":
        return masked_attention(x_in, q, k, v, masks.foreground, scale=scale, return_weights=return_weights)
    if kind == "gma":
        return global_masked_attention(x_in, q, k, v, masks, scale=scale, return_weights=return_weights)
    raise ValueError(f"unknown attention kind {kind!r}")


def negative_attention_map(attn_weights) -> np.ndarray:
    """Per key position: 1 - mean attention over queries, clamped to [0, 1].

    Leading axes before the final query/position pair are preserved.
    """
    w = np.asarray(attn_weights, dtype=np.float64)
    return np.clip(1.0 - w.mean(axis=-2), 0.0, 1.0)
