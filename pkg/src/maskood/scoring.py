"""Anomaly scores from per-pixel probabilities or from query predictions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TRANSFORMS = ("identity", "softmax", "sigmoid")


@dataclass(frozen=True)
class InferenceVariant:
    class_transform: str = "softmax"
    mask_transform: str = "sigmoid"
    outer_transform: str = "identity"
    mask_softmax_axis: str = "queries"

    def __post_init__(self):
        if self.class_transform not in TRANSFORMS or self.mask_transform not in TRANSFORMS:
            raise ValueError(f"transforms must be one of {TRANSFORMS}")
        if self.outer_transform not in ("identity", "softmax"):
            raise ValueError("outer transform must be identity or softmax")
        if self.mask_softmax_axis not in ("queries", "pixels"):
            raise ValueError("mask softmax axis must be 'queries' or 'pixels'")

    @classmethod
    def parse(cls, text: str, **kw) -> "InferenceVariant":
        parts = [p.strip().lower() for p in text.split(",")]
        if len(parts) != 3:
            raise ValueError(f"variant needs three comma-separated transforms, got {text!r}")
        return cls(*parts, **kw)

    def label(self) -> str:
        return f"{self.class_transform},{self.mask_transform},{self.outer_transform}"


DEFAULT_VARIANT = InferenceVariant()


def _softmax(x, axis):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _data(x):
    return getattr(x, "data", x)


def msp_pixel(class_probs) -> np.ndarray:
    """1 - max over the class axis (axis -3 of ``[...,K,H,W]``)."""
    s = np.asarray(class_probs, dtype=np.float64)
    return 1.0 - s.max(axis=-3)


def mask_anomaly_score(class_logits, mask_logits) -> np.ndarray:
    """1 - clamp(max_k softmax(C)^T sigmoid(M), 0, 1), no-object column dropped."""
    probs = _softmax(_data(class_logits), axis=-1)[..., :-1]
    m = _sigmoid(_data(mask_logits))
    marg = np.einsum("...nk,...nhw->...khw", probs, m)
    return 1.0 - np.clip(marg.max(axis=-3), 0.0, 1.0)


def score_variant(class_logits, mask_logits, variant: InferenceVariant = DEFAULT_VARIANT) -> np.ndarray:
    c = np.asarray(_data(class_logits), dtype=np.float64)
    m = np.asarray(_data(mask_logits), dtype=np.float64)
    if variant.class_transform == "softmax":
        c = _softmax(c, axis=-1)
    elif variant.class_transform == "sigmoid":
        c = _sigmoid(c)
    c = c[..., :-1]
    if variant.mask_transform == "sigmoid":
        m = _sigmoid(m)
    elif variant.mask_transform == "softmax":
        if variant.mask_softmax_axis == "queries":
            m = _softmax(m, axis=-3)
        else:
            shape = m.shape
            m = _softmax(m.reshape(shape[:-2] + (-1,)), axis=-1).reshape(shape)
    marg = np.einsum("...nk,...nhw->...khw", c, m)
    if variant.outer_transform == "softmax":
        marg = _softmax(marg, axis=-3)
    return np.clip(1.0 - marg.max(axis=-3), 0.0, 1.0)
