"""Binary refinement of anomaly scores from confident query masks.

Queries whose top class is a thing or the road (with probability above a
threshold) mark the pixels they cover as eligible; everything else is
zeroed. With ``keep_uncovered=True`` only pixels claimed by a confident
query of a filtered role are zeroed and uncovered pixels keep their score.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ROLES = ("thing", "stuff", "road")


@dataclass(frozen=True)
class Taxonomy:
    roles: dict  # class id (1..K) -> role
    names: dict | None = None

    def __post_init__(self):
        bad = {r for r in self.roles.values() if r not in ROLES}
        if bad:
            raise ValueError(f"unknown roles {sorted(bad)}")
        if sum(r == "road" for r in self.roles.values()) != 1:
            raise ValueError("taxonomy needs exactly one road class")

    @property
    def num_classes(self) -> int:
        return len(self.roles)

    def role_vector(self) -> list:
        return [self.roles[k] for k in sorted(self.roles)]

    def to_json(self) -> list:
        names = self.names or {}
        return [
            {"class_id": k, "name": names.get(k, str(k)), "role": self.roles[k]}
            for k in sorted(self.roles)
        ]

    @classmethod
    def from_json(cls, entries) -> "Taxonomy":
        roles = {int(e["class_id"]): e["role"] for e in entries}
        names = {int(e["class_id"]): e.get("name", str(e["class_id"])) for e in entries}
        return cls(roles, names)


def _softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def binarize_masks(mask_logits) -> np.ndarray:
    m = np.asarray(getattr(mask_logits, "data", mask_logits))
    return (m > 0).astype(np.uint8)


def class_filter(class_logits, taxonomy: Taxonomy, threshold=0.95, keep_roles=("thing", "road")) -> np.ndarray:
    """1 per query whose argmax class has a kept role and probability > threshold."""
    probs = _softmax(getattr(class_logits, "data", class_logits))
    top = probs.argmax(axis=-1)
    conf = probs.max(axis=-1)
    k = probs.shape[-1] - 1
    role_ok = np.zeros(k + 1, dtype=bool)
    for cls_id, role in taxonomy.roles.items():
        role_ok[cls_id - 1] = role in keep_roles
    return (role_ok[top] & (conf > threshold)).astype(np.uint8)


def refinement_mask(c_bar, m_bar) -> np.ndarray:
    """1 where any passing query's binary mask covers the pixel."""
    c = np.asarray(c_bar, dtype=np.int64)
    m = np.asarray(m_bar, dtype=np.int64)
    if m.shape[:-2] != c.shape:
        raise ValueError(f"class filter {c.shape} does not match masks {m.shape}")
    cover = np.einsum("...n,...nhw->...hw", c, m)
    return (cover >= 1).astype(np.uint8)


def refine_scores(scores, r) -> np.ndarray:
    f = np.asarray(scores)
    r = np.asarray(r)
    if f.shape != r.shape:
        raise ValueError(f"score map {f.shape} and refinement mask {r.shape} differ")
    return f * r.astype(f.dtype)


def build_refinement(class_logits, mask_logits, taxonomy: Taxonomy, threshold=0.95,
                     remove="stuff", keep_uncovered=False) -> np.ndarray:
    """Refinement mask for one prediction set.

    ``remove`` names the role family filtered out ("stuff" keeps things and
    road; "things" keeps stuff and road).
    """
    if remove == "stuff":
        keep, drop = ("thing", "road"), ("stuff",)
    elif remove == "things":
        keep, drop = ("stuff", "road"), ("thing",)
    else:
        raise ValueError(f"unknown removal family {remove!r}")
    m_bar = binarize_masks(mask_logits)
    r = refinement_mask(class_filter(class_logits, taxonomy, threshold, keep), m_bar)
    if keep_uncovered:
        dropped = refinement_mask(class_filter(class_logits, taxonomy, threshold, drop), m_bar)
        r = np.maximum(r, 1 - dropped).astype(np.uint8)
    return r
