"""Training objectives: mask/class set losses and outlier losses."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .matching import MatchResult, hungarian_match


@dataclass(frozen=True)
class LossWeights:
    bce: float = 5.0
    dice: float = 5.0
    ce_matched: float = 2.0
    ce_phi: float = 0.1
    margin: float = 0.75

    def __post_init__(self):
        if min(self.bce, self.dice, self.ce_matched, self.ce_phi) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 < self.margin <= 1:
            raise ValueError("margin must lie in (0, 1]")


def _np(x):
    return x.data if isinstance(x, T.Tensor) else np.asarray(x)


def _weighted_mean(values, weights):
    if weights is None:
        return T.mean(values)
    w = np.asarray(weights, dtype=np.float64)
    total = float(w.sum())
    if total <= 0:
        return T.sum(values) * 0.0
    return T.sum(values * w.astype(values.dtype)) * (1.0 / total)


def bce_loss(logits, targets, weights=None) -> T.Tensor:
    """Mean binary cross-entropy on logits, in the stable softplus form."""
    logits = T.as_tensor(logits)
    t = np.asarray(_np(targets), dtype=logits.dtype)
    per = T.softplus(logits) - logits * t
    return _weighted_mean(per, weights)


def dice_loss(probs, targets, eps=1.0, weights=None) -> T.Tensor:
    """Soft dice over all elements: 1 - (2 sum(p t) + eps) / (sum p + sum t + eps)."""
    probs = T.as_tensor(probs)
    t = np.asarray(_np(targets), dtype=probs.dtype)
    if weights is not None:
        w = np.asarray(weights, dtype=probs.dtype)
        probs = probs * w
        t = t * w
    inter = T.sum(probs * t)
    denom = T.sum(probs) + float(t.sum()) + eps
    return 1.0 - (2.0 * inter + eps) / denom


def _dice_rows(probs, t, eps=1.0, weights=None):
    # one dice value per leading row of a [G, P] stack
    if weights is not None:
        w = np.asarray(weights, dtype=probs.dtype)
        probs = probs * w
        t = t * w
    inter = T.sum(probs * t, axis=-1)
    denom = T.sum(probs, axis=-1) + t.sum(axis=-1) + eps
    return 1.0 - (2.0 * inter + eps) / denom


def ce_loss(class_logits, target_classes, weights: LossWeights = LossWeights()) -> T.Tensor:
    """Weighted mean cross-entropy over queries.

    ``target_classes`` holds column indices; the last column (K) is no-object.
    """
    class_logits = T.as_tensor(class_logits)
    n, k1 = class_logits.shape[-2:]
    tgt = np.asarray(target_classes, dtype=np.int64)
    if tgt.shape != (n,):
        raise ValueError(f"need one target per query, got {tgt.shape}")
    if tgt.min() < 0 or tgt.max() >= k1:
        raise ValueError("target class out of range")
    logp = T.log_softmax(class_logits, axis=-1)
    picked = logp[np.arange(n), tgt]
    w = np.where(tgt == k1 - 1, weights.ce_phi, weights.ce_matched).astype(class_logits.dtype)
    return -T.sum(picked * w) * (1.0 / n)


def match_cost(pred_mask_logits, gt_mask, weights: LossWeights = LossWeights(), valid=None) -> T.Tensor:
    logits = T.as_tensor(pred_mask_logits)
    return weights.bce * bce_loss(logits, gt_mask, valid) + weights.dice * dice_loss(T.sigmoid(logits), gt_mask, weights=valid)


def match_cost_matrix(mask_logits, gt_masks, weights: LossWeights = LossWeights(), valid=None) -> np.ndarray:
    """All-pairs mask cost ``[G, N]`` (rows: ground truth, columns: queries)."""
    x = np.asarray(_np(mask_logits), dtype=np.float64).reshape(len(_np(mask_logits)), -1)
    t = np.asarray(gt_masks, dtype=np.float64).reshape(len(gt_masks), -1)
    w = np.ones(x.shape[1]) if valid is None else np.asarray(valid, dtype=np.float64).reshape(-1)
    sp = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    bce = ((sp * w).sum(-1)[None, :] - (t * w) @ x.T) / max(w.sum(), 1e-12)
    p = np.where(x >= 0, 1 / (1 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1 + np.exp(-np.abs(x))))
    pw = p * w
    inter = (t * w) @ pw.T
    dice = 1.0 - (2 * inter + 1.0) / (pw.sum(-1)[None, :] + (t * w).sum(-1)[:, None] + 1.0)
    return weights.bce * bce + weights.dice * dice


def match(mask_logits, gt_masks, weights: LossWeights = LossWeights(), valid=None) -> MatchResult:
    """Pad ground truth with zero-cost no-object rows and solve the assignment."""
    n = _np(mask_logits).shape[0]
    g = len(gt_masks)
    if g > n:
        raise ValueError(f"{g} ground-truth masks exceed {n} queries")
    cost = np.zeros((n, n))
    if g:
        cost[:g] = match_cost_matrix(mask_logits, gt_masks, weights, valid)
    return hungarian_match(cost)


def segmentation_loss(out, gt_masks, gt_classes, weights: LossWeights = LossWeights(), valid=None) -> T.Tensor:
    """Matched mask loss plus weighted class loss for one image.

    ``out`` holds unbatched ``class_logits [N,K+1]`` and ``mask_logits [N,H,W]``;
    ``gt_classes`` are labels 1..K; ``valid`` optionally drops pixels.
    """
    cls, masks = out.class_logits, out.mask_logits
    n, k1 = cls.shape
    gt_masks = np.asarray(gt_masks)
    gt_classes = np.asarray(gt_classes)
    g = len(gt_masks)
    if g > n:
        raise ValueError(f"{g} ground-truth masks exceed {n} queries")
    # canonical gt order makes the result independent of input order, bit for bit
    order = sorted(range(g), key=lambda i: (int(gt_classes[i]), gt_masks[i].astype(np.uint8).tobytes()))
    gt_masks, gt_classes = gt_masks[order], gt_classes[order]
    flat = T.reshape(masks, (n, -1))
    vflat = None if valid is None else np.asarray(valid).reshape(-1)
    result = match(flat.data, gt_masks.reshape(g, -1) if g else gt_masks, weights, vflat)
    assign = np.asarray(result.assignment)
    targets = np.full(n, k1 - 1, dtype=np.int64)
    loss = ce_loss(cls, _targets(targets, assign, gt_classes, g), weights)
    if g:
        q = assign[:g]
        picked = flat[q]
        t = gt_masks.reshape(g, -1).astype(flat.dtype)
        per_bce = T.softplus(picked) - picked * t
        if vflat is None:
            bce = T.mean(per_bce)
        else:
            bce = T.sum(per_bce * vflat.astype(flat.dtype)) * (1.0 / (g * max(vflat.sum(), 1)))
        dice = T.mean(_dice_rows(T.sigmoid(picked), t, weights=vflat))
        loss = loss + weights.bce * bce + weights.dice * dice
    return loss


def _targets(targets, assign, gt_classes, g):
    for slot in range(g):
        targets[assign[slot]] = int(gt_classes[slot]) - 1
    return targets


def neg_likelihood_map(class_logits, mask_logits, inward_grad=False) -> T.Tensor:
    """-clamp(max_k sum_q softmax(C)_qk sigmoid(M)_q, 0, 1) per pixel.

    ``inward_grad`` lets a saturated pixel (marginal above 1) still receive the
    gradient that lowers it; the forward value is unchanged.
    """
    c = T.as_tensor(class_logits)
    m = T.as_tensor(mask_logits)
    *lead, n, k1 = c.shape
    hw = m.shape[-2:]
    probs = T.softmax_masked(c, axis=-1)
    probs = probs[(Ellipsis, slice(0, k1 - 1))]
    mflat = T.reshape(T.sigmoid(m), tuple(lead) + (n, hw[0] * hw[1]))
    marg = T.matmul(T.transpose(probs), mflat)  # [..., K, HW]
    best = T.max(marg, axis=-2)
    return T.reshape(-T.clamp(best, 0.0, 1.0, inward_grad), tuple(lead) + tuple(hw))


def mask_contrastive_loss(l_n, m_ood, margin=0.75, inlier_form="printed") -> T.Tensor:
    """Mean of 1/2 l^2 with l = l_N on inliers, max(0, m - l_N) on outliers.

    ``inlier_form="shifted"`` uses 1 + l_N on inliers instead, so that a
    confident inlier (l_N = -1) costs nothing.
    """
    l_n = T.as_tensor(l_n)
    ood = np.asarray(_np(m_ood), dtype=l_n.dtype)
    if inlier_form == "printed":
        inl = l_n
    elif inlier_form == "shifted":
        inl = l_n + 1.0
    else:
        raise ValueError(f"unknown inlier form {inlier_form!r}")
    out = T.relu(margin - l_n)
    per = inl * (1.0 - ood) + out * ood
    return T.mean(T.square(per)) * 0.5


def outlier_bce_loss(l_n, m_ood, eps=1e-6) -> T.Tensor:
    """BCE on the anomaly probability 1 + l_N against the outlier mask."""
    l_n = T.as_tensor(l_n)
    ood = np.asarray(_np(m_ood), dtype=l_n.dtype)
    p = T.clamp(l_n + 1.0, eps, 1.0 - eps)
    per = T.log(p) * ood + T.log(1.0 - p) * (1.0 - ood)
    return -T.mean(per)


def total_loss_m2a(seg_loss, cl_loss) -> T.Tensor:
    return T.as_tensor(seg_loss) + T.as_tensor(cl_loss)
