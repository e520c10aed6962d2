"""Pixel-level and component-level anomaly segmentation metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

TAU_GRID = tuple(round(0.25 + 0.05 * i, 2) for i in range(11))


class DomainError(ValueError):
    pass


@dataclass
class PixelEvalResult:
    auprc: float
    fpr95: float
    pr_points: list = field(default_factory=list)


@dataclass
class ComponentSet:
    labels: np.ndarray
    count: int

    def pixels(self, k: int) -> np.ndarray:
        return np.argwhere(self.labels == k)

    def mask(self, k: int) -> np.ndarray:
        return self.labels == k


@dataclass
class ComponentEvalResult:
    mean_siou: float
    mean_ppv: float
    f1_star_avg: float
    table: list = field(default_factory=list)  # dicts: tau, tp, fn, fp, f1
    sious: list = field(default_factory=list)
    ppvs: list = field(default_factory=list)


# ---------------------------------------------------------------- pixel level

def _sweep(scores, gt):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(gt).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise DomainError("scores and ground truth differ in size")
    pos = int(y.sum())
    neg = y.size - pos
    if pos == 0 or neg == 0:
        raise DomainError("ground truth needs at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # last index of every run of equal scores
    last = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    return s[last], tp[last], fp[last], pos, neg


def pr_curve(scores, gt) -> list:
    """(precision, recall, threshold) per distinct score, thresholds descending."""
    thr, tp, fp, pos, _ = _sweep(scores, gt)
    return [(t / (t + f), t / pos, float(g)) for g, t, f in zip(thr, tp.tolist(), fp.tolist())]


def auprc(scores, gt) -> float:
    """Average precision: sum of recall steps times precision."""
    _, tp, fp, pos, _ = _sweep(scores, gt)
    precision = tp / (tp + fp)
    recall = tp / pos
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float((steps * precision).sum())


def fpr_at_95tpr(scores, gt) -> float:
    """FPR at the largest threshold whose TPR reaches 0.95."""
    _, tp, fp, pos, neg = _sweep(scores, gt)
    hit = np.nonzero(tp * 100 >= 95 * pos)[0]
    return float(fp[hit[0]] / neg)


def pixel_eval(scores, gt) -> PixelEvalResult:
    return PixelEvalResult(auprc(scores, gt), fpr_at_95tpr(scores, gt), pr_curve(scores, gt))


# ---------------------------------------------------------------- components

def _structure(connectivity: int):
    if connectivity == 8:
        return np.ones((3, 3), dtype=int)
    if connectivity == 4:
        return ndimage.generate_binary_structure(2, 1)
    raise ValueError("connectivity must be 4 or 8")


def connected_components(binary, connectivity=8) -> ComponentSet:
    """Maximal connected regions, ids assigned in raster order of first pixel."""
    b = np.asarray(binary).astype(bool)
    labels, count = ndimage.label(b, structure=_structure(connectivity))
    if count:
        flat = labels.reshape(-1)
        _, first = np.unique(flat, return_index=True)
        ids = np.unique(flat)
        order = ids[np.argsort(first)]
        order = order[order != 0]
        remap = np.zeros(count + 1, dtype=np.int32)
        remap[order] = np.arange(1, count + 1, dtype=np.int32)
        labels = remap[labels]
    return ComponentSet(labels.astype(np.int32), int(count))


def _pred_union(k_mask, pred: ComponentSet):
    hit = np.unique(pred.labels[k_mask])
    hit = hit[hit != 0]
    return np.isin(pred.labels, hit) if hit.size else np.zeros_like(k_mask)


def siou(k: int, pred: ComponentSet, gt: ComponentSet) -> float:
    """Component IoU whose union drops pixels that lie in other gt components."""
    k_mask = gt.labels == k
    if not k_mask.any():
        raise DomainError(f"ground-truth component {k} is empty")
    union_pred = _pred_union(k_mask, pred)
    adjust = union_pred & ~k_mask & (gt.labels != 0)
    inter = int((k_mask & union_pred).sum())
    denom = int(((k_mask | union_pred) & ~adjust).sum())
    return inter / denom


def iou_plain(k: int, pred: ComponentSet, gt: ComponentSet) -> float:
    k_mask = gt.labels == k
    union_pred = _pred_union(k_mask, pred)
    return int((k_mask & union_pred).sum()) / int((k_mask | union_pred).sum())


def ppv(pred_mask, gt_anomaly) -> float:
    p = np.asarray(pred_mask).astype(bool)
    n = int(p.sum())
    if n == 0:
        raise DomainError("predicted component is empty")
    return int((p & np.asarray(gt_anomaly).astype(bool)).sum()) / n


def _f1(tp, fn, fp):
    denom = 2 * tp + fn + fp
    return 1.0 if denom == 0 else 2 * tp / denom


def component_counts(gt: ComponentSet, pred: ComponentSet, taus=TAU_GRID):
    """Per-component sIoU/PPV and per-tau TP/FN/FP counts for one image."""
    gt_anom = gt.labels > 0
    sious = [siou(k, pred, gt) for k in range(1, gt.count + 1)]
    ppvs = [ppv(pred.labels == j, gt_anom) for j in range(1, pred.count + 1)]
    counts = []
    for tau in taus:
        tp = sum(v > tau for v in sious)
        fp = sum(v <= tau for v in ppvs)
        counts.append((tau, tp, len(sious) - tp, fp))
    return sious, ppvs, counts


def summarize_components(sious, ppvs, counts) -> ComponentEvalResult:
    table = [{"tau": tau, "tp": tp, "fn": fn, "fp": fp, "f1": _f1(tp, fn, fp)} for tau, tp, fn, fp in counts]
    f1_avg = float(np.mean([row["f1"] for row in table])) if table else 0.0
    return ComponentEvalResult(
        mean_siou=float(np.mean(sious)) if sious else 0.0,
        mean_ppv=float(np.mean(ppvs)) if ppvs else 0.0,
        f1_star_avg=f1_avg,
        table=table,
        sious=list(sious),
        ppvs=list(ppvs),
    )


def f1_star(gt: ComponentSet, pred: ComponentSet, taus=TAU_GRID) -> ComponentEvalResult:
    return summarize_components(*component_counts(gt, pred, taus))


def merge_component_counts(per_image) -> ComponentEvalResult:
    """Dataset aggregate: pooled component lists and summed per-tau counts."""
    sious, ppvs, summed = [], [], {}
    for s, p, counts in per_image:
        sious.extend(s)
        ppvs.extend(p)
        for tau, tp, fn, fp in counts:
            acc = summed.setdefault(tau, [0, 0, 0])
            acc[0] += tp
            acc[1] += fn
            acc[2] += fp
    counts = [(tau, *summed[tau]) for tau in sorted(summed)]
    return summarize_components(sious, ppvs, counts)


# ---------------------------------------------------------------- in-distribution

def iou_counts(pred_labels, gt_labels, num_classes, void=0):
    p = np.asarray(pred_labels).reshape(-1)
    g = np.asarray(gt_labels).reshape(-1)
    keep = g != void
    p, g = p[keep], g[keep]
    inter = np.zeros(num_classes + 1, dtype=np.int64)
    union = np.zeros(num_classes + 1, dtype=np.int64)
    present = np.zeros(num_classes + 1, dtype=bool)
    for k in range(1, num_classes + 1):
        pk, gk = p == k, g == k
        inter[k] = int((pk & gk).sum())
        union[k] = int((pk | gk).sum())
        present[k] = bool(gk.any())
    return inter, union, present


def miou_from_counts(inter, union, present) -> float:
    ks = np.nonzero(present)[0]
    if ks.size == 0:
        return 0.0
    return float(np.mean(inter[ks] / union[ks]))


def miou(pred_labels, gt_labels, num_classes, void=0) -> float:
    """Mean IoU over classes present in the ground truth; void pixels ignored."""
    return miou_from_counts(*iou_counts(pred_labels, gt_labels, num_classes, void))
