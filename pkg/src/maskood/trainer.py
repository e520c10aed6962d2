"""Two-phase training, evaluation and the ablation grid."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses as L
from . import tensor as T
from .datagen import TAXONOMY, gen_outlier_pool, sample_batch
from .metrics import auprc, fpr_at_95tpr, iou_counts, miou_from_counts
from .model import Model, ModelConfig, QueryOutput, init_model, predict_labels
from .refinement import build_refinement, refine_scores
from .scoring import DEFAULT_VARIANT, score_variant


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    phase1_iters: int = 2000
    phase2_iters: int = 400
    batch_size: int = 8
    lr1: float = 1e-4
    lr2: float = 1e-5
    weight_decay: float = 0.05
    margin: float = 0.75
    p_outlier: float = 0.2
    seed: int = 0
    attention: str = "gma"
    outlier_loss: str = "cl"  # "cl" or "bce"
    cl_weight: float = 1.0  # multiplier on the outlier term
    inlier_form: str = "printed"
    inward_clamp: bool = True  # saturated marginals still pass the lowering gradient
    outlier_pool_size: int = 300
    eval_every: int = 0
    log_every: int = 1

    def validate(self):
        if self.lr1 <= 0 or self.lr2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.phase1_iters < 1 or self.phase2_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.cl_weight < 0:
            raise ValueError("cl_weight must be >= 0")
        if self.outlier_loss not in ("cl", "bce"):
            raise ValueError(f"unknown outlier loss {self.outlier_loss!r}")
        return self


@dataclass
class RunReport:
    phase: str
    config: dict
    loss_curve: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    wall_clock: float = 0.0
    status: str = "ok"

    def to_json(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ optimiser

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr, weight_decay=0.0,
               betas=(0.9, 0.999), eps=1e-8) -> AdamWState:
    """Decoupled weight-decay Adam update, in place on ``params`` (arrays or Tensors)."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        arr = p.data if isinstance(p, T.Tensor) else p
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != arr.shape:
            raise T.DimensionError(f"gradient shape {g.shape} != parameter shape {arr.shape} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(arr.shape, dtype=np.float64)
            v = np.zeros(arr.shape, dtype=np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        old = arr.astype(np.float64)
        new = old - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * old
        if isinstance(p, T.Tensor):
            p.data = new.astype(arr.dtype)
        else:
            arr[...] = new
    return state


# ------------------------------------------------------------------ batches

def gt_masks_for(labels, ood_mask=None):
    """One binary mask per class present among valid pixels, plus the class ids."""
    valid = np.ones(labels.shape, dtype=bool) if ood_mask is None else ood_mask == 0
    present = [int(k) for k in np.unique(labels[valid]) if k != 0]
    masks = np.stack([(labels == k) & valid for k in present]).astype(np.float32) if present else np.zeros((0,) + labels.shape, np.float32)
    return masks, np.asarray(present, dtype=np.int64), valid


def batch_loss(model: Model, samples, weights: L.LossWeights, outlier_loss=None, inlier_form="printed",
               inward_clamp=True, cl_weight=1.0):
    """Mean segmentation loss over the batch, optionally plus an outlier term."""
    images = np.stack([s.image for s in samples])
    out = model.forward(images)
    total = None
    for b, s in enumerate(samples):
        masks, classes, valid = gt_masks_for(s.labels, s.ood_mask)
        single = QueryOutput(out.class_logits[b], out.mask_logits[b])
        seg = L.segmentation_loss(single, masks, classes, weights, valid=None if valid.all() else valid.astype(np.float32))
        total = seg if total is None else total + seg
    total = total * (1.0 / len(samples))
    if outlier_loss is not None:
        ood = np.stack([s.ood_mask for s in samples]).astype(np.float32)
        l_n = L.neg_likelihood_map(out.class_logits, out.mask_logits, inward_clamp)
        if outlier_loss == "cl":
            extra = L.mask_contrastive_loss(l_n, ood, weights.margin, inlier_form)
        else:
            extra = L.outlier_bce_loss(l_n, ood)
        if cl_weight != 1.0:
            extra = extra * cl_weight
        total = L.total_loss_m2a(total, extra)
    return total


def _train_loop(model, steps, lr, weight_decay, draw, loss_fn, report, eval_fn=None, eval_every=0):
    params = model.parameters()
    names = sorted(params)
    state = AdamWState()
    start = time.perf_counter()
    for step in range(steps):
        samples = draw(step)
        try:
            loss = loss_fn(samples)
            value = float(loss.data)
        except T.NumericError:
            value = float("nan")
        if not np.isfinite(value):
            report.status = "diverged"
            report.wall_clock = time.perf_counter() - start
            raise TrainingDiverged(f"non-finite loss at step {step}", report)
        report.loss_curve.append(value)
        grads = T.gradient(loss, [params[n] for n in names])
        adamw_step(params, dict(zip(names, grads)), state, lr, weight_decay)
        if eval_fn is not None and eval_every and (step + 1) % eval_every == 0:
            report.evals.append({"step": step + 1, **eval_fn(model)})
    report.wall_clock = time.perf_counter() - start
    return report


def train_phase1(model: Model, dataset, config: TrainConfig, eval_fn=None) -> RunReport:
    """Closed-set training on inlier scenes with the matched set loss."""
    config.validate()
    weights = L.LossWeights(margin=config.margin)
    scenes = dataset.scenes if hasattr(dataset, "scenes") else list(dataset)
    rng = np.random.default_rng([config.seed, 1])
    report = RunReport("phase1", asdict(config))

    def draw(_):
        return sample_batch(scenes, [], 0.0, config.batch_size, rng)[0]

    return _train_loop(
        model, config.phase1_iters, config.lr1, config.weight_decay, draw,
        lambda s: batch_loss(model, s, weights), report, eval_fn, config.eval_every,
    )


def finetune_contrastive(model: Model, dataset, outlier_pool, config: TrainConfig, eval_fn=None) -> RunReport:
    """Fine-tuning on outlier-mixed batches with segmentation + outlier loss."""
    config.validate()
    weights = L.LossWeights(margin=config.margin)
    scenes = dataset.scenes if hasattr(dataset, "scenes") else list(dataset)
    if outlier_pool is None:
        outlier_pool = gen_outlier_pool(config.seed, config.outlier_pool_size)
    rng = np.random.default_rng([config.seed, 2])
    report = RunReport("phase2", asdict(config))

    def draw(_):
        return sample_batch(scenes, outlier_pool, config.p_outlier, config.batch_size, rng)[0]

    return _train_loop(
        model, config.phase2_iters, config.lr2, config.weight_decay, draw,
        lambda s: batch_loss(model, s, weights, config.outlier_loss, config.inlier_form,
                             config.inward_clamp, config.cl_weight),
        report, eval_fn, config.eval_every,
    )


# ------------------------------------------------------------------ evaluation

def predict(model: Model, images, chunk=16) -> QueryOutput:
    """Batched no-grad forward returning plain arrays inside the output."""
    cls, msk = [], []
    with T.no_grad():
        for i in range(0, len(images), chunk):
            out = model.forward(np.asarray(images[i : i + chunk]))
            cls.append(out.class_logits.data)
            msk.append(out.mask_logits.data)
    return QueryOutput(T.Tensor(np.concatenate(cls)), T.Tensor(np.concatenate(msk)))


def anomaly_scores(model: Model, images, refine=False, variant=DEFAULT_VARIANT, taxonomy=TAXONOMY,
                   remove="stuff", keep_uncovered=True, threshold=0.95):
    out = predict(model, images)
    scores = score_variant(out.class_logits.data, out.mask_logits.data, variant)
    if refine:
        r = np.stack([
            build_refinement(c, m, taxonomy, threshold, remove, keep_uncovered)
            for c, m in zip(out.class_logits.data, out.mask_logits.data)
        ])
        scores = refine_scores(scores, r)
    return scores, out


def median_gap(scores, ood) -> float:
    s = np.asarray(scores).reshape(-1)
    o = np.asarray(ood).reshape(-1).astype(bool)
    return float(np.median(s[o]) - np.median(s[~o]))


def evaluate(model: Model, dataset, refine=False, keep_uncovered=True, remove="stuff") -> dict:
    """Pooled pixel metrics, score gap and mIoU (ood pixels void) on a split."""
    images = dataset.images()
    ood = np.stack([s.ood_mask for s in dataset.scenes])
    labels = np.stack([s.labels for s in dataset.scenes])
    scores, out = anomaly_scores(model, images, refine=refine, keep_uncovered=keep_uncovered, remove=remove)
    result = {}
    if ood.any() and not ood.all():
        result["auprc"] = auprc(scores, ood)
        result["fpr95"] = fpr_at_95tpr(scores, ood)
        result["gap"] = median_gap(scores, ood)
    pred = predict_labels(out)
    gt = np.where(ood > 0, 0, labels)
    result["miou"] = miou_from_counts(*iou_counts(pred, gt, model.config.num_classes))
    return result


# ------------------------------------------------------------------ ablations

@dataclass(frozen=True)
class AblationCell:
    attention: str = "gma"
    contrastive: bool = True
    refine: bool = True
    margin: float = 0.75
    p_outlier: float = 0.2
    remove: str = "stuff"

    def label(self) -> str:
        return (f"{self.attention}|cl={int(self.contrastive)}|rm={int(self.refine)}"
                f"|m={self.margin}|p={self.p_outlier}|rm_from={self.remove}")


def ablation_run(train_set, test_set, grid, train_config: TrainConfig, model_config: ModelConfig,
                 progress=None) -> list:
    """Train and evaluate every cell with a shared seed; phase-1 models are reused."""
    phase1_cache: dict = {}
    phase2_cache: dict = {}
    rows = []
    pool = gen_outlier_pool(train_config.seed, train_config.outlier_pool_size)
    for cell in grid:
        if cell.attention not in phase1_cache:
            m = init_model(replace(model_config, attention=cell.attention))
            train_phase1(m, train_set, replace(train_config, attention=cell.attention))
            phase1_cache[cell.attention] = m
        model = phase1_cache[cell.attention]
        if cell.contrastive:
            key = (cell.attention, cell.margin, cell.p_outlier)
            if key not in phase2_cache:
                ft = model.copy()
                finetune_contrastive(ft, train_set, pool, replace(train_config, attention=cell.attention,
                                                                  margin=cell.margin, p_outlier=cell.p_outlier))
                phase2_cache[key] = ft
            model = phase2_cache[key]
        metrics = evaluate(model, test_set, refine=cell.refine, remove=cell.remove)
        row = {**asdict(cell), **metrics}
        rows.append(row)
        if progress:
            progress(cell, row)
    return rows
