"""Finite-difference checks over every loss and attention layer."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import attention as A
from . import losses as L
from . import tensor as T
from .model import Model, ModelConfig, QueryOutput, init_model

TOLERANCE = 1e-4
COMPOSITION_TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _check_bce(rng):
    logits = rng.normal(size=(3, 5))
    t = (rng.random((3, 5)) > 0.5).astype(float)
    return lambda x: L.bce_loss(x, t), [logits]


def _check_dice(rng):
    logits = rng.normal(size=(4, 6))
    t = (rng.random((4, 6)) > 0.5).astype(float)
    return lambda x: L.dice_loss(T.sigmoid(x), t), [logits]


def _check_ce(rng):
    logits = rng.normal(size=(5, 4))
    tgt = np.array([0, 3, 1, 3, 2])
    return lambda x: L.ce_loss(x, tgt), [logits]


def _check_segmentation(rng):
    n, k, h, w = 4, 3, 4, 4
    cls = rng.normal(size=(n, k + 1))
    msk = rng.normal(size=(n, h, w))
    labels = rng.integers(1, k + 1, size=(h, w))
    present = np.unique(labels)
    gt = np.stack([labels == c for c in present]).astype(float)

    def fn(c, m):
        return L.segmentation_loss(QueryOutput(c, m), gt, present)

    return fn, [cls, msk]


def _likelihood_inputs(rng, n=4, k=3, hw=(2, 4)):
    # small logits keep the marginal below 1, away from the clamp
    cls = rng.normal(size=(n, k + 1)) * 0.5
    msk = rng.normal(size=(n,) + hw) - 1.5
    ood = (rng.random(hw) > 0.5).astype(float)
    return cls, msk, ood


def _check_contrastive(rng):
    cls, msk, ood = _likelihood_inputs(rng)
    return lambda c, m: L.mask_contrastive_loss(L.neg_likelihood_map(c, m), ood, 0.75), [cls, msk]


def _check_outlier_bce(rng):
    cls, msk, ood = _likelihood_inputs(rng)
    return lambda c, m: L.outlier_bce_loss(L.neg_likelihood_map(c, m), ood), [cls, msk]


def _attention_inputs(rng, n=3, p=5, c=4):
    x = rng.normal(size=(n, c))
    q = rng.normal(size=(n, c))
    k = rng.normal(size=(p, c))
    v = rng.normal(size=(p, c))
    prior = rng.random((n, p))
    prior[:, 0] = 0.9  # every query keeps at least one foreground and one background key
    prior[:, 1] = 0.1
    return x, q, k, v, prior


def _check_attention(kind):
    def build(rng):
        x, q, k, v, prior = _attention_inputs(rng)
        weight = rng.normal(size=(x.shape[0], x.shape[1]))

        def fn(xi, qi, ki, vi):
            out = A.attend(kind, xi, qi, ki, vi, None if kind == "ca" else prior)
            return T.sum(out * weight)

        return fn, [x, q, k, v]

    return build


# attention weights and queries scaled up so that no parameter's gradient
# sits near the finite-difference roundoff floor
ATTENTION_SCALE = 8.0


def _check_composition(rng):
    cfg = ModelConfig(height=16, width=16, embed_dim=6, num_queries=4, num_layers=3,
                      num_classes=3, attention="gma", ffn_dim=8, seed=int(rng.integers(1 << 30)))
    base = init_model(cfg)
    names = sorted(base.params)
    labels = np.ones((16, 16), dtype=int)
    labels[:6] = 2
    labels[10:, 4:9] = 3
    # piecewise-constant colours keep features distinct at every pyramid level
    colors = rng.random((4, 3))
    image = colors[labels].transpose(2, 0, 1) + 0.05 * rng.normal(size=(3, 16, 16))
    present = np.unique(labels)
    gt = np.stack([labels == c for c in present]).astype(float)

    def fn(*leaves):
        model = Model(cfg, dict(zip(names, leaves)))
        return L.segmentation_loss(model.forward(T.Tensor(image)), gt, present)

    scale = {n: ATTENTION_SCALE if n.endswith(("wq", "wk", "query.embed")) else 1.0 for n in names}
    return fn, [base.params[n].data.astype(np.float64) * scale[n] for n in names]


CHECKS = {
    "bce_loss": (_check_bce, TOLERANCE),
    "dice_loss": (_check_dice, TOLERANCE),
    "ce_loss": (_check_ce, TOLERANCE),
    "segmentation_loss": (_check_segmentation, TOLERANCE),
    "mask_contrastive_loss": (_check_contrastive, TOLERANCE),
    "outlier_bce_loss": (_check_outlier_bce, TOLERANCE),
    "cross_attention": (_check_attention("ca"), TOLERANCE),
    "masked_attention": (_check_attention("ma"), TOLERANCE),
    "global_masked_attention": (_check_attention("gma"), TOLERANCE),
    "forward_and_loss_16x16": (_check_composition, COMPOSITION_TOLERANCE),
}


def flipped_gradient(output, inputs):
    """Sign-flipped analytic gradient; used to prove the suite can fail."""
    return [-g for g in T.gradient(output, inputs)]


def run_gradcheck(seed=0, names=None, gradient_fn=None, eps=1e-5) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        build, tol = CHECKS[name]
        rng = np.random.default_rng([seed, sorted(CHECKS).index(name)])
        fn, inputs = build(rng)
        start = time.perf_counter()
        err = T.grad_check(fn, inputs, eps=eps, gradient_fn=gradient_fn)
        results.append(CheckResult(name, err, tol, time.perf_counter() - start))
    return results
