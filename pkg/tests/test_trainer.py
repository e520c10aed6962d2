from dataclasses import replace

import numpy as np
import pytest

from maskood import datagen as D
from maskood import losses as L
from maskood import model as M
from maskood import tensor as T
from maskood import trainer as TR

import oracles

SMALL = D.SceneConfig(height=16, width=24)


def small_model(attention="gma", h=16, w=24, seed=0):
    return M.init_model(M.ModelConfig(height=h, width=w, embed_dim=8, num_queries=8, num_layers=2,
                                      num_classes=D.NUM_CLASSES, ffn_dim=16, attention=attention, seed=seed))


def fast_config(**kw):
    base = dict(phase1_iters=20, phase2_iters=10, batch_size=2, lr1=1e-2, lr2=1e-3, seed=0)
    base.update(kw)
    return TR.TrainConfig(**base)


# ---------------------------------------------------------------- adamw

def test_adamw_zero_grad_identity():
    p = {"w": np.array([0.3, -1.2, 2.0])}
    before = p["w"].copy()
    state = TR.AdamWState()
    for _ in range(3):
        TR.adamw_step(p, {"w": np.zeros(3)}, state, 1e-2, 0.0)
    np.testing.assert_array_equal(p["w"], before)


def test_adamw_first_step_closed_form():
    g = np.array([0.3, -2.0, 1e-3])
    p = {"w": np.zeros(3)}
    TR.adamw_step(p, {"w": g}, TR.AdamWState(), 1e-2, 0.0)
    np.testing.assert_allclose(p["w"], -np.sign(g) * 1e-2 * np.abs(g) / (np.abs(g) + 1e-8), rtol=1e-15)
    assert np.all(np.abs(np.abs(p["w"]) - 1e-2) < 1e-7)


def test_adamw_matches_reference_on_quadratic():
    a = np.array([[2.0, 0.5], [0.5, 1.0]])
    grad = lambda x: a @ x - np.array([1.0, -1.0])  # noqa: E731
    p0 = np.array([1.5, -0.7])
    want = oracles.adamw_reference(p0, grad, 10, 0.05, 0.05)
    p = {"w": p0.copy()}
    state = TR.AdamWState()
    for _ in range(10):
        TR.adamw_step(p, {"w": grad(p["w"])}, state, 0.05, 0.05)
    np.testing.assert_allclose(p["w"], want, rtol=1e-14)
    assert state.step == 10


def test_adamw_tensor_params_and_shape_error():
    t = T.Tensor(np.ones(2, np.float32))
    TR.adamw_step({"t": t}, {"t": np.ones(2)}, TR.AdamWState(), 0.1)
    assert t.data.dtype == np.float32 and np.allclose(t.data, 0.9)
    with pytest.raises(T.DimensionError):
        TR.adamw_step({"t": t}, {"t": np.ones(3)}, TR.AdamWState(), 0.1)


# ---------------------------------------------------------------- config

@pytest.mark.parametrize("bad", [dict(lr1=0), dict(lr2=-1), dict(phase1_iters=0), dict(phase2_iters=0),
                                 dict(outlier_loss="xx"), dict(cl_weight=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TR.TrainConfig(**bad).validate()


def test_config_defaults():
    c = TR.TrainConfig()
    assert (c.lr1, c.lr2, c.weight_decay, c.margin, c.p_outlier) == (1e-4, 1e-5, 0.05, 0.75, 0.2)
    assert (c.phase1_iters, c.phase2_iters, c.batch_size) == (2000, 400, 8)


# ---------------------------------------------------------------- batches

def test_gt_masks_exclude_ood_pixels():
    labels = np.array([[1, 1], [2, 3]])
    ood = np.array([[0, 0], [0, 1]])
    masks, classes, valid = TR.gt_masks_for(labels, ood)
    assert classes.tolist() == [1, 2]
    assert masks.sum() == 3 and not valid[1, 1]


def test_p_outlier_zero_reduces_to_inlier_objective():
    scenes = D.make_split(0, 2, "train", SMALL)
    m = small_model()
    w = L.LossWeights()
    seg = float(TR.batch_loss(m, scenes, w).data)
    out = m.forward(np.stack([s.image for s in scenes]))
    ln = L.neg_likelihood_map(out.class_logits, out.mask_logits, True)
    inlier_cl = float(L.mask_contrastive_loss(ln, np.zeros((2, 16, 24)), 0.75).data)
    full = float(TR.batch_loss(m, scenes, w, "cl").data)
    assert full == pytest.approx(seg + inlier_cl, rel=1e-6)
    weighted = float(TR.batch_loss(m, scenes, w, "cl", cl_weight=3.0).data)
    assert weighted == pytest.approx(seg + 3 * inlier_cl, rel=1e-6)


# ---------------------------------------------------------------- phase 1

def test_overfit_single_scene_500_steps():
    # calibrated once: a scene without small thing components, then frozen
    scene = D.gen_scene(np.random.default_rng(2), D.SceneConfig(height=24, width=32, max_things=0))
    m = M.init_model(M.ModelConfig(height=24, width=32, embed_dim=16, num_queries=8, num_layers=3,
                                   num_classes=D.NUM_CLASSES, ffn_dim=32, seed=0))
    report = TR.train_phase1(m, [scene], TR.TrainConfig(phase1_iters=500, batch_size=1, lr1=1e-2, weight_decay=0.0))
    assert report.loss_curve[-1] < 0.1
    assert len(report.loss_curve) == 500


def test_step0_loss_matches_initial_checkpoint(tmp_path):
    data = D.make_split(0, 4, "train", SMALL)
    m = small_model()
    M.save_checkpoint(m, tmp_path / "ck")
    cfg = fast_config(phase1_iters=3)
    report = TR.train_phase1(m, data, cfg)
    back = M.load_checkpoint(tmp_path / "ck")
    rng = np.random.default_rng([cfg.seed, 1])
    first = D.sample_batch(data, [], 0.0, cfg.batch_size, rng)[0]
    assert float(TR.batch_loss(back, first, L.LossWeights()).data) == report.loss_curve[0]


def test_phase1_train_miou_increases():
    data = D.in_memory_dataset(1, 8, "train", SMALL)
    m = small_model()
    before = TR.evaluate(m, data)["miou"]
    TR.train_phase1(m, data, fast_config(phase1_iters=150, batch_size=4))
    after = TR.evaluate(m, data)["miou"]
    assert after > before


def test_training_bit_reproducible():
    data = D.make_split(0, 4, "train", SMALL)
    a, b = small_model(), small_model()
    ra = TR.train_phase1(a, data, fast_config())
    rb = TR.train_phase1(b, data, fast_config())
    assert ra.loss_curve == rb.loss_curve
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_divergence_aborts_with_report():
    scene = D.gen_scene(0, SMALL)
    scene.image[:] = np.inf
    with pytest.raises(TR.TrainingDiverged) as err:
        TR.train_phase1(small_model(), [scene], fast_config())
    assert err.value.report.status == "diverged" and err.value.report.loss_curve == []


def test_eval_fn_intervals():
    data = D.make_split(0, 2, "train", SMALL)
    rep = TR.train_phase1(small_model(), data, fast_config(phase1_iters=6, eval_every=3),
                          eval_fn=lambda m: {"x": 1.0})
    assert [e["step"] for e in rep.evals] == [3, 6]
    assert rep.to_json()["phase"] == "phase1"


# ---------------------------------------------------------------- phase 2

def test_finetune_runs_and_is_reproducible():
    data = D.make_split(0, 4, "train", SMALL)
    pool = D.gen_outlier_pool(0, 5)
    reports = []
    for _ in range(2):
        m = small_model()
        reports.append(TR.finetune_contrastive(m, data, pool, fast_config(p_outlier=0.5)))
    assert reports[0].loss_curve == reports[1].loss_curve
    assert reports[0].phase == "phase2" and len(reports[0].loss_curve) == 10


def test_finetune_bce_variant():
    data = D.make_split(0, 4, "train", SMALL)
    rep = TR.finetune_contrastive(small_model(), data, D.gen_outlier_pool(0, 5),
                                  fast_config(outlier_loss="bce", phase2_iters=3))
    assert all(np.isfinite(rep.loss_curve))


# ---------------------------------------------------------------- evaluation

def test_evaluate_keys_and_ranges():
    test = D.in_memory_dataset(7, 4, "test", SMALL)
    res = TR.evaluate(small_model(), test)
    assert set(res) == {"auprc", "fpr95", "gap", "miou"}
    assert 0 <= res["auprc"] <= 1 and 0 <= res["fpr95"] <= 1 and 0 <= res["miou"] <= 1


def test_refined_scores_never_exceed_raw():
    test = D.in_memory_dataset(7, 4, "test", SMALL)
    m = small_model()
    raw, _ = TR.anomaly_scores(m, test.images())
    for keep in (True, False):
        ref, _ = TR.anomaly_scores(m, test.images(), refine=True, keep_uncovered=keep)
        assert np.all(ref <= raw)


def test_median_gap():
    s = np.array([0.9, 0.8, 0.1, 0.2, 0.3])
    assert TR.median_gap(s, [1, 1, 0, 0, 0]) == pytest.approx(0.85 - 0.2)


# ---------------------------------------------------------------- ablation

def test_single_cell_grid_equals_direct_run():
    train = D.in_memory_dataset(0, 4, "train", SMALL)
    test = D.in_memory_dataset(0, 3, "test", SMALL)
    tcfg = fast_config(outlier_pool_size=5)
    mcfg = small_model().config
    cell = TR.AblationCell("ma", True, True)
    (row,) = TR.ablation_run(train, test, [cell], tcfg, mcfg)
    m = M.init_model(replace(mcfg, attention="ma"))
    TR.train_phase1(m, train, replace(tcfg, attention="ma"))
    TR.finetune_contrastive(m, train, D.gen_outlier_pool(tcfg.seed, 5), replace(tcfg, attention="ma"))
    direct = TR.evaluate(m, test, refine=True)
    for k, v in direct.items():
        assert row[k] == v
    assert row["attention"] == "ma" and cell.label().startswith("ma|cl=1|rm=1")
