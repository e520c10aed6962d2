"""Command-line entry point: datagen, train, finetune, infer, eval, gradcheck, ablate."""
from __future__ import annotations

import argparse
import datetime as _dt
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .attention import negative_attention_map
from .datagen import SceneConfig, gen_outlier_pool, generate_dataset, load_dataset
from .io import FormatError, load_mten, save_csv, save_json, save_mten, save_pgm
from .metrics import (
    DomainError,
    auprc,
    component_counts,
    connected_components,
    fpr_at_95tpr,
    merge_component_counts,
)
from .model import ModelConfig, init_model, load_checkpoint, save_checkpoint
from .refinement import build_refinement, refine_scores
from .scoring import InferenceVariant, score_variant
from .trainer import (
    AblationCell,
    TrainConfig,
    TrainingDiverged,
    ablation_run,
    finetune_contrastive,
    predict,
    train_phase1,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2
MANIFEST = "run_manifest.json"


class ValidationError(ValueError):
    pass


# ------------------------------------------------------------------ config

def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment; keys use underscores."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(value, like):
    if isinstance(value, str):
        if isinstance(like, bool):
            return value.lower() in ("1", "true", "yes", "on")
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    return value


def resolve(args, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        for k, v in read_config(args.config).items():
            if k in merged:
                merged[k] = _coerce(v, merged[k])
    for k in defaults:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    return merged


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def write_manifest(out_dir, command, params, inputs, outputs, started, extra=None):
    """Atomic RunManifest next to a command's outputs."""
    manifest = {
        "command": command,
        "config_path": params.pop("config", None),
        "parameters": params,
        "seeds": {"seed": params.get("seed")},
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": sorted(str(o) for o in outputs),
        "tool_version": __version__,
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    save_json(Path(out_dir) / MANIFEST, manifest)
    return manifest


def _size(text):
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise ValidationError(f"size must look like HxW, got {text!r}") from None
    return h, w


def _dataset(path):
    try:
        return load_dataset(path)
    except FileNotFoundError as exc:
        raise ValidationError(str(exc)) from None


def _train_config(p: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in p.items() if k in names}).validate()


def _report_outputs(out, report, stem):
    save_json(out / f"{stem}.json", report.to_json())
    save_csv(out / f"{stem}_loss.csv", [{"step": i, "loss": v} for i, v in enumerate(report.loss_curve)], ["step", "loss"])
    if report.evals:
        save_csv(out / f"{stem}_evals.csv", report.evals)
    from . import plotting

    plotting.loss_curve(report.loss_curve, out / f"{stem}_loss.png", title=stem)


def _check_compatible(model, dataset):
    h, w = dataset.manifest["image_size"]
    cfg = model.config
    if (cfg.height, cfg.width) != (h, w) or cfg.num_classes != dataset.manifest["num_classes"]:
        raise ValidationError(
            f"checkpoint expects {cfg.height}x{cfg.width} with {cfg.num_classes} classes, "
            f"dataset has {h}x{w} with {dataset.manifest['num_classes']}"
        )


# ------------------------------------------------------------------ commands

def cmd_datagen(args):
    started = _now()
    p = resolve(args, {"seed": 0, "scenes": 200, "size": "48x64", "split": "train"})
    if int(p["scenes"]) <= 0:
        raise ValidationError("scene count must be positive")
    h, w = _size(p["size"])
    if h % 8 or w % 8:
        raise ValidationError(f"image size {h}x{w} must be divisible by 8")
    out = Path(args.out)
    generate_dataset(out, int(p["seed"]), int(p["scenes"]), p["split"], SceneConfig(height=h, width=w))
    write_manifest(out, "datagen", p, {}, [out / "manifest.json"], started)
    print(f"wrote {p['scenes']} {p['split']} scenes to {out}")


def cmd_train(args):
    started = _now()
    defaults = {**asdict(TrainConfig()), "embed_dim": 32, "num_queries": 8, "num_layers": 3}
    p = resolve(args, defaults)
    data = _dataset(args.data)
    h, w = data.manifest["image_size"]
    cfg = ModelConfig(height=h, width=w, num_classes=data.manifest["num_classes"], attention=p["attention"],
                      seed=p["seed"], embed_dim=p["embed_dim"], num_queries=p["num_queries"],
                      num_layers=p["num_layers"])
    tcfg = _train_config(p)
    model = init_model(cfg)
    out = Path(args.out)
    save_checkpoint(model, out / "initial_checkpoint")
    try:
        report = train_phase1(model, data, tcfg)
    except TrainingDiverged as exc:
        _report_outputs(out, exc.report, "report")
        raise
    save_checkpoint(model, out / "checkpoint", {"phase": "phase1", "train_config": asdict(tcfg)})
    _report_outputs(out, report, "report")
    write_manifest(out, "train", p, {"data": args.data}, [out / "checkpoint", out / "report.json"], started,
                   {"attention": cfg.attention})
    print(f"phase-1 ({cfg.attention}) final loss {report.loss_curve[-1]:.4f}; checkpoint at {out / 'checkpoint'}")


def cmd_finetune(args):
    started = _now()
    p = resolve(args, asdict(TrainConfig()))
    data = _dataset(args.data)
    if not (Path(args.checkpoint) / "manifest.json").exists():
        raise ValidationError(f"no checkpoint at {args.checkpoint}")
    model = load_checkpoint(args.checkpoint)
    _check_compatible(model, data)
    p["attention"] = model.config.attention
    tcfg = _train_config(p)
    pool = gen_outlier_pool(tcfg.seed, tcfg.outlier_pool_size)
    out = Path(args.out)
    try:
        report = finetune_contrastive(model, data, pool, tcfg)
    except TrainingDiverged as exc:
        _report_outputs(out, exc.report, "report")
        raise
    save_checkpoint(model, out / "checkpoint", {"phase": "phase2", "parent_checkpoint": str(args.checkpoint),
                                               "train_config": asdict(tcfg)})
    _report_outputs(out, report, "report")
    write_manifest(out, "finetune", p, {"data": args.data, "checkpoint": args.checkpoint},
                   [out / "checkpoint", out / "report.json"], started,
                   {"parent_checkpoint": str(args.checkpoint), "attention": model.config.attention})
    print(f"phase-2 ({tcfg.outlier_loss}) final loss {report.loss_curve[-1]:.4f}; checkpoint at {out / 'checkpoint'}")


def cmd_infer(args):
    started = _now()
    p = resolve(args, {"variant": "softmax,sigmoid,identity", "refine": False, "heatmap": False,
                       "negative_attention": False, "threshold": 0.95, "remove": "stuff",
                       "keep_uncovered": True, "seed": 0})
    data = _dataset(args.data)
    model = load_checkpoint(args.checkpoint)
    _check_compatible(model, data)
    variant = InferenceVariant.parse(p["variant"])
    taxonomy = data.taxonomy
    out = Path(args.out)
    outputs = []
    images = data.images()
    pred = predict(model, images)
    for i in range(len(images)):
        c, m = pred.class_logits.data[i], pred.mask_logits.data[i]
        f = score_variant(c, m, variant).astype(np.float32)
        save_mten(out / f"{i:04d}.score.mten", f)
        outputs.append(out / f"{i:04d}.score.mten")
        shown = f
        if p["refine"]:
            r = build_refinement(c, m, taxonomy, p["threshold"], p["remove"], p["keep_uncovered"])
            shown = refine_scores(f, r).astype(np.float32)
            save_mten(out / f"{i:04d}.refined.mten", shown)
            outputs.append(out / f"{i:04d}.refined.mten")
        if p["heatmap"]:
            save_pgm(out / f"{i:04d}.pgm", shown)
            outputs.append(out / f"{i:04d}.pgm")
    if p["negative_attention"]:
        with T.no_grad():
            att = model.forward(images, return_attention=True).attention_weights
        for layer, w in enumerate(att):
            neg = negative_attention_map(w)  # [B, P]
            level = model.config.height * model.config.width // neg.shape[-1]
            stride = int(round(level ** 0.5))
            shape = (model.config.height // stride, model.config.width // stride)
            for i in range(len(images)):
                path = out / f"{i:04d}.negattn.layer{layer}.pgm"
                save_pgm(path, neg[i].reshape(shape))
                outputs.append(path)
    write_manifest(out, "infer", p, {"data": args.data, "checkpoint": args.checkpoint}, outputs, started)
    print(f"scored {len(images)} images into {out}")


def _load_scores(scores_dir, n, which):
    maps = []
    for i in range(n):
        path = Path(scores_dir) / f"{i:04d}.{which}.mten"
        if not path.exists():
            raise ValidationError(f"missing score map {path}")
        maps.append(load_mten(path))
    return np.stack(maps)


def cmd_eval(args):
    started = _now()
    p = resolve(args, {"mode": "pixel", "which": "score", "component_threshold": 0.5, "seed": 0})
    data = _dataset(args.data)
    ood = np.stack([s.ood_mask for s in data.scenes]).astype(bool)
    scores = _load_scores(args.scores, len(data), p["which"])
    if scores.shape != ood.shape:
        raise ValidationError(f"score maps {scores.shape[1:]} do not match dataset {ood.shape[1:]}")
    out = Path(args.out)
    if p["mode"] == "pixel":
        rows = []
        for i in range(len(data)):
            row = {"image": i, "auprc": "", "fpr95": ""}
            if ood[i].any() and not ood[i].all():
                row.update(auprc=auprc(scores[i], ood[i]), fpr95=fpr_at_95tpr(scores[i], ood[i]))
            rows.append(row)
        summary = {"mode": "pixel", "auprc": auprc(scores, ood), "fpr95": fpr_at_95tpr(scores, ood),
                   "images": len(data)}
        save_csv(out / "pixel_metrics.csv", rows + [{"image": "pooled", "auprc": summary["auprc"],
                                                     "fpr95": summary["fpr95"]}], ["image", "auprc", "fpr95"])
        table = "pixel_metrics.csv"
    elif p["mode"] == "component":
        per_image = []
        for i in range(len(data)):
            gt = connected_components(ood[i])
            if gt.count == 0:
                continue
            pred = connected_components(scores[i] >= p["component_threshold"])
            per_image.append(component_counts(gt, pred))
        res = merge_component_counts(per_image)
        summary = {"mode": "component", "mean_siou": res.mean_siou, "mean_ppv": res.mean_ppv,
                   "f1_star": res.f1_star_avg, "components": len(res.sious)}
        save_csv(out / "component_metrics.csv", res.table, ["tau", "tp", "fn", "fp", "f1"])
        table = "component_metrics.csv"
    else:
        raise ValidationError(f"unknown eval mode {p['mode']!r}")
    save_json(out / "metrics.json", summary)
    write_manifest(out, "eval", p, {"data": args.data, "scores": args.scores},
                   [out / "metrics.json", out / table], started)
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))


def cmd_gradcheck(args):
    from .gradcheck import flipped_gradient, run_gradcheck

    started = _now()
    p = resolve(args, {"seed": 0})
    results = run_gradcheck(seed=p["seed"], gradient_fn=flipped_gradient if args.inject_sign_flip else None)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_error:.3e}  tol={r.tolerance:.0e}  "
              f"{'PASS' if r.passed else 'FAIL'}  ({r.seconds:.1f}s)")
    if args.out:
        out = Path(args.out)
        rows = [{"name": r.name, "max_rel_error": r.max_rel_error, "tolerance": r.tolerance, "passed": r.passed}
                for r in results]
        save_csv(out / "gradcheck.csv", rows)
        write_manifest(out, "gradcheck", p, {}, [out / "gradcheck.csv"], started)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


TABLES = {
    # name: (cells, label column)
    "a": ("table4a_components", [AblationCell("ma", False, False), AblationCell("gma", False, False),
                                 AblationCell("gma", True, False), AblationCell("gma", True, True)]),
    "b": ("table4b_margin", [AblationCell("gma", True, True, margin=m) for m in (0.5, 0.75, 0.9, 1.0)]),
    "c": ("table4c_attention", [AblationCell(k, True, True) for k in ("ca", "ma", "gma")]),
    "d": ("table4d_refinement", [AblationCell("gma", True, False), AblationCell("gma", True, True, remove="stuff"),
                                 AblationCell("gma", True, True, remove="things")]),
    "e": ("table4e_outlier_prob", [AblationCell("gma", True, True, p_outlier=q) for q in (0.1, 0.2, 0.5, 1.0)]),
}


def cmd_ablate(args):
    from . import plotting

    started = _now()
    p = resolve(args, {**asdict(TrainConfig()), "tables": "a,b,c,d,e"})
    train = _dataset(args.train_data)
    test = _dataset(args.test_data)
    h, w = train.manifest["image_size"]
    mcfg = ModelConfig(height=h, width=w, num_classes=train.manifest["num_classes"], seed=p["seed"])
    tcfg = _train_config(p)
    wanted = [t.strip() for t in str(p["tables"]).split(",") if t.strip()]
    unknown = set(wanted) - set(TABLES)
    if unknown:
        raise ValidationError(f"unknown tables {sorted(unknown)}")
    cells = []
    for t in wanted:
        cells.extend(c for c in TABLES[t][1] if c not in cells)
    rows = ablation_run(train, test, cells, tcfg, mcfg,
                        progress=lambda c, r: print(f"{c.label()}: AuPRC={r.get('auprc', float('nan')):.4f} "
                                                    f"FPR95={r.get('fpr95', float('nan')):.4f} mIoU={r['miou']:.4f}"))
    by_cell = dict(zip(cells, rows))
    out = Path(args.out)
    outputs = []
    cols = ["attention", "contrastive", "refine", "margin", "p_outlier", "remove", "auprc", "fpr95", "miou", "gap"]
    for t in wanted:
        stem, tcells = TABLES[t]
        table = [by_cell[c] for c in tcells]
        save_csv(out / f"{stem}.csv", table, cols)
        labelled = [{**r, "cell": c.label()} for c, r in zip(tcells, table)]
        plotting.metric_bars(labelled, "cell", ["auprc", "fpr95", "miou"], out / f"{stem}.png", stem)
        outputs += [out / f"{stem}.csv", out / f"{stem}.png"]
    write_manifest(out, "ablate", p, {"train_data": args.train_data, "test_data": args.test_data}, outputs, started)


# ------------------------------------------------------------------ parser

def _train_flags(sp, phase):
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--weight-decay", dest="weight_decay", type=float)
    if phase == 1:
        sp.add_argument("--attention", choices=["ca", "ma", "gma"])
        sp.add_argument("--iters", dest="phase1_iters", type=int)
        sp.add_argument("--lr", dest="lr1", type=float)
        sp.add_argument("--embed-dim", dest="embed_dim", type=int)
        sp.add_argument("--num-queries", dest="num_queries", type=int)
        sp.add_argument("--num-layers", dest="num_layers", type=int)
    else:
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--iters", dest="phase2_iters", type=int)
        sp.add_argument("--lr", dest="lr2", type=float)
        sp.add_argument("--margin", type=float)
        sp.add_argument("--p-outlier", dest="p_outlier", type=float)
        sp.add_argument("--outlier-loss", dest="outlier_loss", choices=["cl", "bce"])
        sp.add_argument("--cl-weight", dest="cl_weight", type=float)
        sp.add_argument("--inlier-form", dest="inlier_form", choices=["printed", "shifted"])
        sp.add_argument("--pool-size", dest="outlier_pool_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskood", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="flat key = value file; flags override it")
        sp.set_defaults(func=fn)
        return sp

    sp = add("datagen", cmd_datagen, "generate a synthetic split")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--scenes", type=int)
    sp.add_argument("--size")
    sp.add_argument("--split", choices=["train", "val", "test"])
    sp.add_argument("--out", required=True)

    _train_flags(add("train", cmd_train, "phase-1 closed-set training"), 1)
    _train_flags(add("finetune", cmd_finetune, "phase-2 outlier fine-tuning"), 2)

    sp = add("infer", cmd_infer, "write anomaly score maps")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--variant")
    sp.add_argument("--refine", action="store_const", const=True)
    sp.add_argument("--strict-refine", dest="keep_uncovered", action="store_const", const=False,
                    help="zero pixels covered by no confident thing/road mask")
    sp.add_argument("--remove", choices=["stuff", "things"])
    sp.add_argument("--threshold", type=float)
    sp.add_argument("--heatmap", action="store_const", const=True)
    sp.add_argument("--negative-attention", dest="negative_attention", action="store_const", const=True)

    sp = add("eval", cmd_eval, "pixel or component metrics")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mode", choices=["pixel", "component"])
    sp.add_argument("--which", choices=["score", "refined"])
    sp.add_argument("--component-threshold", dest="component_threshold", type=float)

    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out")
    sp.add_argument("--inject-sign-flip", action="store_true", help="test hook: negate analytic gradients")

    sp = add("ablate", cmd_ablate, "ablation tables")
    sp.add_argument("--train-data", required=True)
    sp.add_argument("--test-data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--tables", help="comma list from a,b,c,d,e")
    sp.add_argument("--phase1-iters", dest="phase1_iters", type=int)
    sp.add_argument("--phase2-iters", dest="phase2_iters", type=int)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
    except (TrainingDiverged, T.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, FormatError, DomainError, T.DimensionError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK if code is None else int(code)


if __name__ == "__main__":
    sys.exit(main())
