"""End-to-end command implementations behind the CLI.

Each command reads its upstream artifacts out of the run directory
(``<output_dir>/<run-id>/``), writes its own under a fixed name, and is
idempotent: the run id derives from the configuration digest, so a rerun
with the same configuration overwrites identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import io, wfdb
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .dataset import (
    get_scheme,
    horizontal_shift_augment,
    map_class,
    patient_level_split,
    rebalance_by_discard,
    stratified_split,
)
from .errors import EcgFusionError, GeometryMismatch
from .metrics import render_report
from .nn import ModelSpec, MultiModalNet
from .prep import (
    SmoothingConfig,
    compute_global_range,
    default_window_order,
    prepare_beat,
    rasterize,
    segment_beats,
)
from .training import (
    ArrayDataset,
    TrainConfig,
    evaluate,
    random_search,
    train,
    transfer,
)


def _dataset_dir(cfg: RunConfig) -> Path:
    d = cfg.s("dataset_dir")
    if not d:
        raise ConfigError("dataset_dir is not set")
    path = Path(d)
    if not path.is_dir():
        raise EcgFusionError(f"dataset_dir {path} does not exist")
    return path


def run_ingest(cfg: RunConfig) -> dict:
    """Inventory every requested record; partial failures are listed,
    not fatal, as long as at least one record parses."""
    dataset = _dataset_dir(cfg)
    records = cfg.record_list(dataset)
    rows, errors = [], []
    for name in records:
        try:
            rec = wfdb.read_record(dataset, name)
        except (EcgFusionError, OSError) as exc:
            errors.append({"record": name, "error": f"{type(exc).__name__}: {exc}"})
            continue
        rows.append(
            {
                "record": name,
                "fs": f"{rec.header.fs:g}",
                "n_signals": rec.header.n_signals,
                "leads": ",".join(s.lead_name for s in rec.header.signals),
                "n_beats": len(rec.annotations),
                "age": rec.patient.age,
                "sex": rec.patient.sex,
            }
        )
    out = cfg.run_dir() / "manifest"
    io.write_inventory(out / "inventory.tsv", rows)
    io.write_tsv(out / "errors.tsv", ["record", "error"],
                  [[e["record"], e["error"]] for e in errors])
    if not rows:
        raise EcgFusionError(f"no records ingested from {dataset} ({len(errors)} errors)")
    return {"records": len(rows), "errors": len(errors), "inventory": str(out / "inventory.tsv")}


def run_preprocess(cfg: RunConfig) -> dict:
    """Segment, smooth, baseline-correct and rasterize every beat.

    ``augment_max_shift`` > 0 applies a seeded horizontal jitter to each
    beat before rasterization (off by default; kept for experiments)."""
    dataset = _dataset_dir(cfg)
    records = cfg.record_list(dataset)
    x_ms = cfg.f("x_ms")
    h, w = cfg.i("raster_h"), cfg.i("raster_w")
    max_shift = cfg.i("augment_max_shift")
    aug_rng = np.random.default_rng(cfg.i("seed"))

    prepared = []  # (record, lead_name, beat, age, sex)
    dropped_total = 0
    for name in records:
        rec = wfdb.read_record(dataset, name)
        li = rec.lead_index(cfg.s("lead") or None)
        spec = rec.header.signals[li]
        n_smooth = cfg.i("smoothing_n") or default_window_order(rec.header.fs)
        bin_w = cfg.f("bin_width") or 1.0 / spec.gain
        beats, dropped = segment_beats(
            rec.signals[li], rec.annotations, x_ms, rec.header.fs, record_name=name
        )
        dropped_total += dropped
        smoothing = SmoothingConfig(N=n_smooth)
        for beat in beats:
            if max_shift > 0:
                beat = horizontal_shift_augment(beat, max_shift, aug_rng)
            prepared.append(
                (name, spec.lead_name, prepare_beat(beat, smoothing, bin_w),
                 rec.patient.age, rec.patient.sex)
            )

    if not prepared:
        raise EcgFusionError("no beats survived segmentation")
    value_range = compute_global_range(
        [p[2] for p in prepared], cfg.f("clip_lo"), cfg.f("clip_hi")
    )

    out = cfg.run_dir() / "manifest"
    rows = []
    for name, lead, beat, age, sex in prepared:
        grid = rasterize(beat, value_range, h, w)
        rel = f"rasters/{name}_{beat.center_index}.pbm"
        io.write_pbm(out / rel, grid.bits)
        rows.append(
            {
                "beat_id": f"{name}:{beat.center_index}",
                "record": name,
                "lead": lead,
                "center_index": beat.center_index,
                "symbol": beat.symbol,
                "age": age,
                "sex": sex,
                "raster": rel,
            }
        )
    io.write_manifest(out / "beats.tsv", rows)
    meta = {
        "n_beats": len(rows),
        "dropped": dropped_total,
        "value_range": [value_range[0], value_range[1]],
        "raster": [h, w],
    }
    (out / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))
    return meta


def _load_examples(cfg: RunConfig, scheme_name: str):
    manifest_path = cfg.run_dir() / "manifest" / "beats.tsv"
    if not manifest_path.exists():
        raise EcgFusionError(f"{manifest_path} missing; run preprocess first")
    scheme = get_scheme(scheme_name)
    rows = io.read_manifest(manifest_path)
    examples = io.manifest_examples(rows, lambda s: map_class(s, scheme))
    return scheme, examples, manifest_path.parent


def _plan_subset(plan, kept):
    """A plan restricted to the kept examples (after rebalancing)."""
    from .dataset import SplitPlan

    return SplitPlan(k=plan.k, seed=plan.seed,
                     assignment={e.example_id: plan.assignment[e.example_id] for e in kept},
                     examples=list(kept))


def run_split(cfg: RunConfig) -> dict:
    scheme, examples, _ = _load_examples(cfg, cfg.s("scheme"))
    k, seed = cfg.i("split_k"), cfg.i("seed")
    if cfg.b("patient_strict"):
        plan = patient_level_split(examples, k, seed)
    else:
        plan = stratified_split(examples, k, seed)
    kept = rebalance_by_discard(plan, cfg.f("max_ratio"), seed)
    kept_plan = _plan_subset(plan, kept)

    out = cfg.run_dir() / "splits"
    io.write_split_plan(out / "plan.tsv", kept_plan)
    counts = np.zeros((k, scheme.n_classes), dtype=int)
    for ex in kept:
        counts[plan.assignment[ex.example_id], ex.class_id] += 1
    summary = {
        "k": k,
        "seed": seed,
        "scheme": scheme.name,
        "kept": len(kept),
        "discarded": len(examples) - len(kept),
        "fold_class_counts": counts.tolist(),
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2))
    return summary


def replace_examples(plan, kept):
    from .dataset import SplitPlan

    return SplitPlan(k=plan.k, seed=plan.seed,
                     assignment={e.example_id: plan.assignment[e.example_id] for e in kept},
                     examples=list(kept))


def _load_arrays(cfg: RunConfig, scheme_name: str):
    """Materialize (ArrayDataset, fold ids, scheme) for plan examples."""
    scheme, examples, manifest_dir = _load_examples(cfg, scheme_name)
    plan_path = cfg.run_dir() / "splits" / "plan.tsv"
    if not plan_path.exists():
        raise EcgFusionError(f"{plan_path} missing; run split first")
    assignment = io.read_split_plan(plan_path)
    examples = [e for e in examples if e.example_id in assignment]
    if not examples:
        raise EcgFusionError("no examples shared between manifest and split plan")

    h, w = cfg.i("raster_h"), cfg.i("raster_w")
    dt = np.dtype(cfg.s("dtype"))
    n = len(examples)
    x1 = np.empty((n, 1, h, w), dtype=dt)
    x2 = np.empty((n, 4), dtype=dt)
    y = np.empty(n, dtype=np.int64)
    folds = np.empty(n, dtype=np.int64)
    for i, ex in enumerate(examples):
        bits = io.read_pbm(manifest_dir / ex.raster_ref)
        if bits.shape != (h, w):
            raise GeometryMismatch(f"raster {ex.raster_ref} is {bits.shape}, config wants {(h, w)}")
        x1[i, 0] = bits
        x2[i] = ex.patient
        y[i] = ex.class_id
        folds[i] = assignment[ex.example_id]
    return ArrayDataset(x1, x2, y), folds, scheme


def _model_spec(cfg: RunConfig, n_classes: int) -> ModelSpec:
    return ModelSpec(
        raster_h=cfg.i("raster_h"),
        raster_w=cfg.i("raster_w"),
        n_classes=n_classes,
        dtype=cfg.s("dtype"),
        stem_channels=cfg.i("stem_channels"),
        block_widths=cfg.ints("block_widths"),
        block_strides=cfg.ints("block_strides"),
        expansion=cfg.i("expansion"),
        se_ratio=cfg.i("se_ratio"),
        sepce_width=cfg.i("sepce_width"),
        sepce_se_ratio=cfg.i("sepce_se_ratio"),
        mcnet_hidden=cfg.ints("mcnet_hidden"),
    )


def _train_config(cfg: RunConfig, n_train: int, epochs: int, **overrides) -> TrainConfig:
    base = dict(
        lr_i=cfg.f("lr_i"),
        beta1=cfg.f("beta1"),
        beta2=cfg.f("beta2"),
        eps=cfg.f("eps"),
        scheduler_mode=cfg.s("scheduler_mode"),
        seed=cfg.i("seed"),
        patience=cfg.i("patience"),
    )
    base.update(overrides)
    batch = int(base.pop("batch_size", cfg.i("batch_size")))
    return TrainConfig.for_epochs(
        n_train, epochs, batch_size=batch, warmup_frac=cfg.f("warmup_frac"), **base
    )


def _fold_masks(folds: np.ndarray, cfg: RunConfig):
    val = set(cfg.ints("val_folds"))
    test = set(cfg.ints("test_folds"))
    val_mask = np.isin(folds, sorted(val))
    test_mask = np.isin(folds, sorted(test))
    train_mask = ~(val_mask | test_mask)
    if not train_mask.any() or not val_mask.any():
        raise EcgFusionError("train or validation folds are empty")
    return train_mask, val_mask, test_mask


def run_train(cfg: RunConfig) -> dict:
    data, folds, scheme = _load_arrays(cfg, cfg.s("scheme"))
    train_mask, val_mask, test_mask = _fold_masks(folds, cfg)
    train_set = data.subset(train_mask)
    val_set = data.subset(val_mask)

    spec = _model_spec(cfg, scheme.n_classes)
    tcfg = _train_config(cfg, len(train_set), cfg.i("epochs"))
    model = MultiModalNet.initialize(spec, seed=cfg.i("seed"))

    ckpt_path = cfg.run_dir() / "checkpoints" / "best.ckpt"
    extra = {"scheme": scheme.name, "class_names": list(scheme.class_names)}

    def on_improve(m, step, history, rng_state):
        save_checkpoint(ckpt_path, m, step=step, rng_state=rng_state,
                        extra={**extra, "best_val_macro_f1": history.best_val_macro_f1})

    best, history = train(model, train_set, val_set, tcfg, on_improve=on_improve)
    io.write_history(cfg.run_dir() / "history", history)

    val_report = evaluate(best, val_set, class_names=scheme.class_names)
    ablated = evaluate(best, val_set, class_names=scheme.class_names, zero_x2=True)
    summary = {
        "scheme": scheme.name,
        "train_examples": int(len(train_set)),
        "val_examples": int(len(val_set)),
        "steps": tcfg.total_steps,
        "best_step": history.best_step,
        "val_macro_f1": val_report.macro_f1,
        "val_macro_f1_x2_zeroed": ablated.macro_f1,
        "x2_effect": ("multi-modal above ablation" if val_report.macro_f1 > ablated.macro_f1
                      else "ablation at or above multi-modal"),
    }
    reports = cfg.run_dir() / "reports"
    if test_mask.any():
        test_report = evaluate(best, data.subset(test_mask), class_names=scheme.class_names)
        io.write_report_files(reports, render_report(test_report, run_meta={
            "split": "test", "scheme": scheme.name, "run_id": cfg.run_id()}))
        summary["test_macro_f1"] = test_report.macro_f1
        summary["test_accuracy"] = test_report.accuracy
    (reports / "train_summary.json").parent.mkdir(parents=True, exist_ok=True)
    (reports / "train_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2))
    return summary


def run_eval(cfg: RunConfig) -> dict:
    data, folds, scheme = _load_arrays(cfg, cfg.s("scheme"))
    _, _, test_mask = _fold_masks(folds, cfg)
    if not test_mask.any():
        raise EcgFusionError("test folds are empty")
    ckpt = cfg.run_dir() / "checkpoints" / "best.ckpt"
    if not ckpt.exists():
        raise EcgFusionError(f"{ckpt} missing; run train first")
    model, step, _, extra = load_checkpoint(ckpt)
    report = evaluate(model, data.subset(test_mask), class_names=scheme.class_names)
    out = cfg.run_dir() / "reports" / "eval"
    io.write_report_files(out, render_report(report, run_meta={
        "split": "test", "scheme": scheme.name, "checkpoint_step": step,
        "run_id": cfg.run_id()}))
    return {"test_macro_f1": report.macro_f1, "test_accuracy": report.accuracy,
            "reports": str(out)}


def run_kfold(cfg: RunConfig) -> dict:
    data, folds, scheme = _load_arrays(cfg, cfg.s("scheme"))
    k = cfg.i("split_k")
    spec = _model_spec(cfg, scheme.n_classes)
    summaries = []
    for fold in range(k):
        val_idx = folds == fold
        train_idx = ~val_idx
        if not val_idx.any():
            raise EcgFusionError(f"fold {fold} is empty")
        tcfg = _train_config(cfg, int(train_idx.sum()), cfg.i("epochs"),
                             seed=cfg.i("seed") + fold)
        model = MultiModalNet.initialize(spec, seed=cfg.i("seed") + fold)
        best, _ = train(model, data.subset(train_idx), data.subset(val_idx), tcfg)
        report = evaluate(best, data.subset(val_idx), class_names=scheme.class_names)
        out = cfg.run_dir() / "reports" / f"fold{fold}"
        io.write_report_files(out, render_report(report, run_meta={
            "fold": fold, "scheme": scheme.name, "run_id": cfg.run_id()}))
        summaries.append({"fold": fold, "macro_f1": report.macro_f1,
                          "accuracy": report.accuracy})
    mean = {
        "mean_macro_f1": float(np.mean([s["macro_f1"] for s in summaries])),
        "mean_accuracy": float(np.mean([s["accuracy"] for s in summaries])),
        "folds": summaries,
    }
    path = cfg.run_dir() / "reports" / "kfold_summary.json"
    path.write_text(json.dumps(mean, sort_keys=True, indent=2))
    return mean


def run_transfer(cfg: RunConfig) -> dict:
    """Fine-tune a trained checkpoint onto a new class scheme and compare
    against the untrained re-headed baseline."""
    source_path = cfg.s("transfer_source") or str(cfg.run_dir() / "checkpoints" / "best.ckpt")
    if not Path(source_path).exists():
        raise EcgFusionError(f"source checkpoint {source_path} missing")
    source, _, _, _ = load_checkpoint(source_path)

    scheme_name = cfg.s("transfer_scheme")
    scheme, examples, _ = _load_examples(cfg, scheme_name)
    plan = stratified_split(examples, cfg.i("split_k"), cfg.i("seed") + 1)
    kept = rebalance_by_discard(plan, cfg.f("max_ratio"), cfg.i("seed") + 1)
    kept_plan = replace_examples(plan, kept)
    io.write_split_plan(cfg.run_dir() / "splits" / f"transfer_{scheme.name}.tsv", kept_plan)

    manifest_dir = cfg.run_dir() / "manifest"
    h, w = cfg.i("raster_h"), cfg.i("raster_w")
    dt = np.dtype(cfg.s("dtype"))
    n = len(kept)
    x1 = np.empty((n, 1, h, w), dtype=dt)
    x2 = np.empty((n, 4), dtype=dt)
    y = np.empty(n, dtype=np.int64)
    folds = np.empty(n, dtype=np.int64)
    for i, ex in enumerate(kept):
        x1[i, 0] = io.read_pbm(manifest_dir / ex.raster_ref)
        x2[i] = ex.patient
        y[i] = ex.class_id
        folds[i] = kept_plan.assignment[ex.example_id]
    data = ArrayDataset(x1, x2, y)
    train_mask, val_mask, test_mask = _fold_masks(folds, cfg)
    eval_mask = test_mask if test_mask.any() else val_mask

    head_seed = cfg.i("seed")
    baseline = source.with_head(scheme.n_classes, head_seed)
    baseline_report = evaluate(baseline, data.subset(eval_mask), class_names=scheme.class_names)

    tcfg = _train_config(cfg, int(train_mask.sum()), cfg.i("transfer_epochs"))
    tuned, history = transfer(source, data.subset(train_mask), data.subset(val_mask),
                              scheme.n_classes, tcfg, head_seed=head_seed)
    tuned_report = evaluate(tuned, data.subset(eval_mask), class_names=scheme.class_names)

    save_checkpoint(cfg.run_dir() / "checkpoints" / "transfer.ckpt", tuned,
                    step=history.best_step,
                    extra={"scheme": scheme.name, "class_names": list(scheme.class_names),
                           "source": str(source_path)})
    out = cfg.run_dir() / "reports" / "transfer"
    io.write_report_files(out, render_report(tuned_report, run_meta={
        "scheme": scheme.name, "source": str(source_path), "run_id": cfg.run_id()}))
    summary = {
        "scheme": scheme.name,
        "baseline_macro_f1": baseline_report.macro_f1,
        "tuned_macro_f1": tuned_report.macro_f1,
        "gain": tuned_report.macro_f1 - baseline_report.macro_f1,
    }
    (out / "transfer_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2))
    return summary


def run_search(cfg: RunConfig) -> dict:
    """Seeded random search over (lr_i, batch_size) scored by validation
    macro-F1 on short runs."""
    data, folds, scheme = _load_arrays(cfg, cfg.s("scheme"))
    train_mask, val_mask, _ = _fold_masks(folds, cfg)
    train_set, val_set = data.subset(train_mask), data.subset(val_mask)
    spec = _model_spec(cfg, scheme.n_classes)

    space = {
        "lr_i": ("loguniform", cfg.f("search_lr_lo"), cfg.f("search_lr_hi")),
        "batch_size": list(cfg.ints("search_batch_choices")),
    }

    def objective(draw: dict) -> float:
        tcfg = _train_config(cfg, len(train_set), cfg.i("search_epochs"),
                             lr_i=draw["lr_i"], batch_size=draw["batch_size"])
        model = MultiModalNet.initialize(spec, seed=cfg.i("seed"))
        _, history = train(model, train_set, val_set, tcfg)
        return history.best_val_macro_f1

    best, results = random_search(space, cfg.i("search_budget"), cfg.i("seed"), objective)
    out = cfg.run_dir() / "search"
    io.write_tsv(out / "results.tsv", ["lr_i", "batch_size", "val_macro_f1"],
                  [[f"{c['lr_i']:.8g}", c["batch_size"], f"{s:.8g}"] for c, s in results])
    best_values = dict(cfg.values)
    best_values["lr_i"] = f"{best['lr_i']:.8g}"
    best_values["batch_size"] = str(best["batch_size"])
    text = "\n".join(f"{k} = {best_values[k]}" for k in sorted(best_values)) + "\n"
    (out / "best_config.txt").write_text(text)
    return {"best": best, "evaluated": len(results)}
