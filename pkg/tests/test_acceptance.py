"""Acceptance suite: ten numbered criteria, one test each, every test
printing a single PASS/FAIL line (run with ``pytest -s`` to see them as
they complete).

Criteria 8 and 10 exercise the complete pipeline end to end. They use a
real database directory when ``MITDB_DIR`` is set; otherwise a synthetic
five-class WFDB dataset is generated through the package's own encoders,
which keeps the whole data path (header, format-212, annotations)
identical to the real-data case.
"""

import functools
import os
import time
from pathlib import Path

import numpy as np
import pytest

from ecgfusion import autodiff as ad
from ecgfusion import prep, training as tr, wfdb
from ecgfusion.checkpoint import load_checkpoint
from ecgfusion.config import build_config
from ecgfusion.dataset import stratified_split
from ecgfusion.metrics import per_class_metrics
from ecgfusion.nn import ModelSpec, MultiModalNet
from ecgfusion.synthdata import generate_dataset

from gradcheck import check_grad, run_check
from test_dataset import make_examples
from test_metrics import oracle_metrics
from test_training import oracle_adam_scalar


def criterion(n, desc, budget_s):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                print(f"\nACCEPTANCE {n:>2} {desc}: FAIL ({type(exc).__name__}: {exc})")
                raise
            elapsed = time.perf_counter() - t0
            extra = f"; {detail}" if detail else ""
            print(f"\nACCEPTANCE {n:>2} {desc}: PASS ({elapsed:.1f}s{extra})")
            assert elapsed < budget_s, f"criterion {n} exceeded {budget_s}s ({elapsed:.0f}s)"
        return wrapper
    return deco


# ---------------------------------------------------------------- 1

@criterion(1, "format-212 codec", budget_s=10)
def test_criterion_1_codec():
    rng = np.random.default_rng(212)
    raw = rng.integers(0, 256, size=3_000_000, dtype=np.uint8)
    first, second = wfdb.decode_format212(raw.tobytes(), 2_000_000)
    assert wfdb.encode_format212(first, second) == raw.tobytes()

    b = raw.tolist()
    exp_first = np.empty(1_000_000, dtype=np.int64)
    exp_second = np.empty(1_000_000, dtype=np.int64)
    for i in range(1_000_000):
        b0, b1, b2 = b[3 * i], b[3 * i + 1], b[3 * i + 2]
        s1 = ((b1 & 0x0F) << 8) | b0
        s2 = ((b1 & 0xF0) << 4) | b2
        exp_first[i] = s1 - 4096 if s1 >= 2048 else s1
        exp_second[i] = s2 - 4096 if s2 >= 2048 else s2
    assert np.array_equal(first, exp_first)
    assert np.array_equal(second, exp_second)
    return "10^6 triples, identity and bit-level oracle exact"


# ---------------------------------------------------------------- 2

@criterion(2, "smoothing", budget_s=1)
def test_criterion_2_smoothing():
    const = np.full(64, 3.25)
    out = prep.smooth(const, prep.SmoothingConfig(4))
    assert np.abs(out - 3.25).max() < 1e-12

    impulse = np.array([0, 0, 0, 1.0, 0, 0, 0])
    out = prep.smooth(impulse, prep.SmoothingConfig(4))
    window = prep.hanning_window(4)
    window = window / window.sum()
    expected = np.zeros(7)
    expected[1:6] = window
    assert np.abs(out - expected).max() < 1e-12
    return "constant invariant, impulse = normalized window"


# ---------------------------------------------------------------- 3

@criterion(3, "lr scheduler", budget_s=1)
def test_criterion_3_scheduler():
    lr = 1e-3
    cfg = tr.TrainConfig(lr_i=lr, warmup_steps=120, total_steps=900)
    assert tr.lr_schedule(0, cfg) == 0.0
    assert abs(tr.lr_schedule(120, cfg) - lr) < 1e-12
    assert abs(tr.lr_schedule(900, cfg)) < 1e-12
    values = [tr.lr_schedule(t, cfg) for t in range(120, 901)]
    assert all(a >= b for a, b in zip(values, values[1:]))

    verb = tr.TrainConfig(lr_i=lr, warmup_steps=120, total_steps=900,
                          scheduler_mode="paper_verbatim")
    assert abs(tr.lr_schedule(120, verb) - 2 * lr) < 1e-12
    assert abs(tr.lr_schedule(900, verb) - lr) < 1e-12
    return "continuous anchors exact; verbatim prints 2*LR_i and LR_i"


# ---------------------------------------------------------------- 4

MINI = ModelSpec(raster_h=16, raster_w=16, n_classes=3, stem_channels=4,
                 block_widths=(8,), block_strides=(1,), sepce_width=8,
                 mcnet_hidden=(16,))


@criterion(4, "gradient fidelity", budget_s=300)
def test_criterion_4_gradients():
    rng = np.random.default_rng(44)
    checked = 0

    # each differentiable op against central differences, >= 20 draws
    checked += run_check(lambda x, w: ad.sum_all(ad.mul(ad.conv2d(x, w, 1, "same"),
                                                        ad.conv2d(x, w, 1, "same"))),
                         [np.empty((2, 2, 6, 6)), np.empty((3, 2, 3, 3))], rng)
    checked += run_check(lambda x, w: ad.sum_all(ad.conv2d(x, w, 2, "valid")),
                         [np.empty((2, 2, 7, 7)), np.empty((3, 2, 3, 3))], rng)
    checked += run_check(lambda x, w: ad.sum_all(ad.mul(ad.conv2d(x, w, 1, "same"),
                                                        ad.conv2d(x, w, 1, "same"))),
                         [np.empty((2, 3, 5, 5)), np.empty((4, 3, 1, 1))], rng)
    checked += run_check(lambda x, w: ad.sum_all(ad.mul(ad.depthwise_conv(x, w, 1, "same"),
                                                        ad.depthwise_conv(x, w, 1, "same"))),
                         [np.empty((2, 3, 6, 6)), np.empty((3, 3, 3))], rng)
    checked += run_check(lambda x, w, b: ad.sum_all(ad.sigmoid(ad.dense(x, w, b))),
                         [np.empty((3, 4)), np.empty((2, 4)), np.empty(2)], rng)
    checked += run_check(lambda x: ad.sum_all(ad.mul(ad.relu(x), ad.relu(x))),
                         [np.empty((4, 5))], rng)
    checked += run_check(lambda a, b: ad.sum_all(ad.div(ad.add(a, b), ad.shift(ad.mul(b, b), 1.0))),
                         [np.empty((3, 4)), np.empty((3, 4))], rng)
    checked += run_check(lambda x: ad.sum_all(ad.mul(ad.mean(x, (0, 2, 3)), ad.mean(x, (0, 2, 3)))),
                         [np.empty((2, 3, 4, 4))], rng)
    checked += run_check(lambda a, b: ad.sum_all(ad.mul(ad.concat([a, b], 1), ad.concat([b, a], 1))),
                         [np.empty((2, 3)), np.empty((2, 3))], rng)
    checked += run_check(lambda x: ad.sum_all(ad.sqrt(ad.shift(ad.mul(x, x), 0.5))),
                         [np.empty(8)], rng)
    checked += run_check(lambda x: ad.sum_all(ad.log(ad.shift(ad.mul(x, x), 1.0))),
                         [np.empty(8)], rng)
    checked += run_check(lambda x: ad.sum_all(ad.mul(ad.reshape(x, (6, 2)), ad.reshape(x, (6, 2)))),
                         [np.empty((3, 4))], rng)

    def bn_loss(x, g, b):
        out, _, _ = ad.batchnorm_train(x, g, b, (0, 2, 3), 1e-5)
        return ad.sum_all(ad.mul(out, out))

    checked += run_check(bn_loss, [np.empty((3, 2, 4, 4)), np.empty(2), np.empty(2)], rng)

    y = np.zeros((3, 4))
    y[np.arange(3), [0, 2, 3]] = 1.0
    checked += run_check(lambda z: ad.cross_entropy_op(ad.softmax_op(z), y),
                         [np.empty((3, 4))], rng)

    # the full miniature model: dJ/dtheta for every parameter tensor
    full_checked = full_skipped = 0
    for draw in range(20):
        local = np.random.default_rng(4000 + draw)
        model = MultiModalNet.initialize(MINI, seed=draw)
        x1 = local.random((2, 1, 16, 16))
        x2 = local.random((2, 4))
        onehot = np.zeros((2, 3))
        onehot[np.arange(2), local.integers(0, 3, 2)] = 1.0

        def loss_value():
            logits = model.forward(x1, x2, train=True)
            return float(ad.cross_entropy_op(ad.softmax_op(logits), onehot).data)

        model.zero_grad()
        logits = model.forward(x1, x2, train=True)
        loss = ad.cross_entropy_op(ad.softmax_op(logits), onehot)
        ad.backward(loss)
        grads = {k: p.grad.copy() for k, p in model.params.items()}
        for name, p in model.params.items():
            c, s = check_grad(loss_value, p.data, grads[name], local, max_coords=3)
            full_checked += c
            full_skipped += s
    assert full_checked > 500  # skipped kink probes must stay a small minority
    assert full_skipped < full_checked * 0.2
    return f"{checked} op coords + {full_checked} model coords at rel err < 1e-4"


# ---------------------------------------------------------------- 5

@criterion(5, "optimizer trajectory", budget_s=1)
def test_criterion_5_adam():
    cfg = tr.TrainConfig(lr_i=0.05, warmup_steps=10, total_steps=100)
    p = ad.Param(np.array([1.7]))
    trace = []
    for t in range(100):
        p.grad = p.data.copy()  # gradient of 0.5 * theta^2
        tr.adam_update([p], t, cfg)
        trace.append(p.data[0])
    oracle = oracle_adam_scalar(lambda th: th, 1.7, 100, cfg)
    worst = np.abs(np.array(trace) - oracle).max()
    assert worst < 1e-10
    return f"100-step scalar quadratic, max deviation {worst:.2e}"


# ---------------------------------------------------------------- 6

@criterion(6, "metrics oracle", budget_s=10)
def test_criterion_6_metrics():
    rng = np.random.default_rng(66)
    for _ in range(1000):
        cm = rng.integers(0, 50, size=(10, 10))
        if cm.sum() == 0:
            cm[0, 0] = 1
        rep = per_class_metrics(cm)
        pr, se, f1, acc = oracle_metrics(cm.tolist())
        assert np.abs(np.array(rep.precision) - pr).max() < 1e-12
        assert np.abs(np.array(rep.recall) - se).max() < 1e-12
        assert np.abs(np.array(rep.f1) - f1).max() < 1e-12
        assert abs(rep.accuracy - acc) < 1e-12
        micro_recall = np.diag(cm).sum() / cm.sum()
        assert abs(rep.accuracy - micro_recall) < 1e-12
    return "1000 random 10x10 matrices; micro-recall = accuracy holds"


# ---------------------------------------------------------------- 7

@criterion(7, "stratified k-fold", budget_s=10)
def test_criterion_7_splits():
    examples = make_examples({0: 5200, 1: 2600, 2: 1300, 3: 900}, seed=77)
    plan1 = stratified_split(examples, 9, seed=5)
    plan2 = stratified_split(examples, 9, seed=5)
    assert plan1.assignment == plan2.assignment  # deterministic per seed

    ids = {e.example_id for e in examples}
    assert set(plan1.assignment) == ids  # covering
    folds = np.array([plan1.assignment[e.example_id] for e in examples])
    classes = np.array([e.class_id for e in examples])
    assert set(np.unique(folds)) == set(range(9))  # all folds used, disjoint by construction
    for cid in range(4):
        global_prop = (classes == cid).mean()
        for fold in range(9):
            prop = (classes[folds == fold] == cid).mean()
            assert abs(prop - global_prop) <= 0.02
    return "10^4 examples, k=9: disjoint, covering, proportions within 2%"


# ---------------------------------------------------------------- 8-10 shared pipeline

ACC_SETTINGS = {
    "raster_h": "32", "raster_w": "32",
    "scheme": "MIT5",
    "split_k": "10", "val_folds": "8", "test_folds": "9",
    "dtype": "float32",
    "epochs": "3", "batch_size": "64", "lr_i": "2e-3", "seed": "7",
    "transfer_scheme": "BINARY", "transfer_epochs": "2",
}


@pytest.fixture(scope="session")
def acc_run(tmp_path_factory):
    """Full preprocess / split / train on the five-class dataset."""
    from ecgfusion import pipeline

    mitdb = os.environ.get("MITDB_DIR")
    if mitdb:
        db = Path(mitdb)
        source = "MITDB"
    else:
        db = tmp_path_factory.mktemp("acc_db")
        generate_dataset(db, n_records=10, beats_per_record=1050,
                         class_weights={s: 1.0 for s in ("N", "L", "R", "V", "/")},
                         seed=88)
        source = "synthetic"
    out = tmp_path_factory.mktemp("acc_out")
    cfg = build_config(None, {**ACC_SETTINGS,
                              "dataset_dir": str(db), "output_dir": str(out)})
    timings = {}
    t0 = time.perf_counter()
    pre = pipeline.run_preprocess(cfg)
    timings["preprocess"] = time.perf_counter() - t0
    split = pipeline.run_split(cfg)
    t0 = time.perf_counter()
    summary = pipeline.run_train(cfg)
    timings["train"] = time.perf_counter() - t0
    return {"cfg": cfg, "pre": pre, "split": split, "summary": summary,
            "source": source, "timings": timings}


@criterion(8, "desk-scale end-to-end", budget_s=3600)
def test_criterion_8_end_to_end(acc_run):
    summary = acc_run["summary"]
    split = acc_run["split"]
    counts = np.array(split["fold_class_counts"]).sum(axis=0)
    assert counts.min() >= 2000, f"need >= 2000 beats/class, got {counts.tolist()}"
    assert summary["test_macro_f1"] >= 0.90
    direction = summary["x2_effect"]
    return (
        f"{acc_run['source']} data, {split['kept']} beats; "
        f"test macro-F1 {summary['test_macro_f1']:.4f}; "
        f"val F1 {summary['val_macro_f1']:.4f} vs x2-zeroed "
        f"{summary['val_macro_f1_x2_zeroed']:.4f} ({direction}); "
        f"train {acc_run['timings']['train']:.0f}s"
    )


# ---------------------------------------------------------------- 9

@criterion(9, "pipeline determinism", budget_s=1800)
def test_criterion_9_determinism(tmp_path_factory):
    import subprocess
    import sys

    db = tmp_path_factory.mktemp("det_db")
    generate_dataset(db, n_records=3, beats_per_record=80,
                     class_weights={"N": 2, "V": 1, "L": 1}, seed=12)

    digests = []
    for run in ("det_a", "det_b"):
        out = tmp_path_factory.mktemp(run)
        args = ["--set", f"dataset_dir={db}", "--set", "raster_h=16", "--set", "raster_w=16",
                "--set", "scheme=BINARY", "--set", "split_k=5",
                "--set", "val_folds=3", "--set", "test_folds=4",
                "--set", "epochs=2", "--set", "batch_size=16", "--set", "dtype=float32",
                "--set", "stem_channels=4", "--set", "block_widths=8",
                "--set", "block_strides=1", "--set", "sepce_width=4",
                "--set", "mcnet_hidden=8", "--out", str(out)]
        for cmd in ("ingest", "preprocess", "split", "train", "eval"):
            proc = subprocess.run(
                [sys.executable, "-m", "ecgfusion.cli", cmd, *args],
                capture_output=True, text=True)
            assert proc.returncode == 0, f"{cmd} failed: {proc.stderr[-500:]}"
        run_dir = next(p for p in out.iterdir() if p.is_dir())
        files = {}
        for f in sorted(run_dir.rglob("*")):
            if f.is_file():
                files[str(f.relative_to(run_dir))] = f.read_bytes()
        digests.append(files)

    a, b = digests
    assert a.keys() == b.keys()
    diffs = [k for k in a if a[k] != b[k]]
    assert not diffs, f"artifacts differ between identical runs: {diffs}"
    return f"{len(a)} artifacts byte-identical across two complete runs"


# ---------------------------------------------------------------- 10

@criterion(10, "transfer protocol", budget_s=1800)
def test_criterion_10_transfer(acc_run):
    from ecgfusion import pipeline

    cfg = acc_run["cfg"]
    source_path = cfg.run_dir() / "checkpoints" / "best.ckpt"
    source, _, _, _ = load_checkpoint(source_path)

    # step-0 contract: fresh 2-wide head, backbone bit-equal the source
    stepped = source.with_head(2, seed=cfg.i("seed"))
    assert stepped.params["mcnet.out.w"].data.shape[0] == 2
    for name in source.params:
        if not name.startswith("mcnet.out"):
            assert stepped.params[name].data.tobytes() == source.params[name].data.tobytes()

    summary = pipeline.run_transfer(cfg)
    tuned_model, _, _, extra = load_checkpoint(cfg.run_dir() / "checkpoints" / "transfer.ckpt")
    assert tuned_model.spec.n_classes == 2
    assert extra["class_names"] == ["N", "AB"]
    gain = summary["gain"]
    assert gain >= 0.05, (
        f"fine-tuned {summary['tuned_macro_f1']:.4f} vs frozen-random-head "
        f"{summary['baseline_macro_f1']:.4f}: gain {gain:.4f} < 0.05"
    )
    return (
        f"binary head; backbone bit-equal at step 0; fine-tuned "
        f"{summary['tuned_macro_f1']:.4f} vs baseline {summary['baseline_macro_f1']:.4f}"
    )
