"""Optimization stack and training loops.

The update rule follows the printed recurrences exactly: exponential
moving averages of the gradient and its square feed the step with no
bias correction, and the step size comes from a linear warmup into a
cosine decay. ``scheduler_mode`` selects between the self-consistent
``continuous`` decay (reaches 0 at the final step) and ``paper_verbatim``
(jumps to twice the base rate at warmup end and finishes at the base
rate); both are part of the contract and both are tested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Param, backward, cross_entropy_op, softmax_op
from .errors import Diverged, GeometryMismatch, InvalidDistribution, NonFiniteGradient
from .metrics import MetricsReport, confusion_matrix, per_class_metrics
from .nn import ModelSpec, MultiModalNet


@dataclass(frozen=True)
class TrainConfig:
    lr_i: float = 1e-3
    warmup_steps: int = 50
    total_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    scheduler_mode: str = "continuous"  # or "paper_verbatim"
    seed: int = 0
    patience: int = 10  # epochs without validation improvement

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must be < total_steps")
        if not 1e-10 <= self.eps <= 1e-7:
            raise ValueError("eps must lie in [1e-10, 1e-7]")
        if self.scheduler_mode not in ("continuous", "paper_verbatim"):
            raise ValueError(f"unknown scheduler_mode {self.scheduler_mode!r}")

    @classmethod
    def for_epochs(cls, n_examples: int, epochs: int, batch_size: int = 64,
                   warmup_frac: float = 0.05, **kw) -> "TrainConfig":
        steps_per_epoch = max(1, -(-n_examples // batch_size))
        total = steps_per_epoch * epochs
        warmup = min(max(1, round(warmup_frac * total)), total - 1)
        return cls(warmup_steps=warmup, total_steps=total, batch_size=batch_size, **kw)


def lr_schedule(t: int, cfg: TrainConfig) -> float:
    """Step-t learning rate: linear ramp for t < warmup, then cosine."""
    if t < cfg.warmup_steps:
        return (t / cfg.warmup_steps) * cfg.lr_i
    progress = (t - cfg.warmup_steps) / max(1, cfg.total_steps - cfg.warmup_steps)
    if cfg.scheduler_mode == "paper_verbatim":
        return max(0.0, (1.0 + math.cos(0.5 * math.pi * progress)) * cfg.lr_i)
    return 0.5 * cfg.lr_i * (1.0 + math.cos(math.pi * progress))


def cross_entropy(probs: np.ndarray, onehot: np.ndarray) -> float:
    """-sum(y log p) for one example, with p clamped to [1e-12, 1]."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if p.shape != y.shape:
        raise InvalidDistribution(f"shape mismatch {p.shape} vs {y.shape}")
    if abs(p.sum() - 1.0) > 1e-6:
        raise InvalidDistribution(f"probabilities sum to {p.sum()}")
    ones = np.isclose(y, 1.0)
    if ones.sum() != 1 or not np.all(np.isclose(y, 0.0) | ones):
        raise InvalidDistribution("labels must be one-hot")
    return float(-(y * np.log(np.clip(p, 1e-12, 1.0))).sum())


def adam_update(params: list[Param], t: int, cfg: TrainConfig) -> None:
    """In-place moment update and parameter step (no bias correction)."""
    lr = lr_schedule(t, cfg)
    for p in params:
        g = p.grad
        if g is None:
            raise NonFiniteGradient("parameter has no gradient")
        m = cfg.beta1 * p.m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * p.v + (1.0 - cfg.beta2) * (g * g)
        # catches nan/inf gradients and g*g overflow in one pass; a
        # poisoned second moment would silently freeze the parameter
        if not np.all(np.isfinite(v)):
            raise NonFiniteGradient("non-finite gradient or squared-gradient overflow")
        p.m = m
        p.v = v
        p.data = p.data - lr * p.m / (np.sqrt(p.v) + cfg.eps)


@dataclass
class ArrayDataset:
    """Materialized examples: rasters, patient vectors, class ids."""

    x1: np.ndarray  # (N, 1, H, W) float64
    x2: np.ndarray  # (N, patient_dim) float64
    y: np.ndarray   # (N,) int64

    def __len__(self) -> int:
        return self.x1.shape[0]

    def subset(self, idx) -> "ArrayDataset":
        return ArrayDataset(self.x1[idx], self.x2[idx], self.y[idx])


@dataclass
class TrainHistory:
    steps: list[tuple[int, float, float]] = field(default_factory=list)  # (t, loss, lr)
    epochs: list[dict] = field(default_factory=list)
    best_step: int = -1
    best_epoch: int = -1
    best_val_macro_f1: float = -1.0


def _onehot(y: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((y.shape[0], n_classes), dtype=np.float64)
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def evaluate(model: MultiModalNet, data: ArrayDataset, batch_size: int = 256,
             class_names: tuple[str, ...] | None = None,
             zero_x2: bool = False) -> MetricsReport:
    """Inference-mode metrics over a dataset; ``zero_x2`` ablates the
    demographic branch input."""
    x2 = np.zeros_like(data.x2) if zero_x2 else data.x2
    probs = model.predict_proba(data.x1, x2, batch_size=batch_size)
    pred = probs.argmax(axis=1)
    cm = confusion_matrix(data.y, pred, model.spec.n_classes)
    return per_class_metrics(cm, class_names)


def _snapshot(model: MultiModalNet) -> tuple[dict, dict]:
    params = {k: (p.data.copy(), p.m.copy(), p.v.copy()) for k, p in model.params.items()}
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    return params, buffers


def _restore(model: MultiModalNet, snap: tuple[dict, dict]) -> None:
    params, buffers = snap
    for k, (d, m, v) in params.items():
        model.params[k].data = d.copy()
        model.params[k].m = m.copy()
        model.params[k].v = v.copy()
    for k, b in buffers.items():
        model.buffers[k][...] = b


def train(
    model: MultiModalNet,
    train_set: ArrayDataset,
    val_set: ArrayDataset,
    cfg: TrainConfig,
    on_improve=None,
) -> tuple[MultiModalNet, TrainHistory]:
    """Seeded epoch shuffling, batch gradient steps, per-epoch validation
    with checkpoint-on-improvement and patience-based early stop.

    Returns the model restored to its best validation state. When given,
    ``on_improve(model, step, history, rng_state)`` runs at each new best
    (the CLI uses it to write the checkpoint file; the shuffling RNG
    state makes the checkpoint resumable mid-schedule).
    """
    n = len(train_set)
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    history = TrainHistory()
    n_classes = model.spec.n_classes
    best_snap = None
    stale_epochs = 0
    t = 0
    epoch = 0

    while t < cfg.total_steps:
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            if t >= cfg.total_steps:
                break
            idx = order[start : start + cfg.batch_size]
            model.zero_grad()
            logits = model.forward(train_set.x1[idx], train_set.x2[idx], train=True)
            probs = softmax_op(logits)
            loss = cross_entropy_op(probs, _onehot(train_set.y[idx], n_classes))
            if not np.isfinite(loss.data):
                raise Diverged(f"non-finite loss at step {t}")
            backward(loss)
            try:
                adam_update([p for _, p in model.param_items()], t, cfg)
            except NonFiniteGradient as exc:
                raise Diverged(f"gradient blow-up at step {t}") from exc
            history.steps.append((t, float(loss.data), lr_schedule(t, cfg)))
            t += 1

        report = evaluate(model, val_set, batch_size=max(cfg.batch_size, 128))
        improved = report.macro_f1 > history.best_val_macro_f1
        history.epochs.append(
            {
                "epoch": epoch,
                "step": t,
                "val_accuracy": report.accuracy,
                "val_macro_f1": report.macro_f1,
                "improved": improved,
            }
        )
        if improved:
            history.best_val_macro_f1 = report.macro_f1
            history.best_step = t
            history.best_epoch = epoch
            best_snap = _snapshot(model)
            stale_epochs = 0
            if on_improve is not None:
                on_improve(model, t, history, rng.bit_generator.state)
        else:
            stale_epochs += 1
            if stale_epochs >= cfg.patience:
                break
        epoch += 1

    if best_snap is not None:
        _restore(model, best_snap)
    return model, history


def kfold_run(
    data: ArrayDataset,
    fold_ids: np.ndarray,
    spec: ModelSpec,
    cfg: TrainConfig,
    class_names: tuple[str, ...] | None = None,
) -> list[tuple[int, MetricsReport, TrainHistory]]:
    """Train k models, each holding one fold out for evaluation."""
    k = int(fold_ids.max()) + 1
    results = []
    for fold in range(k):
        val_idx = np.where(fold_ids == fold)[0]
        train_idx = np.where(fold_ids != fold)[0]
        model = MultiModalNet.initialize(spec, seed=cfg.seed + fold)
        fold_cfg = replace(cfg, seed=cfg.seed + fold)
        best, hist = train(model, data.subset(train_idx), data.subset(val_idx), fold_cfg)
        report = evaluate(best, data.subset(val_idx), class_names=class_names)
        results.append((fold, report, hist))
    return results


def transfer(
    source: MultiModalNet,
    train_set: ArrayDataset,
    val_set: ArrayDataset,
    n_classes: int,
    cfg: TrainConfig,
    head_seed: int = 0,
) -> tuple[MultiModalNet, TrainHistory]:
    """Re-headed fine-tune: fresh output layer for the new class count,
    every parameter trained at a tenth of the base rate."""
    if train_set.x1.shape[2:] != (source.spec.raster_h, source.spec.raster_w):
        raise GeometryMismatch(
            f"raster {train_set.x1.shape[2:]} vs source model "
            f"({source.spec.raster_h}, {source.spec.raster_w})"
        )
    model = source.with_head(n_classes, head_seed)
    fine_cfg = replace(cfg, lr_i=cfg.lr_i / 10.0)
    return train(model, train_set, val_set, fine_cfg)


def sample_search_space(space: dict, budget: int, seed: int) -> list[dict]:
    """Seeded uniform draws from a finite space. Values may be a list of
    choices or ("uniform"|"loguniform", lo, hi)."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(budget):
        cand = {}
        for key in sorted(space):
            val = space[key]
            if isinstance(val, (list, tuple)) and val and val[0] in ("uniform", "loguniform"):
                _, lo, hi = val
                if val[0] == "loguniform":
                    cand[key] = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
                else:
                    cand[key] = float(rng.uniform(lo, hi))
            else:
                cand[key] = val[int(rng.integers(len(val)))]
        draws.append(cand)
    return draws


def random_search(space: dict, budget: int, seed: int, objective) -> tuple[dict, list[tuple[dict, float]]]:
    """Evaluate seeded draws with ``objective(overrides) -> score`` and
    return (best draw, all scored draws). Diverged runs score -1."""
    results = []
    for cand in sample_search_space(space, budget, seed):
        try:
            score = float(objective(cand))
        except Diverged:
            score = -1.0
        results.append((cand, score))
    best = max(results, key=lambda cs: cs[1])
    return best[0], results
