"""Focal loss, Adam, warmup + cosine schedule, training loop, evaluation, ablation."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .checkpoint import Checkpoint
from .data import Dataset
from .errors import ConfigurationError, DimensionError
from .fleet import EGO_ONLY, TABLE2_CONFIGS, FleetParams, V2XConfig, fleet_forward, init_fleet, trainable_parameters
from .qformer import MotionQformerConfig
from .rng import Rng

log = logging.getLogger(__name__)

P_T_FLOOR = 1e-12
_INIT_TAG = 11
_SHUFFLE_TAG = 1000


@dataclass(frozen=True)
class FocalLossConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if self.gamma < 0:
            raise ConfigurationError("gamma must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 8
    warmup_epochs: int = 3
    peak_lr: float = 1e-4
    floor_lr: float = 1e-5
    seed: int = 0
    v2x: V2XConfig = EGO_ONLY
    loss: FocalLossConfig = FocalLossConfig()

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ConfigurationError("epochs, warmup_epochs must be >= 0 and batch_size >= 1")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigurationError("warmup_epochs must be smaller than epochs")
        if not 0 < self.floor_lr < self.peak_lr:
            raise ConfigurationError("need 0 < floor_lr < peak_lr")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["v2x"] = self.v2x.to_json()
        return d


# -------------------------------------------------------------------- loss


def focal_loss(logits: Node, label, cfg: FocalLossConfig = FocalLossConfig(), class_weighted: bool = True) -> Node:
    """Mean of ``-alpha_t (1 - p_t)^gamma log p_t`` over the batch.

    ``logits`` is ``[2]`` or ``[B, 2]``; ``p_t`` is the softmax probability of
    the true class, floored at 1e-12.  ``alpha_t`` is ``alpha`` for the
    accident class and ``1 - alpha`` otherwise, or 1 when ``class_weighted``
    is off.
    """
    labels = np.asarray(label)
    if labels.shape != logits.shape[:-1] or logits.shape[-1] != 2:
        raise DimensionError(f"focal_loss: logits {logits.shape} vs labels {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError(f"labels must be 0 or 1, got {np.unique(labels)}")
    labels = labels.astype(np.int64)
    p_t = ad.clamp_min(ad.pick(ad.softmax_lastdim(logits), labels), P_T_FLOOR)
    if class_weighted:
        alpha_t = np.where(labels == 1, cfg.alpha, 1.0 - cfg.alpha)
    else:
        alpha_t = np.ones(labels.shape)
    modulator = ad.pow_scalar(1.0 - p_t, cfg.gamma)
    per_sample = ad.mul(ad.mul(modulator, ad.log(p_t)), ad.constant(-alpha_t))
    return ad.mean_all(per_sample)


# ---------------------------------------------------------------- schedule


def lr_at(global_step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak over the warmup epochs, then cosine down to the floor at the last step."""
    if steps_per_epoch < 1:
        raise ValueError("steps_per_epoch must be >= 1")
    warmup = cfg.warmup_epochs * steps_per_epoch
    if global_step < warmup:
        return cfg.peak_lr * global_step / warmup
    remaining = cfg.epochs * steps_per_epoch - 1 - warmup
    if remaining <= 0:
        return cfg.peak_lr
    progress = min(1.0, (global_step - warmup) / remaining)
    return cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * (1.0 + math.cos(math.pi * progress)) / 2.0


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, Node], grads: Mapping[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam.  Parameter values are rebound, never mutated in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise DimensionError(f"adam: gradient {g.shape} vs parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.value)
            v = np.zeros_like(p.value)
        else:
            v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.value = p.value - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ----------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: float
    predictions: list[dict] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def accuracy(tp: int, tn: int, n: int) -> float:
    """(TP + TN) / number of samples."""
    if n <= 0:
        raise ValueError("accuracy needs at least one sample")
    return (tp + tn) / n


def report_from_predictions(labels: Sequence[int], predictions: Sequence[int], ids: Sequence[str] | None = None) -> EvalReport:
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    tp = int(((p == 1) & (y == 1)).sum())
    tn = int(((p == 0) & (y == 0)).sum())
    fp = int(((p == 1) & (y == 0)).sum())
    fn = int(((p == 0) & (y == 1)).sum())
    ids = list(ids) if ids is not None else [str(i) for i in range(len(y))]
    rows = [{"id": i, "label": int(a), "prediction": int(b)} for i, a, b in zip(ids, y, p)]
    return EvalReport(tp, tn, fp, fn, accuracy(tp, tn, len(y)), rows)


def predict_logits(
    params: FleetParams, features: np.ndarray, v2x: V2XConfig, model: MotionQformerConfig, agents, chunk: int = 64
) -> np.ndarray:
    out = []
    with ad.no_grad():
        for lo in range(0, len(features), chunk):
            out.append(fleet_forward(features[lo : lo + chunk], params, v2x, model, agents).value)
    return np.concatenate(out) if out else np.empty((0, 2))


def _check_agents(ds: Dataset, v2x: V2XConfig) -> None:
    missing = [r.key for r in v2x.ordered if r not in ds.agents]
    if missing:
        raise ConfigurationError(f"dataset has no recordings for included roles {missing}")


def evaluate(ckpt: Checkpoint, ds: Dataset, split: str = "test", v2x: V2XConfig | None = None) -> EvalReport:
    """Argmax predictions on one split, scored as (TP + TN) / N."""
    if v2x is not None and v2x != ckpt.v2x:
        raise ConfigurationError(f"checkpoint was trained for {ckpt.v2x.to_json()}, not {v2x.to_json()}")
    _check_agents(ds, ckpt.v2x)
    x, y = ds.split(split)
    logits = predict_logits(ckpt.params, x, ckpt.v2x, ckpt.model, ds.agents)
    return report_from_predictions(y, np.argmax(logits, axis=-1), ds.split_ids(split))


# -------------------------------------------------------------------- train


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list[dict]


def train(
    ds: Dataset,
    cfg: TrainConfig,
    model: MotionQformerConfig = MotionQformerConfig(),
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Mini-batch focal-loss training; returns the best-validation-accuracy checkpoint.

    Batches are drawn from a per-epoch seeded shuffle of the train split and
    the scenarios of one batch are forwarded together.
    """
    _check_agents(ds, cfg.v2x)
    rng = Rng(cfg.seed)
    params = init_fleet(model, cfg.v2x, rng.spawn(_INIT_TAG))
    trainable = trainable_parameters(params)
    x_train, y_train = ds.split("train")
    x_val, y_val = ds.split("val")
    n = len(y_train)
    if cfg.epochs > 0 and n == 0:
        raise ConfigurationError("empty train split")
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    state = AdamState()
    best_acc = -1.0
    best_values = {k: p.value for k, p in trainable.items()}
    metrics: list[dict] = []
    global_step = 0
    lr = 0.0
    for epoch in range(cfg.epochs):
        order = rng.spawn(_SHUFFLE_TAG + epoch).permutation(n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            logits = fleet_forward(x_train[idx], params, cfg.v2x, model, ds.agents)
            loss = focal_loss(logits, y_train[idx], cfg.loss)
            for p in trainable.values():
                p.zero_grad()
            ad.backward(loss)
            lr = lr_at(global_step, steps_per_epoch, cfg)
            adam_step(trainable, {k: p.grad for k, p in trainable.items()}, state, lr)
            global_step += 1
            total += loss.item() * len(idx)
        if len(y_val):
            preds = np.argmax(predict_logits(params, x_val, cfg.v2x, model, ds.agents), axis=-1)
            val_acc = float((preds == y_val).mean())
        else:
            val_acc = 0.0
        row = {"epoch": epoch + 1, "mean_train_loss": total / n, "val_accuracy": val_acc, "lr": lr}
        metrics.append(row)
        log.info("epoch %d loss %.6f val_acc %.4f lr %.3g", row["epoch"], row["mean_train_loss"], val_acc, lr)
        if on_epoch is not None:
            on_epoch(row)
        if val_acc > best_acc:
            best_acc = val_acc
            best_values = {k: p.value for k, p in trainable.items()}
    for k, p in trainable.items():
        p.value = best_values[k]
        p.zero_grad()
    return TrainResult(Checkpoint(params, model, cfg.v2x, cfg.to_json()), metrics)


# --------------------------------------------------------------------- ablation

TABLE_COLUMNS = ("ego", "other", "behind", "infrastructure", "accuracy")


def ablate(
    ds: Dataset,
    configs: Sequence[V2XConfig] = TABLE2_CONFIGS,
    cfg: TrainConfig = TrainConfig(),
    model: MotionQformerConfig = MotionQformerConfig(),
    split: str = "test",
) -> list[dict]:
    """Train and test one model per V2X configuration; one table row each."""
    rows = []
    for i, v2x in enumerate(configs):
        row_cfg = dataclasses.replace(cfg, v2x=v2x, seed=cfg.seed + i)
        result = train(ds, row_cfg, model)
        report = evaluate(result.checkpoint, ds, split)
        rows.append({**v2x.table_row(), "accuracy": report.accuracy})
        log.info("ablation %s -> %.4f", v2x.to_json(), report.accuracy)
    return rows


def write_table_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([int(r[c]) if c != "accuracy" else f"{r[c]:.4f}" for c in TABLE_COLUMNS])


def write_metrics_jsonl(metrics: Sequence[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(m, sort_keys=True) + "\n" for m in metrics), encoding="utf-8")
