"""Losses, Adam, learning-rate schedule and the two training loops."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tn
from .checkpoint import Checkpoint
from .data import Dataset, split
from .masking import MaskedBatch, MaskPlan, MaskSpec, make_plan, make_rng
from .model import ActionClassifier, ModelConfig, SkeletonMAE, input_stats
from .tensor import Tensor

log = logging.getLogger(__name__)

LOSS_SCOPES = ("full_sequence", "masked_only")
# RNG stream tags so shuffling, training masks and validation masks never collide
_SHUFFLE, _TRAIN_MASK, _VAL_MASK = 1, 2, 3


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.005
    weight_decay: float = 0.0001
    batch_size: int = 64
    epochs: int = 200
    lr_gamma: float = 0.1
    lr_milestones: tuple[int, ...] = (60, 90, 110)
    label_smoothing: float = 0.1
    loss_scope: str = "full_sequence"
    decoupled_weight_decay: bool = True
    standardize_inputs: bool = True
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        ms = self.lr_milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"lr_milestones must be strictly increasing, got {ms}")
        if ms and ms[-1] >= self.epochs:
            raise ValueError(f"lr_milestones {ms} must all be < epochs ({self.epochs})")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.loss_scope not in LOSS_SCOPES:
            raise ValueError(f"loss_scope must be one of {LOSS_SCOPES}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = cls.__dataclass_fields__
        unknown = set(obj) - set(known)
        if unknown:
            raise ValueError(f"unknown training fields: {sorted(unknown)}")
        return cls(**obj)


# losses ----------------------------------------------------------------------


def mse_loss(pred: Tensor, target: np.ndarray, scope: str = "full_sequence",
             batch: MaskedBatch | None = None) -> Tensor:
    """Mean squared error over all positions or over masked positions only.

    ``pred`` and ``target`` are (B, T, J, D). Each sample is averaged over its
    selected elements, then samples are averaged.
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise tn.ShapeError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = tn.square(pred - Tensor(target))
    if scope == "full_sequence":
        return diff.mean()
    if scope != "masked_only":
        raise ValueError(f"unknown loss scope {scope!r}")
    if batch is None:
        raise ValueError("masked_only loss needs the mask plans")
    w = batch.position_weights(scope)
    counts = w.sum(axis=(1, 2))
    if np.any(counts == 0):
        raise ValueError("masked_only loss with an empty mask set")
    D = target.shape[-1]
    w = w / (counts[:, None, None] * D * len(counts))
    weights = np.repeat(w[..., None], D, axis=-1)
    return (diff * Tensor(weights)).sum()


def label_smoothing_ce(logits: Tensor, labels: Sequence[int], eps: float = 0.1) -> Tensor:
    """Cross-entropy against 1 - eps on the true class and eps / (C - 1) elsewhere."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B, C = logits.shape
    if labels.shape[0] != B:
        raise ValueError(f"{labels.shape[0]} labels for {B} logit rows")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"labels must lie in [0, {C})")
    target = np.full((B, C), eps / (C - 1))
    target[np.arange(B), labels] = 1.0 - eps
    return -(tn.log_softmax(logits, axis=-1) * Tensor(target)).sum() * (1.0 / B)


# optimisation ----------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float, weight_decay: float = 0.0,
              decoupled: bool = False) -> None:
    """One bias-corrected Adam update.

    By default weight decay is L2-coupled (added to the gradient); with
    ``decoupled`` it is applied to the weights directly (AdamW style).
    """
    missing = [i for i, p in enumerate(params) if p.grad is None]
    if missing:
        raise ValueError(f"parameters {missing} have no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for i, p in enumerate(params):
        g = p.grad
        if weight_decay and not decoupled:
            g = g + weight_decay * p.data
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        m = state.m[i] = b1 * state.m[i] + (1 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if weight_decay and decoupled:
            update = update + lr * weight_decay * p.data
        p.data = p.data - update


def multistep_lr(base_lr: float, gamma: float, milestones: Sequence[int], epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * gamma ** sum(1 for m in milestones if m <= epoch)


# run log ---------------------------------------------------------------------


class RunLog:
    """Per-epoch records, optionally streamed to a newline-delimited JSON file."""

    def __init__(self, path: str | Path | None = None, mode: str = "min"):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        self.mode = mode
        self.best_epoch: int | None = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, record: dict) -> bool:
        """Add a record; return True when it is the new best."""
        if self.records and record["epoch"] <= self.records[-1]["epoch"]:
            raise ValueError("records must be appended in increasing epoch order")
        self.records.append(record)
        if self.path:
            with self.path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
        best = self.best_value()
        v = record["val_metric"]
        improved = best is None or (v < best if self.mode == "min" else v > best)
        if improved:
            self.best_epoch = record["epoch"]
        return improved

    def best_value(self):
        if self.best_epoch is None:
            return None
        return next(r["val_metric"] for r in self.records if r["epoch"] == self.best_epoch)

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    runlog: RunLog


# helpers ---------------------------------------------------------------------


def holdout(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split off a validation slice, stratified when labels are available."""
    try:
        ds.labels
    except ValueError:
        if len(ds) < 2:
            raise ValueError("need at least two sequences to hold out a validation slice")
        perm = make_rng(seed, 0x7A1).permutation(len(ds))
        k = min(max(1, round(fraction * len(ds))), len(ds) - 1)
        return ds.subset(sorted(perm[k:])), ds.subset(sorted(perm[:k]))
    return split(ds, fraction, seed)


def _batches(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    order = rng.permutation(n) if rng is not None else np.arange(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _plans(T: int, J: int, spec: MaskSpec, seed: int, tag: int, epoch: int, idx: Sequence[int]) -> list[MaskPlan]:
    return [make_plan(T, J, spec, make_rng(seed, spec.seed, tag, epoch, int(i))) for i in idx]


def _check_finite(loss: Tensor, where: dict) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDiverged(f"loss became {value} at {where}", dict(where, loss=value))
    return value


def _write_snapshot(out_dir: Path | None, exc: TrainingDiverged) -> None:
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "divergence.json").write_text(json.dumps(exc.snapshot, indent=2, default=str))


def reconstruction_loss(model: SkeletonMAE, frames: np.ndarray, plans: Sequence[MaskPlan], scope: str) -> Tensor:
    batch = MaskedBatch.from_plans(frames, plans)
    return mse_loss(model(batch), frames, scope, batch)


def validation_mse(model: SkeletonMAE, frames: np.ndarray, spec: MaskSpec, tcfg: TrainConfig) -> float:
    total, n = 0.0, len(frames)
    T, J = frames.shape[1:3]
    for idx in _batches(n, tcfg.batch_size, None):
        loss = reconstruction_loss(model, frames[idx], _plans(T, J, spec, tcfg.seed, _VAL_MASK, 0, idx),
                                   tcfg.loss_scope)
        total += loss.item() * len(idx)
    return total / n


# loops -----------------------------------------------------------------------


def pretrain(ds: Dataset, spec: MaskSpec, mcfg: ModelConfig, tcfg: TrainConfig,
             out_dir: str | Path | None = None, model: SkeletonMAE | None = None) -> TrainResult:
    """Masked reconstruction pretraining.

    Masks are redrawn for every sample in every epoch. The best checkpoint is
    the one with the lowest validation MSE (validation masks stay fixed).
    """
    out_dir = Path(out_dir) if out_dir else None
    train, val = holdout(ds, tcfg.val_fraction, tcfg.seed)
    X, Xv = train.stack(), val.stack()
    T, J = X.shape[1:3]
    spec.validate(T, J)
    if model is None:
        model = SkeletonMAE(mcfg, seed=tcfg.seed)
        if tcfg.standardize_inputs:
            model.encoder.set_input_stats(*input_stats(X, mcfg.max_J))
    params = model.parameters()
    opt = AdamState()
    runlog = RunLog(out_dir / "runlog.ndjson" if out_dir else None, mode="min")
    best = None
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        lr = multistep_lr(tcfg.base_lr, tcfg.lr_gamma, tcfg.lr_milestones, epoch)
        total = 0.0
        for step, idx in enumerate(_batches(len(X), tcfg.batch_size, make_rng(tcfg.seed, _SHUFFLE, epoch))):
            plans = _plans(T, J, spec, tcfg.seed, _TRAIN_MASK, epoch, idx)
            loss = reconstruction_loss(model, X[idx], plans, tcfg.loss_scope)
            try:
                value = _check_finite(loss, {"epoch": epoch, "step": step, "lr": lr})
            except TrainingDiverged as exc:
                exc.snapshot["previous"] = runlog.records[-3:]
                _write_snapshot(out_dir, exc)
                raise
            model.zero_grad()
            tn.backward(loss)
            adam_step(params, opt, lr, tcfg.weight_decay, tcfg.decoupled_weight_decay)
            total += value * len(idx)
        val_loss = validation_mse(model, Xv, spec, tcfg)
        record = {"epoch": epoch, "lr": lr, "train_loss": total / len(X), "val_metric": val_loss,
                  "seconds": round(time.perf_counter() - t0, 4)}
        if runlog.append(record):
            best = Checkpoint.from_model(model, {"epoch": epoch, "val_loss": val_loss, "mask": spec.to_dict()})
        log.info("pretrain epoch %d lr=%.2e train=%.5f val=%.5f", epoch, lr, record["train_loss"], val_loss)
    final = Checkpoint.from_model(model, {"epoch": tcfg.epochs - 1, "val_loss": runlog.records[-1]["val_metric"],
                                          "mask": spec.to_dict()})
    if out_dir:
        best.save(out_dir / "ckpt-best")
        final.save(out_dir / "ckpt-final")
    return TrainResult(best, final, runlog)


def predict_logits(model: ActionClassifier, frames: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [model(frames[i:i + batch_size]).data for i in range(0, len(frames), batch_size)]
    return np.concatenate(out, axis=0)


def finetune(ds: Dataset, encoder_ckpt: Checkpoint | None, mcfg: ModelConfig, tcfg: TrainConfig,
             n_classes: int, out_dir: str | Path | None = None) -> TrainResult:
    """End-to-end supervised training of encoder plus linear head.

    With ``encoder_ckpt`` the encoder starts from pretrained weights,
    otherwise from a fresh initialisation. The best checkpoint maximises
    validation accuracy.
    """
    out_dir = Path(out_dir) if out_dir else None
    train, val = holdout(ds, tcfg.val_fraction, tcfg.seed)
    X, y = train.stack(), train.labels
    Xv, yv = val.stack(), val.labels
    model = ActionClassifier(mcfg, n_classes, seed=tcfg.seed)
    init = "scratch"
    if encoder_ckpt is not None:
        model.load_encoder(encoder_ckpt.state)
        init = "pretrained"
    elif tcfg.standardize_inputs:
        model.encoder.set_input_stats(*input_stats(X, mcfg.max_J))
    params = model.parameters()
    opt = AdamState()
    runlog = RunLog(out_dir / "runlog.ndjson" if out_dir else None, mode="max")
    best = None
    for epoch in range(tcfg.epochs):
        t0 = time.perf_counter()
        lr = multistep_lr(tcfg.base_lr, tcfg.lr_gamma, tcfg.lr_milestones, epoch)
        total = 0.0
        for step, idx in enumerate(_batches(len(X), tcfg.batch_size, make_rng(tcfg.seed, _SHUFFLE, epoch))):
            loss = label_smoothing_ce(model(X[idx]), y[idx], tcfg.label_smoothing)
            try:
                value = _check_finite(loss, {"epoch": epoch, "step": step, "lr": lr})
            except TrainingDiverged as exc:
                exc.snapshot["previous"] = runlog.records[-3:]
                _write_snapshot(out_dir, exc)
                raise
            model.zero_grad()
            tn.backward(loss)
            adam_step(params, opt, lr, tcfg.weight_decay, tcfg.decoupled_weight_decay)
            total += value * len(idx)
        val_acc = float(np.mean(predict_logits(model, Xv).argmax(axis=1) == yv))
        record = {"epoch": epoch, "lr": lr, "train_loss": total / len(X), "val_metric": val_acc,
                  "seconds": round(time.perf_counter() - t0, 4)}
        meta = {"epoch": epoch, "val_accuracy": val_acc, "init": init}
        if runlog.append(record):
            best = Checkpoint.from_model(model, meta)
        log.info("finetune epoch %d lr=%.2e train=%.5f val_acc=%.3f", epoch, lr, record["train_loss"], val_acc)
    final = Checkpoint.from_model(model, {"epoch": tcfg.epochs - 1, "val_accuracy": runlog.records[-1]["val_metric"],
                                          "init": init})
    if out_dir:
        best.save(out_dir / "ckpt-best")
        final.save(out_dir / "ckpt-final")
    return TrainResult(best, final, runlog)


def evaluate(ckpt: Checkpoint | ActionClassifier, ds_test: Dataset, n_classes: int | None = None) -> dict:
    """Top-1 and per-class accuracy, confusion matrix and mean cross-entropy."""
    if len(ds_test) == 0:
        raise ValueError("empty test set")
    model = ckpt.build() if isinstance(ckpt, Checkpoint) else ckpt
    C = n_classes or model.n_classes
    X, y = ds_test.stack(), ds_test.labels
    logits = predict_logits(model, X)
    pred = logits.argmax(axis=1)
    conf = np.zeros((C, C), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)
    support = conf.sum(axis=1)
    per_class = [float(conf[c, c] / support[c]) if support[c] else None for c in range(C)]
    loss = label_smoothing_ce(Tensor(logits), y, 0.0).item()
    return {
        "accuracy": float(np.mean(pred == y)),
        "per_class_accuracy": per_class,
        "confusion": conf.tolist(),
        "mean_loss": loss,
        "n": int(len(y)),
    }
