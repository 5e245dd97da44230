"""Optimization loops: AdamW with cosine annealing, static-scaffold
training, scaffold-resampling schedules, and seed-gated multitask training.

Every run is deterministic given (run seed, configs): data order comes
from the shuffle stream derived from the run seed, dropout masks from
per-layer mask streams, and scaffold redraws from per-layer backbone
streams that keep advancing across resample events.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, split_train_val
from .errors import ConfigError, RunError
from .model import BackboneSpec, Model, ModelConfig, build_model
from .numerics import softmax_xent
from .prng import DrawKind, derive_stream

RESAMPLE_SCHEDULES = ("static", "per_epoch", "per_batch", "microbatch")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 128
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "cosine"
    resample: str = "static"
    resample_k: int = 2
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.resample not in RESAMPLE_SCHEDULES:
            raise ConfigError(f"resample must be one of {RESAMPLE_SCHEDULES}, got {self.resample!r}")
        if self.resample in ("per_batch", "microbatch") and self.resample_k < 2:
            raise ConfigError(f"resample_k must be >= 2 for {self.resample}, got {self.resample_k}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr, "weight_decay": self.weight_decay, "batch_size": self.batch_size,
            "epochs": self.epochs, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "schedule": self.schedule, "resample": self.resample, "resample_k": self.resample_k,
            "val_fraction": self.val_fraction,
        }


@dataclass
class RunMetrics:
    epochs: list = field(default_factory=list)  # one dict per epoch
    beta_trajectory: list = field(default_factory=list)  # per epoch, per layer
    final_betas: list = field(default_factory=list)
    best_epoch: int = -1
    final_test_accuracy: float = 0.0
    final_test_loss: float = 0.0
    wall_time: float = 0.0
    model: object = None  # trained Model (best-val weights restored)

    def summary(self) -> dict:
        return {
            "final_test_accuracy": self.final_test_accuracy,
            "final_test_loss": self.final_test_loss,
            "best_epoch": self.best_epoch,
            "final_betas": self.final_betas,
            "epochs": self.epochs,
            "wall_time": self.wall_time,
        }


class AdamW:
    """Decoupled weight decay Adam over trainable tensors only."""

    def __init__(self, params, lr=1e-3, weight_decay=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr_t: float | None = None):
        """One update; decay shrinks the pre-step parameter by lr*wd*param."""
        lr = self.lr if lr_t is None else lr_t
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def adamw_step(optimizer: AdamW, lr_t: float) -> None:
    optimizer.step(lr_t)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * step / total)) / 2."""
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step must lie in [0, {total_steps}], got {step}")
    if total_steps == 0:
        return lr0
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def evaluate(model: Model, dataset: Dataset, batch_size: int = 2048) -> tuple[float, float]:
    """(mean loss, accuracy) in eval mode."""
    total_loss = 0.0
    correct = 0
    n = len(dataset)
    for start in range(0, n, batch_size):
        x = dataset.images[start:start + batch_size]
        y = dataset.labels[start:start + batch_size]
        logits = model.forward_logits(x)
        loss = softmax_xent(logits, y)
        total_loss += loss.item() * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return total_loss / n, correct / n


def resample_backbone(model: Model, schedule: str) -> None:
    """Redraw every frozen matrix unless the schedule is static."""
    if schedule == "static":
        return
    model.resample_backbones()


def _layer_betas(model: Model) -> list[float]:
    betas = []
    for layer in model.all_layers():
        if hasattr(layer, "adapter"):
            betas.append(float(layer.adapter.beta.data))
    return betas


def _train_one_batch(model, optimizer, x, y, lr_t, cfg: TrainConfig):
    """One optimizer step under the configured resampling schedule.

    Returns (mean loss over the bunch, correct count).  For per_batch the
    same batch is pushed through k freshly resampled scaffolds; for
    microbatch the batch is split into k sub-batches, each under its own
    fresh scaffold.  Accumulated gradients are averaged, keeping the lr
    meaningful across schedules.
    """
    optimizer.zero_grad()
    if cfg.resample == "per_batch":
        k = cfg.resample_k
        losses = 0.0
        correct = 0
        for _ in range(k):
            model.resample_backbones()
            logits = model.forward_logits(x, training=True)
            loss = softmax_xent(logits, y)
            loss.backward()
            losses += loss.item()
            correct += int((logits.data.argmax(axis=1) == y).sum())
        for p in optimizer.params:
            if p.grad is not None:
                p.grad /= k
        optimizer.step(lr_t)
        return losses / k, correct // k
    if cfg.resample == "microbatch":
        k = cfg.resample_k
        chunks = np.array_split(np.arange(len(y)), k)
        losses = 0.0
        correct = 0
        used = 0
        for idx in chunks:
            if len(idx) == 0:
                continue
            model.resample_backbones()
            logits = model.forward_logits(x[idx], training=True)
            loss = softmax_xent(logits, y[idx])
            loss.backward()
            losses += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
            used += 1
        for p in optimizer.params:
            if p.grad is not None:
                p.grad /= used
        optimizer.step(lr_t)
        return losses / len(y), correct
    logits = model.forward_logits(x, training=True)
    loss = softmax_xent(logits, y)
    loss.backward()
    optimizer.step(lr_t)
    return loss.item(), int((logits.data.argmax(axis=1) == y).sum())


def train_run(
    model_cfg: ModelConfig,
    backbone_spec: BackboneSpec,
    train_cfg: TrainConfig,
    train_dataset: Dataset,
    test_dataset: Dataset,
) -> RunMetrics:
    """Full training run; returns per-epoch metrics with best-val weights
    restored before the final test evaluation."""
    started = time.perf_counter()
    model = build_model(model_cfg, backbone_spec)
    shuffle = derive_stream(backbone_spec.seed, 0, DrawKind.DATA_SHUFFLE)
    train_split, val_split = split_train_val(train_dataset, shuffle, train_cfg.val_fraction)

    trainables = [p for _, p in model.trainable_params()]
    optimizer = AdamW(
        trainables, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay,
        beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps,
    )

    n = len(train_split)
    steps_per_epoch = math.ceil(n / train_cfg.batch_size)
    total_steps = train_cfg.epochs * steps_per_epoch
    metrics = RunMetrics()
    best_val = -1.0
    best_snapshot = None
    global_step = 0

    for epoch in range(train_cfg.epochs):
        if train_cfg.resample == "per_epoch" and epoch > 0:
            model.resample_backbones()
        perm = shuffle.permutation(n)
        epoch_loss = 0.0
        epoch_correct = 0
        for start in range(0, n, train_cfg.batch_size):
            idx = perm[start:start + train_cfg.batch_size]
            x = train_split.images[idx]
            y = train_split.labels[idx]
            lr_t = (
                cosine_lr(global_step, total_steps, train_cfg.lr)
                if train_cfg.schedule == "cosine"
                else train_cfg.lr
            )
            loss, correct = _train_one_batch(model, optimizer, x, y, lr_t, train_cfg)
            if not math.isfinite(loss):
                raise RunError(
                    f"training diverged at epoch {epoch} (non-finite loss)",
                    last_finite_epoch=epoch - 1,
                )
            epoch_loss += loss * len(y)
            epoch_correct += correct
            global_step += 1

        val_loss, val_acc = evaluate(model, val_split)
        betas = _layer_betas(model)
        metrics.beta_trajectory.append(betas)
        metrics.epochs.append({
            "epoch": epoch,
            "train_loss": epoch_loss / n,
            "train_accuracy": epoch_correct / n,
            "val_loss": val_loss,
            "val_accuracy": val_acc,
            "lr": cosine_lr(global_step, total_steps, train_cfg.lr) if train_cfg.schedule == "cosine" else train_cfg.lr,
            "beta_min": min(betas) if betas else None,
            "beta_median": float(np.median(betas)) if betas else None,
        })
        if val_acc > best_val:
            best_val = val_acc
            metrics.best_epoch = epoch
            # snapshot the frozen state too: the adapters are only
            # meaningful with the scaffold they were trained against
            frozen = [
                (layer, layer.backbone, layer.frozen_bias)
                for layer in model.all_layers()
                if hasattr(layer, "backbone")
            ]
            best_snapshot = ([p.data.copy() for p in trainables], frozen)

    # best-val selection applies to the static schedule only; resampling
    # ablations measure the damage of a churning scaffold, and selecting a
    # lucky (scaffold, adapter) pairing from validation would mask it
    if best_snapshot is not None and train_cfg.resample == "static":
        saved_params, frozen = best_snapshot
        for p, saved in zip(trainables, saved_params):
            p.data[...] = saved
        for layer, matrix, bias in frozen:
            layer.set_backbone(matrix, bias)
    elif train_cfg.resample != "static":
        metrics.best_epoch = train_cfg.epochs - 1
    test_loss, test_acc = evaluate(model, test_dataset)
    metrics.final_test_loss = test_loss
    metrics.final_test_accuracy = test_acc
    metrics.final_betas = _layer_betas(model)
    metrics.wall_time = time.perf_counter() - started
    metrics.model = model
    return metrics


@dataclass
class SeedGateResult:
    """Per-seed evaluation of one shared adapter across label partitions."""

    confusion: list  # per seed: [10, num_model_classes] row-normalized
    assigned_accuracy: list
    non_assigned_accuracy: list
    ooc_digit0_rate: list  # empty unless ooc_mode
    partition: object


def seed_gated_train(
    partition,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_dataset: Dataset,
    test_dataset: Dataset,
    family=None,
) -> SeedGateResult:
    """Train one shared adapter, cycling through the partition's backbone
    seeds within every epoch; evaluate each test digit under each seed."""
    num_classes = partition.num_model_classes(model_cfg.num_classes)
    cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "num_classes": num_classes})
    spec = BackboneSpec.from_config(cfg, partition.seeds[0], family)
    model = build_model(cfg, spec)
    shuffle = derive_stream(partition.seeds[0], 0, DrawKind.DATA_SHUFFLE)

    trainables = [p for _, p in model.trainable_params()]
    optimizer = AdamW(
        trainables, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay,
        beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps,
    )

    views = [partition.training_view(train_dataset, g) for g in range(len(partition.groups))]
    steps_per_epoch = sum(math.ceil(len(v) / train_cfg.batch_size) for v in views)
    total_steps = train_cfg.epochs * steps_per_epoch
    global_step = 0
    static_cfg = TrainConfig(**{**train_cfg.to_dict(), "resample": "static"})

    for _ in range(train_cfg.epochs):
        for g, view in enumerate(views):
            model.swap_seed_backbones(partition.seeds[g])
            perm = shuffle.permutation(len(view))
            for start in range(0, len(view), train_cfg.batch_size):
                idx = perm[start:start + train_cfg.batch_size]
                lr_t = (
                    cosine_lr(global_step, total_steps, train_cfg.lr)
                    if train_cfg.schedule == "cosine"
                    else train_cfg.lr
                )
                loss, _ = _train_one_batch(
                    model, optimizer, view.images[idx], view.labels[idx], lr_t, static_cfg
                )
                if not math.isfinite(loss):
                    raise RunError("seed-gated training diverged", last_finite_epoch=None)
                global_step += 1

    confusion = []
    assigned = []
    non_assigned = []
    ooc0 = []
    for g in range(len(partition.groups)):
        model.swap_seed_backbones(partition.seeds[g])
        preds = []
        for start in range(0, len(test_dataset), 2048):
            logits = model.forward_logits(test_dataset.images[start:start + 2048])
            preds.append(logits.data.argmax(axis=1))
        preds = np.concatenate(preds)
        counts = np.zeros((10, num_classes), dtype=np.int64)
        for digit in range(10):
            mask = test_dataset.labels == digit
            if mask.any():
                counts[digit] = np.bincount(preds[mask], minlength=num_classes)
        rows = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
        confusion.append(rows)
        group = sorted(partition.groups[g])
        others = [d for d in range(10) if d not in partition.groups[g]]
        assigned.append(float(np.mean([rows[d, d] for d in group])))
        non_assigned.append(float(np.mean([rows[d, d] for d in others])))
        if partition.ooc_mode:
            ooc0.append(float(rows[0, partition.ooc_label]))

    return SeedGateResult(
        confusion=confusion,
        assigned_accuracy=assigned,
        non_assigned_accuracy=non_assigned,
        ooc_digit0_rate=ooc0,
        partition=partition,
    )


def beta_summary(final_betas_per_run) -> dict:
    """Descriptive stats over final per-layer backbone gains across runs."""
    chunks = [np.asarray(b, dtype=np.float64) for b in final_betas_per_run if len(b)]
    if not chunks:
        raise ConfigError("beta_summary needs at least one run with recorded betas")
    values = np.concatenate(chunks)
    q1, q3 = np.percentile(values, [25, 75])
    return {
        "mean": float(values.mean()),
        "median": float(np.median(values)),
        "iqr": [float(q1), float(q3)],
        "min": float(values.min()),
        "count": int(values.size),
    }


def write_metrics_csv(metrics: RunMetrics, path: str) -> None:
    """One row per epoch and split: epoch, split, loss, accuracy, lr,
    beta_min, beta_median."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,split,loss,accuracy,lr,beta_min,beta_median\n")
        for row in metrics.epochs:
            beta_min = "" if row["beta_min"] is None else f"{row['beta_min']:.6f}"
            beta_med = "" if row["beta_median"] is None else f"{row['beta_median']:.6f}"
            for split in ("train", "val"):
                fh.write(
                    f"{row['epoch']},{split},{row[split + '_loss']:.6f},"
                    f"{row[split + '_accuracy']:.6f},{row['lr']:.8f},{beta_min},{beta_med}\n"
                )
