"""Training loop: Adam, reduce-on-plateau learning rate, early stopping,
stratified validation split and best-epoch checkpoint selection.

All randomness is drawn from named substreams of one seed so identical
configurations reproduce bit-identical runs on one platform.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .errors import ConfigError, TrainingError
from .models import ModelGraph, save_checkpoint
from .ops import Parameter


def substream_rng(seed: int, name: str) -> np.random.Generator:
    """Independent, reproducible RNG stream derived from (seed, name)."""
    tag = int.from_bytes(hashlib.sha256(name.encode()).digest()[:8], "big")
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 500
    lr_initial: float = 1e-3
    lr_factor: float = 0.75
    lr_patience: int = 20
    stop_patience: int = 50
    val_fraction: float = 0.10
    loss_weights: tuple[float, float] | None = None  # defaults to the model's
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    min_delta: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0,1), got {self.val_fraction}")
        if not 0.0 < self.lr_factor < 1.0:
            raise ConfigError(f"lr_factor must be in (0,1), got {self.lr_factor}")
        if self.lr_patience >= self.stop_patience:
            raise ConfigError(
                f"lr_patience ({self.lr_patience}) must be < stop_patience "
                f"({self.stop_patience})"
            )
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.loss_weights is not None:
            a, b = self.loss_weights
            if a < 0 or b < 0 or abs(a + b - 1.0) > 1e-9:
                raise ConfigError(
                    f"loss weights must be nonnegative and sum to 1, got ({a}, {b})"
                )

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size, "max_epochs": self.max_epochs,
            "lr_initial": self.lr_initial, "lr_factor": self.lr_factor,
            "lr_patience": self.lr_patience, "stop_patience": self.stop_patience,
            "val_fraction": self.val_fraction,
            "loss_weights": list(self.loss_weights) if self.loss_weights else None,
            "seed": self.seed, "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2, "adam_eps": self.adam_eps,
            "min_delta": self.min_delta,
        }


# ---------------------------------------------------------------------------
# dataset split
# ---------------------------------------------------------------------------

def split_train_val(items, val_fraction: float, seed: int,
                    machine_types=None):
    """Deterministic shuffled split, stratified by machine type.

    Every type contributes at least one item to validation; types with
    fewer than 2 items cannot be stratified and are rejected.
    """
    items = list(items)
    if not items:
        raise TrainingError("cannot split an empty dataset")
    if machine_types is None:
        machine_types = ["_all"] * len(items)
    if len(machine_types) != len(items):
        raise TrainingError("machine_types must parallel items")
    rng = substream_rng(seed, "split")
    by_type: dict[str, list[int]] = {}
    for i, t in enumerate(machine_types):
        by_type.setdefault(t, []).append(i)
    train_idx, val_idx = [], []
    for t in sorted(by_type):
        idx = by_type[t]
        if len(idx) < 2:
            raise TrainingError(
                f"machine type {t!r} has {len(idx)} item(s); need >= 2 to stratify"
            )
        n_val = int(round(val_fraction * len(idx)))
        n_val = min(max(n_val, 1), len(idx) - 1)
        order = rng.permutation(len(idx))
        val_idx.extend(idx[k] for k in order[:n_val])
        train_idx.extend(idx[k] for k in order[n_val:])
    train_idx.sort()
    val_idx.sort()
    return [items[i] for i in train_idx], [items[i] for i in val_idx]


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamOptimizer:
    """Adam with bias-corrected first/second moments."""

    def __init__(self, params: list[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(
                    f"non-finite gradient in {p.name} at step {self.t}"
                )
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# schedule callbacks
# ---------------------------------------------------------------------------

class PlateauScheduler:
    """Multiply lr by `factor` when val loss stalls for `patience` epochs."""

    def __init__(self, patience: int = 20, factor: float = 0.75,
                 min_delta: float = 0.0):
        self.patience = patience
        self.factor = factor
        self.min_delta = min_delta
        self.best = np.inf
        self.wait = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch's val loss; returns True when lr should drop."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            self.wait = 0
            return True
        return False


class EarlyStopper:
    """Stop when val loss has not improved for `patience` epochs."""

    def __init__(self, patience: int = 50, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.wait = 0

    def update(self, val_loss: float) -> bool:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class SegmentDataset:
    """Fixed-size model inputs with clip-level metadata.

    ``inputs`` is (N,1,H,W) for the conv models or (N,D) for the dense
    baseline; rows sharing a clip_id came from the same audio clip and are
    kept on the same side of the train/val split.
    """

    inputs: np.ndarray
    clip_ids: list[str]
    machine_types: list[str]
    label_indices: np.ndarray | None = None

    def __len__(self) -> int:
        return self.inputs.shape[0]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    mse: float
    cce: float
    lr: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = "max_epochs"

    def best_val_loss(self) -> float:
        return self.records[self.best_epoch - 1].val_loss

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss", "mse", "cce", "lr"])
            for r in self.records:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                                 repr(r.mse), repr(r.cce), repr(r.lr)])


def _batch_losses(model: ModelGraph, x: np.ndarray, labels, alpha: float,
                  beta: float, train: bool, backprop: bool):
    recon, logits = model.forward(x, train=train)
    mse, d_recon = ops.mse_loss(recon, x)
    cce, d_logits = 0.0, None
    if model.classifier is not None:
        if labels is None:
            raise TrainingError("semi-supervised model needs labeled segments")
        cce, d_logits = ops.softmax_cce_loss(logits, labels)
    if backprop:
        model.zero_grads()
        if d_logits is not None:
            model.backward(alpha * d_recon, beta * d_logits)
        else:
            model.backward(alpha * d_recon)
    return mse, cce


def _epoch_pass(model, dataset, order, batch_size, alpha, beta, train,
                optimizer=None):
    """One pass over `order`; returns weighted-average (mse, cce)."""
    total_mse = total_cce = 0.0
    n_total = len(order)
    for b_start in range(0, n_total, batch_size):
        idx = order[b_start: b_start + batch_size]
        x = dataset.inputs[idx]
        labels = None
        if dataset.label_indices is not None:
            labels = dataset.label_indices[idx]
        mse, cce = _batch_losses(model, x, labels, alpha, beta,
                                 train=train, backprop=optimizer is not None)
        loss = alpha * mse + beta * cce
        if not np.isfinite(loss):
            raise TrainingError(
                f"non-finite loss on batch starting at index {b_start}"
            )
        if optimizer is not None:
            optimizer.step()
        total_mse += mse * len(idx)
        total_cce += cce * len(idx)
    return total_mse / n_total, total_cce / n_total


def train(model: ModelGraph, dataset: SegmentDataset, config: TrainConfig,
          checkpoint_dir: str | Path | None = None,
          verbose: bool = True) -> tuple[ModelGraph, TrainHistory]:
    """Run the full training procedure and return the best-epoch model.

    Epochs iterate shuffled mini-batches (last partial batch kept); each
    epoch ends with a validation pass in BN inference mode, feeding the
    plateau scheduler and the early stopper. Parameters are restored from
    the best-validation-loss epoch, not the last one.
    """
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    if config.loss_weights is not None:
        alpha, beta = config.loss_weights
    else:
        alpha, beta = model.metadata["config"].get("loss_weights", (1.0, 0.0))

    # split at clip granularity so segments of one clip stay together
    clip_order: list[str] = []
    clip_type: dict[str, str] = {}
    clip_segments: dict[str, list[int]] = {}
    for i, cid in enumerate(dataset.clip_ids):
        if cid not in clip_segments:
            clip_order.append(cid)
            clip_type[cid] = dataset.machine_types[i]
            clip_segments[cid] = []
        clip_segments[cid].append(i)
    train_clips, val_clips = split_train_val(
        clip_order, config.val_fraction, config.seed,
        machine_types=[clip_type[c] for c in clip_order],
    )
    train_idx = np.array([i for c in train_clips for i in clip_segments[c]])
    val_idx = np.array([i for c in val_clips for i in clip_segments[c]])

    optimizer = AdamOptimizer(model.parameters(), lr=config.lr_initial,
                              beta1=config.adam_beta1, beta2=config.adam_beta2,
                              eps=config.adam_eps)
    scheduler = PlateauScheduler(config.lr_patience, config.lr_factor,
                                 config.min_delta)
    stopper = EarlyStopper(config.stop_patience, config.min_delta)
    shuffle_rng = substream_rng(config.seed, "shuffle")

    history = TrainHistory()
    best_val = np.inf
    best_snapshot: dict[str, np.ndarray] = {}
    stop_reason = "max_epochs"

    for epoch in range(1, config.max_epochs + 1):
        lr_this_epoch = optimizer.lr
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        tr_mse, tr_cce = _epoch_pass(model, dataset, order, config.batch_size,
                                     alpha, beta, train=True, optimizer=optimizer)
        train_loss = alpha * tr_mse + beta * tr_cce
        va_mse, va_cce = _epoch_pass(model, dataset, val_idx, config.batch_size,
                                     alpha, beta, train=False)
        val_loss = alpha * va_mse + beta * va_cce
        history.records.append(EpochRecord(
            epoch=epoch, train_loss=train_loss, val_loss=val_loss,
            mse=va_mse, cce=va_cce, lr=lr_this_epoch,
        ))
        if verbose:
            print(f"epoch {epoch}/{config.max_epochs}  train {train_loss:.6f}  "
                  f"val {val_loss:.6f}  lr {lr_this_epoch:.2e}")
        if val_loss < best_val:
            best_val = val_loss
            history.best_epoch = epoch
            best_snapshot = {k: v.copy() for k, v in model.named_arrays().items()}
        if stopper.update(val_loss):
            stop_reason = "early_stop"
        if scheduler.update(val_loss):
            optimizer.lr *= config.lr_factor
        if stop_reason == "early_stop":
            break
    history.stop_reason = stop_reason

    final_snapshot = {k: v.copy() for k, v in model.named_arrays().items()}
    if best_snapshot:
        for key, value in model.named_arrays().items():
            value[...] = best_snapshot[key]

    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(checkpoint_dir / "best.npz", model)
        for key, value in model.named_arrays().items():
            value[...] = final_snapshot[key]
        save_checkpoint(checkpoint_dir / "final.npz", model)
        for key, value in model.named_arrays().items():
            value[...] = best_snapshot[key]
        history.write_csv(checkpoint_dir / "history.csv")
    return model, history
