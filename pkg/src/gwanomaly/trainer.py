"""Training loop and evaluation.

One epoch: shuffled minibatches -> train-mode forward -> softmax ->
cross-entropy -> backward -> NAdam step. At epoch end the validation loss
(eval mode) drives both the plateau scheduler and the early stopper, and the
best-validation weights are what :func:`train` returns.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tape, backward
from .dataio import LabeledDataset, batches
from .errors import ConfigError, NumericsError
from .layers import softmax
from .metrics import EvalReport, build_report, cross_entropy
from .model import Model, ModelCheckpoint, checkpoint_from_model, predict_labels, save_checkpoint
from .optim import EarlyStopper, NAdam, PlateauScheduler
from .seeding import derive_seed

log = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr", "seconds")


@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 512
    lr: float = 1e-4
    early_stop_patience: int = 10
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    early_stopping: bool = True
    lr_plateau: bool = True
    log_wall_time: bool = True  # False writes 0 in the seconds column for byte-stable history files
    seed: int = 0
    checkpoint_path: Optional[str] = None
    history_path: Optional[str] = None

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    failure: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in self.records:
            w.writerow([r.epoch] + [repr(float(getattr(r, k))) for k in HISTORY_HEADER[1:]])
        if self.failure:
            buf.write(f"# FAILED: {self.failure}\n")
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def read(cls, path) -> "TrainHistory":
        hist = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
            if line.startswith("# FAILED: "):
                hist.failure = line[len("# FAILED: "):]
                continue
            vals = line.split(",")
            hist.records.append(EpochRecord(int(vals[0]), *map(float, vals[1:])))
        return hist


def _params_and_grads(model: Model):
    params = model.named_parameters()
    data = {n: p.data for n, p in params.items()}
    grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    return data, grads


def loss_and_accuracy(model: Model, dataset: LabeledDataset, batch_size: int = 512) -> tuple[float, float]:
    """Eval-mode mean cross-entropy and accuracy, summed over batches in a fixed order."""
    if len(dataset) == 0:
        return math.nan, math.nan
    total, correct = 0.0, 0
    for xb, yb in batches(dataset, batch_size, None):
        logits = model.forward(xb, "eval")
        total += float(cross_entropy(softmax(logits), yb).item()) * len(yb)
        correct += int(np.sum(predict_labels(logits) == yb))
    return total / len(dataset), correct / len(dataset)


def train(model: Model, train_set: LabeledDataset, val_set: LabeledDataset,
          config: Optional[TrainConfig] = None, meta: Optional[dict] = None) -> tuple[ModelCheckpoint, TrainHistory]:
    cfg = TrainConfig() if config is None else config
    meta = dict(meta or {})
    opt = NAdam(lr=cfg.lr)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience)
    stopper = EarlyStopper(cfg.early_stop_patience)
    history = TrainHistory()
    stop_val = len(val_set) > 0
    last_good = model.state_dict()

    def make_ckpt(epoch: int) -> ModelCheckpoint:
        m = dict(meta, optim=opt.hyperparams(), epochs_run=len(history))
        return checkpoint_from_model(model, opt.state_arrays(), epoch, stopper.best, m)

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        seen, loss_sum, correct = 0, 0.0, 0
        for xb, yb in batches(train_set, cfg.batch_size, derive_seed(cfg.seed, f"epoch.{epoch}")):
            model.zero_grad()
            with Tape() as tape:
                logits = model.forward(xb, "train")
                loss = cross_entropy(softmax(logits), yb)
                value = loss.item()
                if not math.isfinite(value):
                    _abort(model, last_good, history, cfg, make_ckpt, f"non-finite loss at epoch {epoch}")
                backward(loss, tape)
                tape.clear()
            try:
                opt.step(*_params_and_grads(model))
            except NumericsError as exc:
                _abort(model, last_good, history, cfg, make_ckpt, f"epoch {epoch}: {exc}")
            seen += len(yb)
            loss_sum += value * len(yb)
            correct += int(np.sum(predict_labels(logits) == yb))
        if stop_val:
            val_loss, val_acc = loss_and_accuracy(model, val_set, cfg.batch_size)
        else:
            val_loss, val_acc = loss_sum / max(seen, 1), correct / max(seen, 1)
        if not math.isfinite(val_loss):
            _abort(model, last_good, history, cfg, make_ckpt, f"non-finite validation loss at epoch {epoch}")
        seconds = time.perf_counter() - t0 if cfg.log_wall_time else 0.0
        history.records.append(EpochRecord(epoch, loss_sum / max(seen, 1), correct / max(seen, 1),
                                           val_loss, val_acc, opt.lr, seconds))
        log.info("epoch %d train_loss %.5f val_loss %.5f val_acc %.4f lr %.2e",
                 epoch, loss_sum / max(seen, 1), val_loss, val_acc, opt.lr)
        last_good = model.state_dict()
        decision = stopper.check(val_loss, model)
        if cfg.lr_plateau:
            opt.lr = sched.epoch_end(val_loss)
        if cfg.early_stopping and decision == "stop":
            log.info("early stop after epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break

    stopper.restore(model)
    ckpt = make_ckpt(stopper.best_epoch)
    if cfg.checkpoint_path:
        save_checkpoint(ckpt, cfg.checkpoint_path)
    if cfg.history_path:
        history.write(cfg.history_path)
    return ckpt, history


def _abort(model, last_good, history, cfg, make_ckpt, reason: str):
    model.load_state_dict(last_good)
    history.failure = reason
    if cfg.checkpoint_path:
        save_checkpoint(make_ckpt(len(history)), cfg.checkpoint_path)
    if cfg.history_path:
        history.write(cfg.history_path)
    raise NumericsError(reason)


def evaluate(model: Model, dataset: LabeledDataset, threshold: float = 0.5,
             with_roc: bool = True, batch_size: int = 512) -> EvalReport:
    """Eval-mode scores on ``dataset`` summarized as an EvalReport."""
    scores = model.predict_proba(dataset.x, batch_size)
    return build_report(scores, dataset.y, threshold, with_roc)


def history_to_dict(history: TrainHistory) -> list[dict]:
    return [asdict(r) for r in history.records]
