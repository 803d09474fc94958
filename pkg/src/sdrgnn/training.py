"""Losses, the training loop with validation-based selection, and evaluation."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .data import MODALITIES, Dataset, missing_rate
from .metrics import MSEAccumulator, build_report, count_params, confusion_matrix, waf1, accuracy
from .model import SDRGNN, ConvBatch, prepare

REC_SCOPES = ("all_slots", "masked_only")


def loss_ce(probs, labels, floor=1e-12):
    """Mean negative log-probability of the true class, log clamped at `floor`."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    picked = probs[np.arange(n), labels]
    return -dc.mean(dc.log(dc.clip_min(picked, floor)))


def loss_rec(recon, truth, mask, scope="all_slots"):
    """sum_m 1/(d_m n_m) sum_i ||recon_i^m - truth_i^m||^2.

    With scope="all_slots" n_m is the utterance count; with "masked_only"
    only masked rows count and n_m is their number (modalities with none
    contribute nothing).
    """
    if scope not in REC_SCOPES:
        raise ValueError(f"rec scope must be one of {REC_SCOPES}, got {scope!r}")
    mask = np.asarray(mask)
    total = None
    for k, m in enumerate(MODALITIES):
        r = recon[m]
        n, d = r.shape
        diff = r - np.asarray(truth[m])
        if scope == "masked_only":
            rows = (mask[:, k] == 0).astype(np.float64)
            if not rows.any():
                continue
            term = dc.tsum(diff * diff * rows[:, None]) * (1.0 / (d * rows.sum()))
        else:
            term = dc.tsum(diff * diff) * (1.0 / (d * n))
        total = term if total is None else total + term
    return total if total is not None else dc.Tensor(0.0)


def loss_total(ce, rec, e):
    if not 0.0 <= e <= 1.0:
        raise ValueError(f"loss weight must be in [0, 1], got {e}")
    return (1.0 - e) * ce + e * rec


def batch_loss(model: SDRGNN, batch: ConvBatch, e, scope, training=False, rng=None):
    out = model(batch, training=training, rng=rng)
    conv = batch.conv
    ce = loss_ce(out.probs, conv.labels)
    rec = loss_rec(out.recon, conv.features, conv.mask, scope)
    return loss_total(ce, rec, e), out


@dataclass
class TrainConfig:
    epochs: int = 100
    loss_weight: float = 0.5
    lr: float = 1e-3
    weight_decay: float = 1e-5
    seed: int = 0
    rec_scope: str = "all_slots"
    patience: int = 20
    clip_norm: float | None = None
    # stop once training-set accuracy (eval mode) reaches this value
    stop_train_acc: float | None = None

    def validate(self):
        if not 0.0 <= self.loss_weight <= 1.0:
            raise ValueError(f"loss weight must be in [0, 1], got {self.loss_weight}")
        if self.rec_scope not in REC_SCOPES:
            raise ValueError(f"rec scope must be one of {REC_SCOPES}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_waf1: float
    seconds: float
    train_acc: float | None = None


@dataclass
class RunRecord:
    epochs: list = field(default_factory=list)
    best_epoch: int | None = None

    @property
    def best_val_waf1(self):
        return None if self.best_epoch is None else self.epochs[self.best_epoch - 1].val_waf1

    def values(self):
        """Everything except wall-clock time; equal across reruns with the same seed."""
        return [(r.epoch, r.train_loss, r.val_loss, r.val_waf1, r.train_acc) for r in self.epochs], self.best_epoch

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "val_waf1", "seconds"])
            for r in self.epochs:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_waf1), f"{r.seconds:.4f}"])


@dataclass
class Evaluation:
    y_true: np.ndarray
    y_pred: np.ndarray
    loss: float
    mse: dict
    zero_fill_mse: dict

    def confusion(self, c):
        return confusion_matrix(self.y_true, self.y_pred, c)


def evaluate_batches(model: SDRGNN, batches, e=0.5, scope="all_slots"):
    ys, ps, losses = [], [], []
    acc = MSEAccumulator()
    zero = MSEAccumulator()
    for b in batches:
        loss, out = batch_loss(model, b, e, scope)
        losses.append(loss.item() * b.n)
        ys.append(b.conv.labels)
        ps.append(out.probs.data.argmax(axis=1))
        acc.add({m: out.recon[m].data for m in MODALITIES}, b.conv.features, b.conv.mask)
        zero.add({m: np.zeros_like(b.conv.features[m]) for m in MODALITIES}, b.conv.features, b.conv.mask)
    n = sum(b.n for b in batches)
    return Evaluation(np.concatenate(ys), np.concatenate(ps), sum(losses) / n, acc.result(), zero.result())


def evaluate(model: SDRGNN, ds: Dataset, tcfg: TrainConfig | None = None):
    tcfg = tcfg or TrainConfig()
    ev = evaluate_batches(model, [prepare(c, model.cfg) for c in ds.conversations], tcfg.loss_weight, tcfg.rec_scope)
    report = build_report(ev.y_true, ev.y_pred, ds.num_classes, ev.mse, missing_rate(ds),
                          count_params(model.parameters()))
    return report, ev


def train(model: SDRGNN, train_ds: Dataset, val_ds: Dataset, tcfg: TrainConfig, log=None):
    """Adam over one conversation per step; keeps the parameters with the best validation WAF1.

    Returns (best parameter state, RunRecord); the model is left holding
    the best state.
    """
    tcfg.validate()
    if not train_ds.conversations or not val_ds.conversations:
        raise ValueError("training and validation splits must be non-empty")
    record = RunRecord()
    best_state = model.state()
    if tcfg.epochs == 0:
        return best_state, record
    train_batches = [prepare(c, model.cfg) for c in train_ds.conversations]
    val_batches = [prepare(c, model.cfg) for c in val_ds.conversations]
    opt = dc.Adam(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay, clip_norm=tcfg.clip_norm)
    rng = np.random.default_rng([tcfg.seed, 2])
    best, since_best = -math.inf, 0
    for epoch in range(1, tcfg.epochs + 1):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for k in rng.permutation(len(train_batches)):
            b = train_batches[k]
            loss, _ = batch_loss(model, b, tcfg.loss_weight, tcfg.rec_scope, training=True, rng=rng)
            dc.backward(loss)
            opt.step()
            total += loss.item() * b.n
            count += b.n
        val = evaluate_batches(model, val_batches, tcfg.loss_weight, tcfg.rec_scope)
        val_waf1 = waf1(val.confusion(val_ds.num_classes))
        train_acc = None
        if tcfg.stop_train_acc is not None:
            tr = evaluate_batches(model, train_batches, tcfg.loss_weight, tcfg.rec_scope)
            train_acc = accuracy(tr.confusion(train_ds.num_classes))
        record.epochs.append(EpochRecord(epoch, total / count, val.loss, val_waf1, time.perf_counter() - t0, train_acc))
        if log:
            log(f"epoch {epoch:4d} train_loss {total / count:.4f} val_loss {val.loss:.4f} val_waf1 {val_waf1:.4f}")
        if val_waf1 > best:
            best, since_best = val_waf1, 0
            best_state = model.state()
            record.best_epoch = epoch
        else:
            since_best += 1
        if train_acc is not None and train_acc >= tcfg.stop_train_acc:
            break
        if since_best >= tcfg.patience:
            break
    model.load_state(best_state)
    return best_state, record


def save_record(record: RunRecord, directory):
    record.save(Path(directory) / "metrics.csv")
