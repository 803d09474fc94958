"""Classification and reconstruction metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import MODALITIES


def confusion_matrix(y_true, y_pred, num_classes):
    """Rows are true labels, columns are predictions."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def per_class_f1(cm):
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    predicted = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)


def weighted_f1(f1, support):
    f1, support = np.asarray(f1, dtype=np.float64), np.asarray(support, dtype=np.float64)
    if support.sum() == 0:
        raise ValueError("WAF1 with zero total support is undefined")
    return float((support * f1).sum() / support.sum())


def waf1(cm):
    """Support-weighted mean of per-class F1."""
    cm = np.asarray(cm)
    return weighted_f1(per_class_f1(cm), cm.sum(axis=1))


def accuracy(cm):
    cm = np.asarray(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("accuracy of an empty confusion matrix is undefined")
    return float(np.trace(cm) / total)


def reconstruction_mse(recon, truth, mask):
    """Per-modality MSE over masked slots only, averaged per element.

    recon/truth: modality -> (n, d_m); mask: (n, 3). Modalities without any
    masked slot map to None. The pooled value averages every masked element.
    """
    out = {}
    sq_total, count_total = 0.0, 0
    for k, m in enumerate(MODALITIES):
        rows = np.asarray(mask)[:, k] == 0
        if not rows.any():
            out[m] = None
            continue
        diff = np.asarray(recon[m])[rows] - np.asarray(truth[m])[rows]
        out[m] = float((diff ** 2).mean())
        sq_total += float((diff ** 2).sum())
        count_total += diff.size
    out["pooled"] = sq_total / count_total if count_total else None
    return out


class MSEAccumulator:
    """Accumulates masked-slot squared errors across conversations."""

    def __init__(self):
        self.sq = {m: 0.0 for m in MODALITIES}
        self.count = {m: 0 for m in MODALITIES}

    def add(self, recon, truth, mask):
        for k, m in enumerate(MODALITIES):
            rows = np.asarray(mask)[:, k] == 0
            if rows.any():
                diff = np.asarray(recon[m])[rows] - np.asarray(truth[m])[rows]
                self.sq[m] += float((diff ** 2).sum())
                self.count[m] += diff.size

    def result(self):
        out = {m: (self.sq[m] / self.count[m] if self.count[m] else None) for m in MODALITIES}
        total = sum(self.count.values())
        out["pooled"] = sum(self.sq.values()) / total if total else None
        return out


def count_params(params):
    return int(sum(p.size for p in params if getattr(p, "trainable", True)))


@dataclass
class MetricsReport:
    waf1: float
    acc: float
    f1: list
    support: list
    mse: dict
    missing_rate: float
    num_params: int
    confusion: np.ndarray = field(repr=False)

    def rows(self):
        rows = [("WAF1", self.waf1), ("ACC", self.acc), ("missing_rate", self.missing_rate),
                ("params", self.num_params)]
        rows += [(f"F1[{j}]", f) for j, f in enumerate(self.f1)]
        rows += [(f"support[{j}]", s) for j, s in enumerate(self.support)]
        rows += [(f"mse[{m}]", v) for m, v in self.mse.items()]
        return rows

    def to_table(self):
        lines = []
        for k, v in self.rows():
            if v is None:
                text = "absent"
            elif isinstance(v, float):
                text = f"{v:.6f}"
            else:
                text = str(v)
            lines.append(f"{k:<16}{text}")
        return "\n".join(lines)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.rows():
            w.writerow([k, "" if v is None else repr(v)])
        return buf.getvalue()

    def save(self, directory, stem="report"):
        directory = Path(directory)
        (directory / f"{stem}.txt").write_text(self.to_table() + "\n", encoding="utf-8")
        (directory / f"{stem}.csv").write_text(self.to_csv(), encoding="utf-8")
        save_confusion(self.confusion, directory / f"{stem}_confusion.csv")


def save_confusion(cm, path):
    cm = np.asarray(cm)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + list(range(cm.shape[1])))
        for j, row in enumerate(cm):
            w.writerow([j] + row.tolist())


def build_report(y_true, y_pred, num_classes, mse, missing_rate, num_params):
    cm = confusion_matrix(y_true, y_pred, num_classes)
    return MetricsReport(waf1(cm), accuracy(cm), per_class_f1(cm).tolist(), cm.sum(axis=1).tolist(),
                         mse, missing_rate, num_params, cm)
