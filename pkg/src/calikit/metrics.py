"""Calibration and classification metrics, plus reliability-bin export."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError


@dataclass
class ReliabilityBins:
    lo: list
    hi: list
    count: list
    accuracy: list
    confidence: list

    @property
    def M(self) -> int:
        return len(self.lo)

    def save_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["bin_lo", "bin_hi", "count", "accuracy", "confidence"])
            for row in zip(self.lo, self.hi, self.count, self.accuracy, self.confidence):
                writer.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]),
                                 repr(float(row[3])), repr(float(row[4]))])

    @classmethod
    def load_csv(cls, path) -> "ReliabilityBins":
        cols = ([], [], [], [], [])
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            next(reader, None)
            for rec in reader:
                for k, (col, val) in enumerate(zip(cols, rec)):
                    col.append(int(val) if k == 2 else float(val))
        return cls(*cols)


def _arrays(preds, labels, node_set):
    ids = np.asarray(node_set, dtype=np.int64)
    if ids.size == 0:
        raise DomainError("node_set is empty")
    labels = np.asarray(labels, dtype=np.int64)
    return ids, np.asarray(preds.probs)[ids], np.asarray(preds.pred_label)[ids], labels[ids]


def binned_deviation(confidence, correct, M: int):
    """Equal-width ECE over raw arrays; returns ``(ece, ReliabilityBins)``."""
    if M < 1:
        raise DomainError("need at least one bin")
    conf = np.asarray(confidence, dtype=np.float64)
    hit = np.asarray(correct, dtype=np.float64)
    n = conf.size
    idx = np.minimum((conf * M).astype(np.int64), M - 1)
    counts = np.bincount(idx, minlength=M)
    acc_sum = np.bincount(idx, weights=hit, minlength=M)
    conf_sum = np.bincount(idx, weights=conf, minlength=M)
    nz = counts > 0
    acc = np.zeros(M)
    cbar = np.zeros(M)
    acc[nz] = acc_sum[nz] / counts[nz]
    cbar[nz] = conf_sum[nz] / counts[nz]
    value = float(np.sum(counts[nz] / n * np.abs(acc[nz] - cbar[nz])))
    edges = np.arange(M + 1) / M
    bins = ReliabilityBins(edges[:-1].tolist(), edges[1:].tolist(), counts.tolist(),
                           acc.tolist(), cbar.tolist())
    return value, bins


def ece(preds, labels, node_set, M: int = 10):
    """Expected calibration error with ``M`` equal-width confidence bins."""
    _, probs, pred, y = _arrays(preds, labels, node_set)
    conf = probs[np.arange(probs.shape[0]), pred]
    return binned_deviation(conf, pred == y, M)


def equal_count_bins(n: int, M: int) -> np.ndarray:
    """Bin index of each sorted rank; the first ``n mod M`` bins hold one extra item."""
    sizes = np.full(min(M, n), n // min(M, n))
    sizes[: n % min(M, n)] += 1
    return np.repeat(np.arange(sizes.size), sizes)


def class_ace(class_probs, is_class, M: int) -> float:
    p = np.asarray(class_probs, dtype=np.float64)
    t = np.asarray(is_class, dtype=np.float64)
    # ties in probability broken by the target so the result is order-free
    order = np.lexsort((t, p))
    p, t = p[order], t[order]
    idx = equal_count_bins(p.size, M)
    nb = idx.max() + 1
    counts = np.bincount(idx, minlength=nb)
    acc = np.bincount(idx, weights=t, minlength=nb) / counts
    conf = np.bincount(idx, weights=p, minlength=nb) / counts
    return float(np.abs(acc - conf).mean())


def ace(preds, labels, node_set, M: int = 10):
    """Per-class adaptive calibration error and their unweighted mean."""
    if M < 1:
        raise DomainError("need at least one bin")
    _, probs, _, y = _arrays(preds, labels, node_set)
    C = probs.shape[1]
    present = np.bincount(y, minlength=C)
    if np.any(present == 0):
        raise DomainError(f"class(es) {np.flatnonzero(present == 0).tolist()} absent from node_set")
    per_class = np.array([class_ace(probs[:, c], y == c, M) for c in range(C)])
    return per_class, float(per_class.mean())


def ice(uncer: float, conf: float) -> float:
    return abs(uncer - conf)


def eice(records) -> float:
    records = list(records)
    if not records:
        raise DomainError("EICE of an empty record set")
    return float(np.mean([ice(r.uncertainty, r.confidence) for r in records]))


def classification_metrics(preds, labels, node_set, minority_class: int = 1):
    """Accuracy, recall on ``minority_class`` and macro-F1 (0/0 counted as 0)."""
    _, probs, pred, y = _arrays(preds, labels, node_set)
    C = probs.shape[1]
    accuracy = float(np.mean(pred == y))
    f1 = np.zeros(C)
    recall = np.zeros(C)
    for c in range(C):
        tp = np.sum((pred == c) & (y == c))
        fp = np.sum((pred == c) & (y != c))
        fn = np.sum((pred != c) & (y == c))
        recall[c] = tp / (tp + fn) if tp + fn else 0.0
        f1[c] = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return accuracy, float(recall[minority_class]), float(f1.mean())


@dataclass
class CalibrationReport:
    ece: float
    ace_per_class: list
    macro_ace: float
    eice: float | None
    accuracy: float
    recall_minority: float
    macro_f1: float
    bins: ReliabilityBins
    minority_class: int = 1
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "ece": self.ece,
            "ace_minority": self.ace_per_class[self.minority_class],
            "macro_ace": self.macro_ace,
            "eice": self.eice,
            "accuracy": self.accuracy,
            "recall": self.recall_minority,
            "macro_f1": self.macro_f1,
            "ace_per_class": list(self.ace_per_class),
            "bins": asdict(self.bins),
        }
        out.update(self.extra)
        return out

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def calibration_report(preds, labels, node_set, minority_class=1, records=None,
                       M: int = 10, diagram_bins: int = 20) -> CalibrationReport:
    """Scalar metrics with ``M`` bins plus a ``diagram_bins`` reliability table."""
    ece_value, _ = ece(preds, labels, node_set, M)
    _, bins = ece(preds, labels, node_set, diagram_bins)
    per_class, macro = ace(preds, labels, node_set, M)
    acc, rec, f1 = classification_metrics(preds, labels, node_set, minority_class)
    e = eice(records) if records else None
    return CalibrationReport(ece_value, per_class.tolist(), macro, e, acc, rec, f1, bins,
                             minority_class)
