"""Joint accuracy/calibration training and the calibration baselines."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .gcn import (GCNObjective, PredictionTable, TrainConfig, fit, inverse_frequency_weights,
                  softmax)
from .graph import normalize_adjacency
from .influence import SolverConfig
from .metrics import ace, calibration_report, classification_metrics
from .uncertainty import CoverageConfig, jackknife_records

LOG_FIELDS = ["epoch", "loss_total", "loss_ce", "loss_eice", "val_macro_ace", "val_macro_f1"]


@dataclass
class CaliRareConfig:
    lam: float = 0.1
    refresh_every: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    coverage: CoverageConfig = field(default_factory=CoverageConfig)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise DomainError(f"lambda {self.lam} outside [0, 1]")
        if self.refresh_every < 1:
            raise DomainError("refresh_every must be at least 1")


def joint_loss(ce: float, l_eice: float, lam: float) -> float:
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda {lam} outside [0, 1]")
    if lam == 0.0:
        return ce
    if lam == 1.0:
        return l_eice
    return (1.0 - lam) * ce + lam * l_eice


def eice_regularizer(obj: GCNObjective, params, solver_cfg: SolverConfig,
                     coverage_cfg: CoverageConfig, workers: int = 1, results=None):
    """Mean ICE over the training nodes, with dropout off.

    Returns ``(value, ice_values, records, loo_results)``.
    """
    records, results = jackknife_records(obj, params, obj.train_ids, solver_cfg, coverage_cfg,
                                         workers=workers, results=results)
    ices = np.array([abs(r.uncertainty - r.confidence) for r in records])
    return float(ices.mean()), ices, records, results


class _FrozenTargets:
    """Epoch hook: ICE term against uncertainty targets refreshed every few epochs."""

    def __init__(self, obj, cfg: CaliRareConfig, workers: int):
        self.obj = obj
        self.cfg = cfg
        self.workers = workers
        self.targets = None
        self.refreshed_at = []

    def __call__(self, epoch, params, cache):
        if self.targets is None or (epoch - 1) % self.cfg.refresh_every == 0:
            _, _, records, _ = eice_regularizer(self.obj, params, self.cfg.solver,
                                                self.cfg.coverage, self.workers)
            self.targets = np.array([r.uncertainty for r in records])
            self.refreshed_at.append(epoch)
        ids = self.obj.train_ids
        probs = cache.probs[ids]
        k = np.argmax(probs, axis=1)
        conf = probs[np.arange(ids.size), k]
        gap = self.targets - conf
        value = float(np.abs(gap).mean())
        # d|u - c|/dc = -sign(u - c); dc/dlogits = c (onehot_k - p)
        dconf = -probs * conf[:, None]
        dconf[np.arange(ids.size), k] += conf
        g_out = np.zeros_like(cache.probs)
        g_out[ids] = (-np.sign(gap) / ids.size)[:, None] * dconf
        return value, g_out, {"targets": self.targets}


def epoch_logger(g, val_ids, rows):
    def on_epoch(record, params, eval_cache):
        preds = PredictionTable.from_logits(eval_cache.logits)
        try:
            _, macro = ace(preds, g.labels, val_ids, 10)
        except DomainError:
            macro = math.nan
        _, _, f1 = classification_metrics(preds, g.labels, val_ids)
        rows.append([record.epoch, record.loss_total, record.loss_ce, record.loss_eice,
                     macro, f1])

    return on_epoch


def train_calirare(g, split, cfg: CaliRareConfig, adj=None, workers: int = 1,
                   minority_class: int = 1, report_ids=None, bins: int = 10,
                   report: bool = True):
    """Train with ``(1 - lam) CE + lam EICE`` and report on ``report_ids``.

    Returns ``(params, report, log_rows, refresh_epochs)``; ``report`` is
    ``None`` when not requested.  With ``lam = 0``
    the trajectory is exactly that of :func:`calikit.gcn.train`.
    """
    adj = normalize_adjacency(g) if adj is None else adj
    weights = cfg.train.class_weights
    if weights is None:
        weights = inverse_frequency_weights(g.labels, split.train_ids, g.class_count)
    obj = GCNObjective(adj, g.features, g.labels, split.train_ids, weights,
                       cfg.train.weight_decay, g.feature_dim, cfg.train.hidden_dim,
                       g.class_count)
    hook = _FrozenTargets(obj, cfg, workers)
    rows: list = []
    val_ids = split.val_ids if split.val_ids.size else split.train_ids
    params, _ = fit(g, split, cfg.train, adj=adj, hook=hook, blend=cfg.lam,
                    on_epoch=epoch_logger(g, val_ids, rows))
    if not report:
        return params, None, rows, hook.refreshed_at
    if report_ids is None:
        report_ids = split.test_ids if split.test_ids.size else val_ids
    result = evaluate(obj, params, g.labels, report_ids, cfg.solver, cfg.coverage,
                      minority_class, workers, bins)
    return params, result, rows, hook.refreshed_at


def evaluate(obj, params, labels, node_ids, solver_cfg, coverage_cfg, minority_class=1,
             workers=1, bins=10, temperature=1.0, diagram_bins=20):
    """Full calibration report, EICE from the jackknife over ``node_ids``."""
    params = obj.params(params)
    logits = obj.cache(params).logits
    preds = PredictionTable.from_logits(logits / temperature)
    records, _ = jackknife_records(obj, params, node_ids, solver_cfg, coverage_cfg, workers)
    if temperature != 1.0:
        # the jackknife measures the raw model; report confidences after scaling
        conf = preds.confidence
        records = [type(r)(r.node_id, r.lower, r.upper, r.uncertainty, float(conf[r.node_id]))
                   for r in records]
    return calibration_report(preds, labels, node_ids, minority_class, records, M=bins,
                              diagram_bins=diagram_bins)


def save_log(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        for row in rows:
            writer.writerow([row[0]] + [repr(float(x)) for x in row[1:]])


# ------------------------------------------------------------------ baselines

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def _nll(logits, labels, T):
    p = softmax(logits / T)
    return float(-np.mean(np.log(np.maximum(p[np.arange(labels.size), labels], 1e-12))))


def temperature_scale(val_logits, val_labels, lo=0.05, hi=20.0, tol=1e-4) -> float:
    """Temperature minimizing validation NLL, by golden-section search on ``[lo, hi]``."""
    logits = np.asarray(val_logits, dtype=np.float64)
    labels = np.asarray(val_labels, dtype=np.int64)
    if labels.size == 0:
        raise DomainError("empty validation set")
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = _nll(logits, labels, c), _nll(logits, labels, d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = _nll(logits, labels, c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = _nll(logits, labels, d)
    return (a + b) / 2.0


def train_label_smoothing(g, split, cfg: TrainConfig, epsilon: float = 0.1, adj=None,
                          on_epoch=None):
    from dataclasses import replace

    params, history = fit(g, split, replace(cfg, label_smoothing=epsilon), adj=adj,
                          on_epoch=on_epoch)
    return params, history
