"""Jackknife intervals over leave-one-out ensembles."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass
class CoverageConfig:
    coverage: float = 0.9

    def __post_init__(self):
        if not 0.5 < self.coverage < 1.0:
            raise DomainError(f"coverage {self.coverage} outside (0.5, 1)")

    @property
    def miscoverage(self) -> float:
        return 1.0 - self.coverage


@dataclass(frozen=True)
class UncertaintyRecord:
    node_id: int
    lower: float
    upper: float
    uncertainty: float
    confidence: float


def _order_stat(values, k: int) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    return float(v[k - 1])


def _check(miscoverage, values):
    n = np.asarray(values).size
    if n == 0:
        raise DomainError("quantile of an empty set")
    if not 0.0 < miscoverage < 0.5:
        raise DomainError(f"miscoverage {miscoverage} outside (0, 0.5)")
    return n


def _snap(x: float) -> float:
    # 1 - 0.9 is not exactly 0.1; keep integral products integral
    r = round(x)
    return float(r) if abs(x - r) < 1e-9 else x


def lower_rank(miscoverage: float, n: int) -> int:
    return max(1, math.floor(_snap(miscoverage * (n + 1))))


def upper_rank(miscoverage: float, n: int) -> int:
    return min(n, math.ceil(_snap((1.0 - miscoverage) * (n + 1))))


def q_lower(miscoverage: float, values) -> float:
    """k-th smallest value, ``k = max(1, floor(m (n + 1)))``."""
    n = _check(miscoverage, values)
    return _order_stat(values, lower_rank(miscoverage, n))


def q_upper(miscoverage: float, values) -> float:
    """k-th smallest value, ``k = min(n, ceil((1 - m) (n + 1)))``."""
    n = _check(miscoverage, values)
    return _order_stat(values, upper_rank(miscoverage, n))


def interval(v: int, confidence: float, loo_scalars, residuals,
             cfg: CoverageConfig) -> UncertaintyRecord:
    """Clamped jackknife interval and its midpoint for evaluation node ``v``.

    ``loo_scalars[i]`` is the probability the leave-``i``-out model assigns
    to the class the base model predicts for ``v``.
    """
    f = np.asarray(loo_scalars, dtype=np.float64)
    r = np.asarray(residuals, dtype=np.float64)
    if f.size == 0:
        raise DomainError("no leave-one-out models")
    if f.shape != r.shape:
        raise DomainError("loo_scalars and residuals must align")
    m = cfg.miscoverage
    lo = min(max(q_lower(m, f - r), 0.0), 1.0)
    hi = min(max(q_upper(m, f + r), 0.0), 1.0)
    return UncertaintyRecord(int(v), lo, hi, (lo + hi) / 2.0, float(confidence))


def intervals(eval_ids, confidence, loo_matrix, residuals, cfg: CoverageConfig):
    """Vectorized :func:`interval` over columns of ``loo_matrix`` (LOO models x nodes)."""
    F = np.asarray(loo_matrix, dtype=np.float64)
    r = np.asarray(residuals, dtype=np.float64)[:, None]
    n = F.shape[0]
    if n == 0:
        raise DomainError("no leave-one-out models")
    m = cfg.miscoverage
    if not 0.0 < m < 0.5:
        raise DomainError(f"miscoverage {m} outside (0, 0.5)")
    lo = np.sort(F - r, axis=0)[lower_rank(m, n) - 1]
    hi = np.sort(F + r, axis=0)[upper_rank(m, n) - 1]
    lo = np.clip(lo, 0.0, 1.0)
    hi = np.clip(hi, 0.0, 1.0)
    mid = (lo + hi) / 2.0
    return [
        UncertaintyRecord(int(v), float(a), float(b), float(c), float(s))
        for v, a, b, c, s in zip(eval_ids, lo, hi, mid, confidence)
    ]


def save_records(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node_id", "lower", "upper", "uncertainty", "confidence"])
        for rec in records:
            writer.writerow([rec.node_id, repr(rec.lower), repr(rec.upper),
                             repr(rec.uncertainty), repr(rec.confidence)])


def load_records(path) -> list[UncertaintyRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        return [UncertaintyRecord(int(a), float(b), float(c), float(d), float(e))
                for a, b, c, d, e in reader]


def jackknife_records(obj, params, eval_ids, solver_cfg, coverage_cfg: CoverageConfig,
                      workers: int = 1, results=None):
    """Influence-approximated jackknife records for ``eval_ids``.

    Returns ``(records, results)`` where ``results`` are the per-training-node
    LOO estimates (computed unless supplied).
    """
    from .influence import loo_probabilities, loo_results

    params = obj.params(params)
    if results is None:
        results = loo_results(obj, params, solver_cfg, workers=workers)
    if not results:
        raise DomainError("empty training set")
    eval_ids = np.asarray(eval_ids, dtype=np.int64)
    base = obj.cache(params).probs[eval_ids]
    pred = np.argmax(base, axis=1)
    conf = base[np.arange(eval_ids.size), pred]
    F = loo_probabilities(obj, params, results, eval_ids, pred)
    r = np.array([res.residual for res in results])
    return intervals(eval_ids, conf, F, r, coverage_cfg), results
