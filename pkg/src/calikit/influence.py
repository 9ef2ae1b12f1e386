"""Leave-one-out parameter estimates from first-order influence functions.

The objective is anything exposing the :class:`~calikit.gcn.GCNObjective`
surface (``n``, ``train_ids``, ``per_node_grad``, ``hvp``, ``params``).
"""

from __future__ import annotations

import csv
import hashlib
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
import scipy.optimize as so

from .errors import CompatibilityError, ConvergenceError, DomainError, NumericError
from .gcn import ModelParams, softmax

SIGNS = {"classical": 1.0, "reversed": -1.0}


@dataclass
class SolverConfig:
    damping: float = 0.01
    cg_tol: float = 1e-6
    cg_max_iter: int = 200
    explicit_hessian_threshold: int = 2000
    # "classical": theta_{-i} = theta + H^{-1} g_i / n; "reversed" flips the sign
    sign: str = "classical"

    def __post_init__(self):
        if self.damping < 0:
            raise DomainError("damping must be non-negative")
        if self.cg_tol <= 0:
            raise DomainError("cg_tol must be positive")
        if self.cg_max_iter < 1:
            raise DomainError("cg_max_iter must be positive")
        if self.sign not in SIGNS:
            raise DomainError(f"sign must be one of {sorted(SIGNS)}")


@dataclass(frozen=True)
class LooResult:
    node_id: int
    delta: np.ndarray
    residual: float


def fit_stationary(obj, theta0, gtol: float = 1e-10) -> np.ndarray:
    """Minimize ``obj.loss`` to a near-stationary point.

    Influence estimates linearize around an optimum, which a fixed budget of
    Adam steps does not reach.  Quasi-Newton iterations are followed by a
    trust-region Newton polish that uses the exact Hessian-vector product.
    """
    x0 = np.asarray(obj.params(theta0).flat, dtype=np.float64)
    coarse = so.minimize(obj.loss, x0, jac=obj.grad, method="L-BFGS-B",
                         options={"maxiter": 20000, "gtol": 1e-12, "ftol": 1e-16, "maxcor": 50})
    fine = so.minimize(obj.loss, coarse.x, jac=obj.grad, hessp=obj.hvp, method="trust-ncg",
                       options={"gtol": gtol, "maxiter": 2000})
    return fine.x if fine.fun <= coarse.fun else coarse.x


def per_node_grad(obj, params, i: int) -> np.ndarray:
    return obj.per_node_grad(params, i)


def hvp(obj, params, v, damping: float = 0.0) -> np.ndarray:
    """``(H + damping I) v`` for the mean training loss (weight decay included)."""
    v = np.asarray(v, dtype=np.float64)
    out = obj.hvp(params, v)
    if damping:
        out = out + damping * v
    return out


def conjugate_gradient(apply, b, tol=1e-6, max_iter=200):
    """Solve ``A x = b`` for symmetric ``A`` given as a matvec; returns ``(x, rel_residual)``."""
    b = np.asarray(b, dtype=np.float64)
    b_norm = np.linalg.norm(b)
    x = np.zeros_like(b)
    if b_norm == 0:
        return x, 0.0
    r = b.copy()
    d = r.copy()
    rr = r @ r
    rel = 1.0
    for it in range(1, max_iter + 1):
        Ad = apply(d)
        curv = d @ Ad
        if curv <= 0:
            raise ConvergenceError(rel, it)
        step = rr / curv
        x += step * d
        r -= step * Ad
        rr_new = r @ r
        rel = np.sqrt(rr_new) / b_norm
        if rel <= tol:
            return x, rel
        d = r + (rr_new / rr) * d
        rr = rr_new
    raise ConvergenceError(rel, max_iter)


class HessianSolver:
    """Repeated solves against ``H + damping I`` at fixed parameters.

    Small models assemble and factor the dense matrix once; larger ones run
    conjugate gradient with Hessian-vector products.  Every returned solution
    is checked against the relative-residual tolerance.

    Dense solves are serialized: the bundled LAPACK triangular solve returned
    corrupted results when called from several threads at once.
    """

    def __init__(self, obj, params, cfg: SolverConfig, explicit=None):
        self.obj = obj
        self.params = obj.params(params)
        self.cfg = cfg
        p = self.params.size
        self.explicit = p <= cfg.explicit_hessian_threshold if explicit is None else explicit
        if self.explicit:
            H = obj.hessian(self.params) + cfg.damping * np.eye(p)
            if not np.all(np.isfinite(H)):
                raise NumericError("non-finite Hessian")
            self.matrix = H
            self.lu = sla.lu_factor(H, check_finite=False)
        self._lock = threading.Lock()

    def apply(self, v) -> np.ndarray:
        if self.explicit:
            return self.matrix @ v
        return hvp(self.obj, self.params, v, self.cfg.damping)

    def _check(self, X, B) -> None:
        norms = np.linalg.norm(B, axis=1)
        live = norms > 0
        rel = np.linalg.norm(X[live] @ self.matrix.T - B[live], axis=1) / norms[live]
        if rel.size and (not np.all(np.isfinite(rel)) or rel.max() > self.cfg.cg_tol):
            raise ConvergenceError(float(np.nanmax(rel)) if np.any(np.isfinite(rel))
                                   else float("inf"), 0)

    def solve_many(self, B) -> np.ndarray:
        """Solve for every row of ``B``; returns the solutions as rows."""
        B = np.atleast_2d(np.asarray(B, dtype=np.float64))
        if not self.explicit:
            return np.array([self.solve(b) for b in B]).reshape(B.shape)
        with self._lock:
            X = sla.lu_solve(self.lu, B.T, check_finite=False).T
        X[~np.any(B, axis=1)] = 0.0
        self._check(X, B)
        return X

    def solve(self, b) -> np.ndarray:
        b = np.asarray(b, dtype=np.float64)
        if not np.any(b):
            return np.zeros_like(b)
        if self.explicit:
            return self.solve_many(b[None, :])[0]
        x, _ = conjugate_gradient(self.apply, b, self.cfg.cg_tol, self.cfg.cg_max_iter)
        return x


def solve_hinv(obj, params, b, cfg: SolverConfig, explicit=None) -> np.ndarray:
    return HessianSolver(obj, params, cfg, explicit).solve(b)


def loo_delta(obj, params, i: int, cfg: SolverConfig, solver: HessianSolver | None = None):
    """Estimated ``theta_{-i} - theta`` for removing training node ``i``."""
    solver = solver or HessianSolver(obj, params, cfg)
    g = obj.per_node_grad(params, i)
    return SIGNS[cfg.sign] * solver.solve(g) / obj.n


def residual(obj, params_minus_i, i: int) -> float:
    """``1 - p(true class of i)`` under the leave-``i``-out parameters."""
    obj.position(i)
    probs = obj.cache(params_minus_i).probs[i]
    return float(np.clip(1.0 - probs[obj.labels[i]], 0.0, 1.0))


def loo_results(obj, params, cfg: SolverConfig, workers: int = 1) -> list[LooResult]:
    """Influence deltas and residuals for every training node, in ``train_ids`` order.

    Each node is an independent task over read-only shared state, so the
    output does not depend on ``workers``.
    """
    params = obj.params(params)
    solver = HessianSolver(obj, params, cfg)
    grads = obj.per_node_grads(params)
    scale = SIGNS[cfg.sign] / obj.n
    # one batched dense solve; the CG path solves inside the per-node tasks
    deltas = scale * solver.solve_many(grads) if solver.explicit else None

    def one(k):
        node = int(obj.train_ids[k])
        delta = deltas[k] if deltas is not None else scale * solver.solve(grads[k])
        if not np.all(np.isfinite(delta)):
            raise NumericError(f"non-finite LOO delta for node {node}")
        r = residual(obj, params.flat + delta, node)
        return LooResult(node, delta, r)

    if workers <= 1:
        return [one(k) for k in range(obj.n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(obj.n)))


def loo_probabilities(obj, params, results, eval_ids, classes) -> np.ndarray:
    """``out[k, j]`` = probability LOO model ``k`` gives ``classes[j]`` at ``eval_ids[j]``."""
    params = obj.params(params)
    eval_ids = np.asarray(eval_ids, dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    out = np.empty((len(results), eval_ids.size))
    for k, res in enumerate(results):
        logits = obj.cache(params.flat + res.delta).logits[eval_ids]
        out[k] = softmax(logits)[np.arange(eval_ids.size), classes]
    return out


# ------------------------------------------------------------------ cache files


def content_key(obj, params, cfg: SolverConfig) -> str:
    """Hash of everything a LOO result set depends on."""
    params = obj.params(params)
    h = hashlib.sha256()
    for arr in (params.flat, obj.adj.data, obj.adj.indices, obj.adj.indptr, obj.features,
                obj.labels, obj.train_ids, obj.class_weights, obj.targets, obj.row_weight):
        h.update(np.ascontiguousarray(arr).tobytes())
    h.update(repr((params.d, params.h, params.c, obj.weight_decay, cfg.damping, cfg.sign)).encode())
    return h.hexdigest()


def save_loo_cache(results, stem, key: str) -> None:
    stem = Path(stem)
    with open(stem.with_suffix(".csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node_id", "residual"])
        for res in results:
            writer.writerow([res.node_id, repr(float(res.residual))])
    p = results[0].delta.size if results else 0
    with open(stem.with_suffix(".bin"), "wb") as fh:
        fh.write(f"calikit-loo v1 {len(results)} {p} {key}\n".encode("ascii"))
        for res in results:
            fh.write(np.asarray(res.delta, dtype="<f8").tobytes())


def load_loo_cache(stem, key: str) -> list[LooResult]:
    stem = Path(stem)
    raw = stem.with_suffix(".bin").read_bytes()
    nl = raw.find(b"\n")
    parts = raw[:nl].decode("ascii", errors="replace").split()
    if len(parts) != 5 or parts[:2] != ["calikit-loo", "v1"]:
        raise CompatibilityError(f"{stem}.bin: not a LOO cache")
    if parts[4] != key:
        raise CompatibilityError(f"{stem}.bin: stale cache (content key mismatch)")
    n, p = int(parts[2]), int(parts[3])
    deltas = np.frombuffer(raw[nl + 1 :], dtype="<f8").astype(np.float64)
    if deltas.size != n * p:
        raise CompatibilityError(f"{stem}.bin: truncated payload")
    deltas = deltas.reshape(n, p)
    rows = []
    with open(stem.with_suffix(".csv"), encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        rows = [(int(a), float(b)) for a, b in reader]
    if len(rows) != n:
        raise CompatibilityError(f"{stem}.csv: expected {n} rows, found {len(rows)}")
    return [LooResult(node, deltas[k].copy(), r) for k, (node, r) in enumerate(rows)]
