"""Two-layer GCN with hand-written reverse-mode gradients and Hessian-vector products.

The model is ``logits = S relu(S X W1) W2`` with ``S`` the normalized
adjacency.  Everything is dense numpy except ``S`` (scipy CSR).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .errors import CompatibilityError, DomainError, NumericError, ShapeError, TrainingError
from .rng import stream

PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = "calikit-params v1"


@dataclass
class ModelParams:
    """Flat parameter vector with matrix views ``W1`` (d x h) and ``W2`` (h x C)."""

    flat: np.ndarray
    d: int
    h: int
    c: int

    def __post_init__(self):
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.size,):
            raise ShapeError(f"flat vector has length {self.flat.shape}, expected {self.size}")

    @property
    def size(self) -> int:
        return self.d * self.h + self.h * self.c

    @property
    def W1(self) -> np.ndarray:
        return self.flat[: self.d * self.h].reshape(self.d, self.h)

    @property
    def W2(self) -> np.ndarray:
        return self.flat[self.d * self.h :].reshape(self.h, self.c)

    @classmethod
    def from_matrices(cls, W1, W2) -> "ModelParams":
        W1 = np.asarray(W1, dtype=np.float64)
        W2 = np.asarray(W2, dtype=np.float64)
        if W1.ndim != 2 or W2.ndim != 2 or W1.shape[1] != W2.shape[0]:
            raise ShapeError(f"incompatible weight shapes {W1.shape} and {W2.shape}")
        d, h = W1.shape
        return cls(np.concatenate([W1.ravel(), W2.ravel()]), d, h, W2.shape[1])

    @classmethod
    def glorot(cls, d: int, h: int, c: int, seed: int) -> "ModelParams":
        rng = stream(seed, "init")
        b1 = np.sqrt(6.0 / (d + h))
        b2 = np.sqrt(6.0 / (h + c))
        W1 = rng.uniform(-b1, b1, size=(d, h))
        W2 = rng.uniform(-b2, b2, size=(h, c))
        return cls.from_matrices(W1, W2)

    def with_flat(self, flat) -> "ModelParams":
        return ModelParams(np.array(flat, dtype=np.float64), self.d, self.h, self.c)

    def copy(self) -> "ModelParams":
        return self.with_flat(self.flat.copy())

    def save(self, path) -> None:
        header = f"{CHECKPOINT_MAGIC} {self.d} {self.h} {self.c}\n".encode("ascii")
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.flat.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ModelParams":
        raw = Path(path).read_bytes()
        nl = raw.find(b"\n")
        if nl < 0:
            raise CompatibilityError(f"{path}: missing checkpoint header")
        parts = raw[:nl].decode("ascii", errors="replace").split()
        if len(parts) != 5 or " ".join(parts[:2]) != CHECKPOINT_MAGIC:
            raise CompatibilityError(f"{path}: not a {CHECKPOINT_MAGIC} checkpoint")
        d, h, c = (int(x) for x in parts[2:])
        body = raw[nl + 1 :]
        expected = (d * h + h * c) * 8
        if len(body) != expected:
            raise CompatibilityError(f"{path}: expected {expected} payload bytes, found {len(body)}")
        flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
        return cls(flat, d, h, c)


@dataclass(frozen=True)
class PredictionTable:
    logits: np.ndarray
    probs: np.ndarray
    pred_label: np.ndarray
    confidence: np.ndarray

    @classmethod
    def from_logits(cls, logits) -> "PredictionTable":
        logits = np.asarray(logits, dtype=np.float64)
        probs = softmax(logits)
        # np.argmax returns the first maximal index
        pred = np.argmax(probs, axis=1)
        conf = probs[np.arange(probs.shape[0]), pred]
        return cls(logits, probs, pred, conf)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class TrainConfig:
    hidden_dim: int = 16
    learning_rate: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    max_epochs: int = 200
    patience: int = 30
    class_weights: Optional[np.ndarray] = None
    seed: int = 0
    label_smoothing: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise DomainError(f"dropout {self.dropout} outside [0, 1)")
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")
        if self.hidden_dim < 1 or self.max_epochs < 1 or self.patience < 1:
            raise DomainError("hidden_dim, max_epochs and patience must be positive")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be non-negative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise DomainError("label_smoothing must lie in [0, 1)")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise DomainError("class weights must be positive and finite")
            self.class_weights = w


def inverse_frequency_weights(labels, node_ids, class_count: int) -> np.ndarray:
    """Per-class weights proportional to 1 / class share in ``node_ids``, mean 1."""
    counts = np.bincount(np.asarray(labels)[node_ids], minlength=class_count).astype(float)
    if np.any(counts == 0):
        raise DomainError("every class needs at least one node to derive cost weights")
    w = counts.sum() / counts
    return w / w.mean()


# ------------------------------------------------------------------ model


@dataclass
class ForwardCache:
    z1: np.ndarray
    active: np.ndarray
    hidden: np.ndarray  # relu output after dropout
    mask: Optional[np.ndarray]
    b: np.ndarray  # S @ hidden
    logits: np.ndarray
    probs: np.ndarray


def _check_dims(params: ModelParams, adj, ax: np.ndarray) -> None:
    if ax.shape[1] != params.d:
        raise ShapeError(f"features have {ax.shape[1]} columns, model expects {params.d}")
    if adj.shape != (ax.shape[0], ax.shape[0]):
        raise ShapeError(f"adjacency shape {adj.shape} does not match {ax.shape[0]} nodes")


def _forward_cache(params: ModelParams, adj, ax: np.ndarray, mask=None) -> ForwardCache:
    z1 = ax @ params.W1
    active = z1 > 0
    hidden = np.where(active, z1, 0.0)
    if mask is not None:
        if mask.shape != hidden.shape:
            raise ShapeError(f"dropout mask shape {mask.shape} != {hidden.shape}")
        hidden = hidden * mask
    b = adj @ hidden
    logits = b @ params.W2
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in forward pass")
    return ForwardCache(z1, active, hidden, mask, b, logits, softmax(logits))


def forward(params: ModelParams, adj, features: np.ndarray, dropout_mask=None) -> PredictionTable:
    """Class scores ``S relu(S X W1) W2`` and their softmax summary."""
    features = np.asarray(features, dtype=np.float64)
    _check_dims(params, adj, features)
    cache = _forward_cache(params, adj, adj @ features, dropout_mask)
    return PredictionTable.from_logits(cache.logits)


def dropout_mask(rng: np.random.Generator, shape, rate: float) -> Optional[np.ndarray]:
    if rate <= 0:
        return None
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def cs_cross_entropy(preds, labels, node_set, class_weights, targets=None) -> float:
    """Mean class-weighted cross-entropy over ``node_set``.

    ``targets`` optionally replaces the one-hot labels with soft rows.
    """
    ids = np.asarray(node_set, dtype=np.int64)
    if ids.size == 0:
        raise DomainError("node_set is empty")
    probs = preds.probs if hasattr(preds, "probs") else np.asarray(preds)
    labels = np.asarray(labels, dtype=np.int64)
    w = np.asarray(class_weights, dtype=np.float64)[labels[ids]]
    logp = np.log(np.maximum(probs[ids], PROB_FLOOR))
    if targets is None:
        per = -logp[np.arange(ids.size), labels[ids]]
    else:
        per = -(np.asarray(targets)[ids] * logp).sum(axis=1)
    return float((w * per).sum() / ids.size)


def label_smooth(labels, epsilon: float, C: int) -> np.ndarray:
    """Soft targets ``(1 - eps) onehot + eps / C``."""
    if not 0.0 <= epsilon < 1.0:
        raise DomainError(f"epsilon {epsilon} outside [0, 1)")
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros((labels.size, C))
    onehot[np.arange(labels.size), labels] = 1.0
    if epsilon == 0.0:
        return onehot
    return (1.0 - epsilon) * onehot + epsilon / C


class GCNObjective:
    """Deterministic training objective for a fixed graph and training set.

    ``loss(theta) = (1/n) sum_i w_{y_i} CE_i(theta) + (wd/2) |theta|^2`` with
    ``n = len(train_ids)``.  ``node_weight`` scales individual CE terms without
    changing ``n``; a zero entry removes the node while keeping the
    normalization, which is the perturbation influence functions linearize.
    """

    def __init__(self, adj, features, labels, train_ids, class_weights, weight_decay=0.0,
                 d=None, h=None, c=None, targets=None, node_weight=None):
        self.adj = adj.tocsr() if sp.issparse(adj) else sp.csr_matrix(adj)
        self.features = np.asarray(features, dtype=np.float64)
        self.ax = np.asarray(self.adj @ self.features)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.train_ids = np.asarray(train_ids, dtype=np.int64)
        if self.train_ids.size == 0:
            raise DomainError("training set is empty")
        self.n = self.train_ids.size
        self.class_weights = np.asarray(class_weights, dtype=np.float64)
        self.weight_decay = float(weight_decay)
        self.shape = (d, h, c)
        c = c if c is not None else self.class_weights.size
        if targets is None:
            targets = label_smooth(self.labels, 0.0, c)
        self.targets = np.asarray(targets, dtype=np.float64)
        self.row_weight = self.class_weights[self.labels[self.train_ids]].copy()
        if node_weight is not None:
            self.row_weight = self.row_weight * np.asarray(node_weight, dtype=np.float64)
        self._position = {int(v): k for k, v in enumerate(self.train_ids)}

    @classmethod
    def for_graph(cls, g, adj, split_train_ids, class_weights, weight_decay, **kw):
        return cls(adj, g.features, g.labels, split_train_ids, class_weights, weight_decay, **kw)

    def params(self, theta) -> ModelParams:
        if isinstance(theta, ModelParams):
            return theta
        d, h, c = self.shape
        return ModelParams(theta, d, h, c)

    def position(self, node: int) -> int:
        try:
            return self._position[int(node)]
        except KeyError:
            raise DomainError(f"node {node} is not a training node") from None

    def cache(self, theta, mask=None) -> ForwardCache:
        p = self.params(theta)
        _check_dims(p, self.adj, self.ax)
        return _forward_cache(p, self.adj, self.ax, mask)

    # ---- loss pieces

    def _coef(self, probs: np.ndarray) -> np.ndarray:
        """Target weights with clamped probabilities zeroed (their log is constant)."""
        coef = self.targets[self.train_ids].copy()
        coef[probs[self.train_ids] < PROB_FLOOR] = 0.0
        return coef

    def data_loss(self, cache: ForwardCache) -> float:
        logp = np.log(np.maximum(cache.probs[self.train_ids], PROB_FLOOR))
        per = -(self.targets[self.train_ids] * logp).sum(axis=1)
        return float((self.row_weight * per).sum() / self.n)

    def loss(self, theta, mask=None) -> float:
        p = self.params(theta)
        cache = self.cache(p, mask)
        return self.data_loss(cache) + 0.5 * self.weight_decay * float(p.flat @ p.flat)

    def logit_grad(self, cache: ForwardCache) -> np.ndarray:
        """d(data loss)/d(logits), zero outside the training rows."""
        probs = cache.probs[self.train_ids]
        coef = self._coef(cache.probs)
        rows = probs * coef.sum(axis=1, keepdims=True) - coef
        g_out = np.zeros_like(cache.probs)
        g_out[self.train_ids] = rows * (self.row_weight / self.n)[:, None]
        return g_out

    def backward(self, theta, cache: ForwardCache, g_out: np.ndarray) -> np.ndarray:
        """Pull a logit-space gradient back to a flat parameter gradient."""
        p = self.params(theta)
        dW2 = cache.b.T @ g_out
        g_hidden = self.adj @ (g_out @ p.W2.T)
        if cache.mask is not None:
            g_hidden = g_hidden * cache.mask
        g_z1 = np.where(cache.active, g_hidden, 0.0)
        dW1 = self.ax.T @ g_z1
        return np.concatenate([dW1.ravel(), dW2.ravel()])

    def grad(self, theta, mask=None) -> np.ndarray:
        p = self.params(theta)
        cache = self.cache(p, mask)
        out = self.backward(p, cache, self.logit_grad(cache))
        return out + self.weight_decay * p.flat

    def per_node_grad(self, theta, node: int) -> np.ndarray:
        """Gradient of the single weighted CE term of training node ``node``."""
        self.position(node)
        p = self.params(theta)
        cache = self.cache(p)
        probs = cache.probs[node]
        coef = self.targets[node].copy()
        coef[probs < PROB_FLOOR] = 0.0
        row = self.class_weights[self.labels[node]] * (probs * coef.sum() - coef)
        return self._single_row_backward(p, cache, node, row)

    def per_node_grads(self, theta) -> np.ndarray:
        """Stacked per-node gradients, one row per training node in ``train_ids`` order."""
        p = self.params(theta)
        cache = self.cache(p)
        out = np.empty((self.n, p.size))
        for k, node in enumerate(self.train_ids):
            probs = cache.probs[node]
            coef = self.targets[node].copy()
            coef[probs < PROB_FLOOR] = 0.0
            row = self.class_weights[self.labels[node]] * (probs * coef.sum() - coef)
            out[k] = self._single_row_backward(p, cache, node, row)
        return out

    def _single_row_backward(self, p: ModelParams, cache, node, row) -> np.ndarray:
        dW2 = np.outer(cache.b[node], row)
        lo, hi = self.adj.indptr[node], self.adj.indptr[node + 1]
        nbrs = self.adj.indices[lo:hi]
        # S is symmetric, so column ``node`` equals row ``node``
        g_hidden = np.outer(self.adj.data[lo:hi], p.W2 @ row)
        g_z1 = np.where(cache.active[nbrs], g_hidden, 0.0)
        dW1 = self.ax[nbrs].T @ g_z1
        return np.concatenate([dW1.ravel(), dW2.ravel()])

    def hvp(self, theta, v) -> np.ndarray:
        """Exact Hessian-vector product of ``loss`` (R-operator, no dropout).

        ReLU contributes no curvature away from its kink, so the product is
        exact wherever no pre-activation sits at zero.
        """
        p = self.params(theta)
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (p.size,):
            raise ShapeError(f"direction has shape {v.shape}, expected ({p.size},)")
        V = p.with_flat(v)
        cache = self.cache(p)
        g_out = self.logit_grad(cache)

        r_hidden = np.where(cache.active, self.ax @ V.W1, 0.0)
        r_b = self.adj @ r_hidden
        r_logits = r_b @ p.W2 + cache.b @ V.W2
        probs = cache.probs
        r_probs = probs * (r_logits - (probs * r_logits).sum(axis=1, keepdims=True))
        coef = self._coef(probs)
        r_g_out = np.zeros_like(probs)
        r_g_out[self.train_ids] = (
            r_probs[self.train_ids]
            * (coef.sum(axis=1) * self.row_weight / self.n)[:, None]
        )

        r_dW2 = r_b.T @ g_out + cache.b.T @ r_g_out
        r_g_b = r_g_out @ p.W2.T + g_out @ V.W2.T
        r_g_z1 = np.where(cache.active, self.adj @ r_g_b, 0.0)
        r_dW1 = self.ax.T @ r_g_z1
        out = np.concatenate([r_dW1.ravel(), r_dW2.ravel()]) + self.weight_decay * v
        if not np.all(np.isfinite(out)):
            raise NumericError("non-finite Hessian-vector product")
        return out

    def hessian(self, theta) -> np.ndarray:
        """Dense Hessian assembled column by column from ``hvp``."""
        p = self.params(theta)
        eye = np.eye(p.size)
        H = np.column_stack([self.hvp(p, eye[:, j]) for j in range(p.size)])
        return 0.5 * (H + H.T)


def grad(params: ModelParams, adj, features, labels, node_set, class_weights,
         weight_decay: float = 0.0) -> np.ndarray:
    """Gradient of the cost-sensitive CE over ``node_set`` plus ``weight_decay * theta``."""
    obj = GCNObjective(adj, features, labels, node_set, class_weights, weight_decay,
                       params.d, params.h, params.c)
    return obj.grad(params)


# ------------------------------------------------------------------ training


@dataclass
class EpochRecord:
    epoch: int
    loss_total: float
    loss_ce: float
    loss_eice: float
    val_loss: float
    extra: dict = field(default_factory=dict)


class _Adam:
    def __init__(self, size, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta, g):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# hook(epoch, params, cache) -> (extra_loss, extra_logit_grad or None, info dict)
EpochHook = Callable[[int, ModelParams, ForwardCache], tuple]

CONVERGENCE_TOL = 1e-5
CONVERGENCE_WINDOW = 10


def fit(g, split, cfg: TrainConfig, adj=None, hook: Optional[EpochHook] = None,
        blend: float = 0.0, on_epoch=None) -> tuple[ModelParams, list[EpochRecord]]:
    """Adam training loop shared by the plain and jointly regularized trainers.

    The per-epoch objective is ``(1 - blend) * CE + blend * extra`` where
    ``extra`` and its logit gradient come from ``hook``.  Training stops on
    validation patience, on ``|dL| < 1e-5`` for 10 epochs, or at
    ``max_epochs``; the parameters with the best validation CE are returned.
    """
    if adj is None:
        from .graph import normalize_adjacency

        adj = normalize_adjacency(g)
    weights = cfg.class_weights
    if weights is None:
        weights = inverse_frequency_weights(g.labels, split.train_ids, g.class_count)
    targets = None
    if cfg.label_smoothing > 0:
        targets = label_smooth(g.labels, cfg.label_smoothing, g.class_count)
    obj = GCNObjective(adj, g.features, g.labels, split.train_ids, weights, cfg.weight_decay,
                       g.feature_dim, cfg.hidden_dim, g.class_count, targets=targets)
    val_ids = split.val_ids if split.val_ids.size else split.train_ids

    params = ModelParams.glorot(g.feature_dim, cfg.hidden_dim, g.class_count, cfg.seed)
    drop_rng = stream(cfg.seed, "dropout")
    opt = _Adam(params.size, cfg.learning_rate)

    best = params.copy()
    best_val = np.inf
    stale = 0
    calm = 0
    prev_total = None
    history: list[EpochRecord] = []
    for epoch in range(1, cfg.max_epochs + 1):
        mask = dropout_mask(drop_rng, (g.num_nodes, cfg.hidden_dim), cfg.dropout)
        cache = obj.cache(params, mask)
        ce = obj.data_loss(cache)
        g_out = obj.logit_grad(cache)
        extra = 0.0
        info = {}
        if hook is not None and blend > 0:
            extra, extra_g_out, info = hook(epoch, params, cache)
            g_out = (1.0 - blend) * g_out
            if extra_g_out is not None:
                g_out = g_out + blend * extra_g_out
            total = (1.0 - blend) * ce + blend * extra
        else:
            total = ce
        if not np.isfinite(total):
            raise TrainingError(epoch, "non-finite training loss")
        step = obj.backward(params, cache, g_out) + cfg.weight_decay * params.flat
        if not np.all(np.isfinite(step)):
            raise TrainingError(epoch, "non-finite gradient")

        eval_cache = obj.cache(params)
        val_loss = cs_cross_entropy(eval_cache.probs, g.labels, val_ids, weights)
        record = EpochRecord(epoch, total, ce, extra, val_loss, info)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record, params, eval_cache)

        if val_loss < best_val:
            best_val = val_loss
            best = params.copy()
            stale = 0
        else:
            stale += 1
        if prev_total is not None and abs(total - prev_total) < CONVERGENCE_TOL:
            calm += 1
        else:
            calm = 0
        prev_total = total
        if stale >= cfg.patience or calm >= CONVERGENCE_WINDOW:
            break
        params = params.with_flat(opt.step(params.flat, step))
    return best, history


def train(g, split, cfg: TrainConfig, adj=None, on_epoch=None) -> ModelParams:
    """Train the cost-sensitive GCN; deterministic for a fixed ``cfg.seed``."""
    params, _ = fit(g, split, cfg, adj=adj, on_epoch=on_epoch)
    return params
