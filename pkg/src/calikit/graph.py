"""Graph data model, file formats, adjacency normalization and splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, ParseError, ShapeError
from .rng import stream

ROLES = ("train", "val", "test")


@dataclass(frozen=True)
class Graph:
    """Undirected attributed graph.

    ``edges`` is an ``(E, 2)`` int array holding every undirected edge once,
    as ``(u, v)`` with ``u < v``, sorted lexicographically.
    """

    num_nodes: int
    edges: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2 or feats.shape[0] != self.num_nodes:
            raise ShapeError(
                f"feature matrix has shape {feats.shape}, expected {self.num_nodes} rows"
            )
        if labels.shape != (self.num_nodes,):
            raise ShapeError(f"expected {self.num_nodes} labels, got {labels.shape[0]}")
        if self.class_count < 2:
            raise DomainError("class_count must be at least 2")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DomainError(f"labels must lie in [0, {self.class_count})")
        if edges.size:
            if edges.min() < 0 or edges.max() >= self.num_nodes:
                raise DomainError("edge endpoint out of range")
            if np.any(edges[:, 0] == edges[:, 1]):
                raise DomainError("self-loops are not stored")
        for arr in (edges, feats, labels):
            arr.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_edge_list(cls, num_nodes, edges, features, labels, class_count=None):
        labels = np.asarray(labels, dtype=np.int64)
        if class_count is None:
            class_count = max(int(labels.max()) + 1 if labels.size else 0, 2)
        return cls(num_nodes, canonical_edges(edges), features, labels, class_count)

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency without self-loops."""
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        data = np.ones(rows.shape[0])
        return sp.csr_matrix((data, (rows, cols)), shape=(self.num_nodes, self.num_nodes))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def canonical_edges(edges) -> np.ndarray:
    """Deduplicate undirected pairs into sorted ``(min, max)`` rows."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    e = np.sort(e, axis=1)
    e = e[e[:, 0] != e[:, 1]]
    return np.unique(e, axis=0)


def l1_normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.abs(x).sum(axis=1, keepdims=True)
    out = np.zeros_like(x)
    np.divide(x, norms, out=out, where=norms > 0)
    return out


def normalize_adjacency(g: Graph) -> sp.csr_matrix:
    """D^{-1/2} (A + I) D^{-1/2} in CSR form, with D the degree of A + I."""
    a = g.adjacency() + sp.identity(g.num_nodes, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    d_inv_sqrt = sp.diags(1.0 / np.sqrt(deg))
    out = (d_inv_sqrt @ a @ d_inv_sqrt).tocsr()
    out.sort_indices()
    return out


def binarize(g: Graph, minority_class: int) -> Graph:
    """Relabel ``minority_class`` as 1 and every other class as 0."""
    if not 0 <= minority_class < g.class_count:
        raise DomainError(f"minority class {minority_class} outside [0, {g.class_count})")
    hit = g.labels == minority_class
    if not hit.any():
        raise DomainError(f"minority class {minority_class} has no nodes")
    return replace(g, labels=hit.astype(np.int64), class_count=2)


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: np.ndarray
    val_ids: np.ndarray
    test_ids: np.ndarray
    label_rate_per_class: int = 0

    def __post_init__(self):
        for name in ("train_ids", "val_ids", "test_ids"):
            arr = np.sort(np.asarray(getattr(self, name), dtype=np.int64))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        tr, va, te = (set(a.tolist()) for a in (self.train_ids, self.val_ids, self.test_ids))
        if tr & va or tr & te or va & te:
            raise DomainError("split sets must be pairwise disjoint")

    def ids(self, role: str) -> np.ndarray:
        return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[role]

    def validate(self, g: Graph) -> None:
        for role in ROLES:
            ids = self.ids(role)
            if ids.size and (ids.min() < 0 or ids.max() >= g.num_nodes):
                raise DomainError(f"{role} ids out of range")
        missing = set(range(g.class_count)) - set(g.labels[self.train_ids].tolist())
        if missing:
            raise DomainError(f"training set has no node of class(es) {sorted(missing)}")


def make_split(
    g: Graph,
    original_labels: Sequence[int],
    lr_c: int,
    val_size: int,
    test_size: int,
    seed: int,
) -> DatasetSplit:
    """Sample ``lr_c`` training nodes per original class, then val/test from the rest."""
    original = np.asarray(original_labels, dtype=np.int64)
    if original.shape != (g.num_nodes,):
        raise ShapeError("original_labels must have one entry per node")
    rng = stream(seed, "split")
    train = []
    for c in np.unique(original):
        members = np.flatnonzero(original == c)
        if members.size < lr_c:
            raise DomainError(
                f"class {c} has {members.size} nodes, fewer than the {lr_c} requested"
            )
        train.append(rng.choice(members, size=lr_c, replace=False))
    train = np.concatenate(train) if train else np.zeros(0, dtype=np.int64)
    rest = np.setdiff1d(np.arange(g.num_nodes), train)
    if rest.size < val_size + test_size:
        raise DomainError(
            f"{rest.size} unlabeled nodes cannot supply val={val_size} and test={test_size}"
        )
    picked = rng.permutation(rest)[: val_size + test_size]
    split = DatasetSplit(train, picked[:val_size], picked[val_size:], lr_c)
    split.validate(g)
    return split


def gen_synthetic(
    n_per_block: Sequence[int],
    p_in: float,
    p_out: float,
    feat_dim: int,
    feat_shift: float,
    seed: int,
) -> Graph:
    """Stochastic block model with Gaussian features, one class per block.

    Block ``k`` has feature mean ``feat_shift * u_k`` for its own random unit
    vector ``u_k``, plus unit isotropic noise.  Features are returned raw; file
    ingestion applies the L1 row normalization.
    """
    sizes = [int(n) for n in n_per_block]
    if len(sizes) < 2:
        raise DomainError("need at least two blocks")
    if any(n <= 0 for n in sizes):
        raise DomainError(f"every block needs at least one node, got {sizes}")
    for name, p in (("p_in", p_in), ("p_out", p_out)):
        if not 0.0 <= p <= 1.0:
            raise DomainError(f"{name}={p} is not a probability")
    if feat_dim < 1:
        raise DomainError("feat_dim must be positive")
    rng = stream(seed, "synthetic")
    n = sum(sizes)
    labels = np.repeat(np.arange(len(sizes)), sizes)

    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.shape[0]) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    directions = rng.standard_normal((len(sizes), feat_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = feat_shift * directions
    features = means[labels] + rng.standard_normal((n, feat_dim))
    return Graph(n, canonical_edges(edges), features, labels, len(sizes))


# ---------------------------------------------------------------- file I/O


def _lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for no, raw in enumerate(fh, start=1):
            yield no, raw.strip()


def load_graph(edge_file, feature_file, label_file, normalize: bool = True) -> Graph:
    edge_file, feature_file, label_file = map(Path, (edge_file, feature_file, label_file))

    labels = []
    for no, line in _lines(label_file):
        if not line:
            continue
        try:
            value = int(line)
        except ValueError:
            raise ParseError(label_file, no, f"expected an integer class, got {line!r}") from None
        if value < 0:
            raise ParseError(label_file, no, "class index must be non-negative")
        labels.append(value)

    rows = []
    with open(feature_file, encoding="utf-8", newline="") as fh:
        for no, rec in enumerate(csv.reader(fh), start=1):
            if not rec:
                continue
            try:
                rows.append([float(x) for x in rec])
            except ValueError:
                raise ParseError(feature_file, no, "non-numeric feature value") from None
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(feature_file, no, "inconsistent column count")
    n = len(rows)
    if n != len(labels):
        raise ShapeError(f"{n} feature rows but {len(labels)} labels")

    edges = []
    for no, line in _lines(edge_file):
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ParseError(edge_file, no, "expected two node ids")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise ParseError(edge_file, no, "node ids must be integers") from None
        if not (0 <= u < n and 0 <= v < n):
            raise DomainError(f"{edge_file}:{no}: node id out of range [0, {n})")
        edges.append((u, v))

    features = np.array(rows, dtype=np.float64).reshape(n, -1)
    if normalize:
        features = l1_normalize_rows(features)
    labels = np.array(labels, dtype=np.int64)
    return Graph.from_edge_list(n, edges, features, labels)


def save_graph(g: Graph, edge_file, feature_file, label_file) -> None:
    with open(edge_file, "w", encoding="utf-8") as fh:
        for u, v in g.edges:
            fh.write(f"{u} {v}\n")
    with open(feature_file, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in g.features:
            writer.writerow([repr(float(x)) for x in row])
    with open(label_file, "w", encoding="utf-8") as fh:
        for y in g.labels:
            fh.write(f"{int(y)}\n")


def save_split(split: DatasetSplit, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["node_id", "role"])
        for role in ROLES:
            for i in split.ids(role):
                writer.writerow([int(i), role])


def load_split(path) -> DatasetSplit:
    groups = {role: [] for role in ROLES}
    with open(path, encoding="utf-8", newline="") as fh:
        for no, rec in enumerate(csv.reader(fh), start=1):
            if not rec or rec == ["node_id", "role"]:
                continue
            if len(rec) != 2 or rec[1] not in groups:
                raise ParseError(path, no, f"expected 'node_id,role', got {rec}")
            try:
                groups[rec[1]].append(int(rec[0]))
            except ValueError:
                raise ParseError(path, no, "node id must be an integer") from None
    return DatasetSplit(groups["train"], groups["val"], groups["test"])
