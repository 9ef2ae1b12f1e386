from dataclasses import replace

import numpy as np
import pytest

from calikit.gcn import GCNObjective, ModelParams, inverse_frequency_weights
from calikit.graph import gen_synthetic, l1_normalize_rows, make_split, normalize_adjacency


def small_problem(seed=0, blocks=(20, 10), dim=13, hidden=4, lr_c=7, val=16, test=0,
                  weight_decay=0.01, shift=1.0):
    """30-node, 2-class synthetic graph with a p=60 objective when hidden=4."""
    g = gen_synthetic(list(blocks), 0.3, 0.05, dim, shift, seed)
    g = replace(g, features=l1_normalize_rows(g.features))
    adj = normalize_adjacency(g)
    split = make_split(g, g.labels, lr_c, val, test, seed)
    w = inverse_frequency_weights(g.labels, split.train_ids, g.class_count)
    obj = GCNObjective(adj, g.features, g.labels, split.train_ids, w, weight_decay,
                       g.feature_dim, hidden, g.class_count)
    theta = ModelParams.glorot(g.feature_dim, hidden, g.class_count, seed)
    return g, adj, split, w, obj, theta


@pytest.fixture
def problem():
    return small_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
