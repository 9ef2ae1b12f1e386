import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from calikit.errors import DomainError, ParseError, ShapeError
from calikit.graph import (DatasetSplit, Graph, binarize, gen_synthetic, load_graph, load_split,
                           make_split, normalize_adjacency, save_graph, save_split)


def write_dataset(tmp_path, edges, features, labels):
    (tmp_path / "e.txt").write_text(edges)
    (tmp_path / "f.csv").write_text(features)
    (tmp_path / "l.txt").write_text(labels)
    return tmp_path / "e.txt", tmp_path / "f.csv", tmp_path / "l.txt"


def test_load_path_graph(tmp_path):
    files = write_dataset(tmp_path, "0 1\n1 2\n", "1,0\n0,1\n2,2\n", "0\n1\n0\n")
    g = load_graph(*files)
    assert g.num_nodes == 3
    assert g.num_edges == 2
    assert g.edges.tolist() == [[0, 1], [1, 2]]


def test_duplicate_reversed_edge_collapses(tmp_path):
    files = write_dataset(tmp_path, "0 1\n1 0\n", "1,0\n0,1\n", "0\n1\n")
    assert load_graph(*files).num_edges == 1


def test_feature_rows_are_l1_normalized(tmp_path):
    files = write_dataset(tmp_path, "0 1\n", "2,2\n0,0\n", "0\n1\n")
    g = load_graph(*files)
    np.testing.assert_allclose(g.features[0], [0.5, 0.5])
    np.testing.assert_array_equal(g.features[1], [0.0, 0.0])


@pytest.mark.parametrize(
    "edges, features, labels, error",
    [
        ("0 x\n", "1\n1\n", "0\n1\n", ParseError),
        ("0 1 2\n", "1\n1\n", "0\n1\n", ParseError),
        ("0 5\n", "1\n1\n", "0\n1\n", DomainError),
        ("0 1\n", "1\nfoo\n", "0\n1\n", ParseError),
        ("0 1\n", "1,2\n1\n", "0\n1\n", ParseError),
        ("0 1\n", "1\n1\n", "0\n", ShapeError),
        ("0 1\n", "1\n1\n", "0\n-1\n", ParseError),
    ],
)
def test_malformed_inputs(tmp_path, edges, features, labels, error):
    with pytest.raises(error):
        load_graph(*write_dataset(tmp_path, edges, features, labels))


def test_parse_error_reports_line(tmp_path):
    files = write_dataset(tmp_path, "0 1\n1 2\nbad\n", "1\n1\n1\n", "0\n1\n0\n")
    with pytest.raises(ParseError, match=":3"):
        load_graph(*files)


def dense(a):
    return a.toarray()


def test_normalized_adjacency_isolated_node():
    g = Graph.from_edge_list(1, [], np.ones((1, 1)), [0], class_count=2)
    assert dense(normalize_adjacency(g)).tolist() == [[1.0]]


def test_normalized_adjacency_single_edge():
    g = Graph.from_edge_list(2, [(0, 1)], np.ones((2, 1)), [0, 1])
    np.testing.assert_allclose(dense(normalize_adjacency(g)), np.full((2, 2), 0.5))


def test_normalized_adjacency_path():
    g = Graph.from_edge_list(3, [(0, 1), (1, 2)], np.ones((3, 1)), [0, 1, 0])
    s = dense(normalize_adjacency(g))
    assert s[0, 0] == pytest.approx(0.5)
    assert s[0, 1] == pytest.approx(1 / (np.sqrt(2) * np.sqrt(3)))
    assert s[1, 1] == pytest.approx(1 / 3)
    np.testing.assert_allclose(s, s.T)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 25), st.floats(0.0, 1.0), st.integers(0, 2**16))
def test_normalized_adjacency_properties(n, p, seed):
    rng = np.random.default_rng(seed)
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(iu.size) < p
    g = Graph.from_edge_list(n, np.stack([iu[keep], ju[keep]], 1), np.ones((n, 1)),
                             np.arange(n) % 2)
    s = dense(normalize_adjacency(g))
    np.testing.assert_allclose(s, s.T, atol=1e-15)
    assert np.all(np.diag(s) > 0)
    # the spectrum of the renormalized operator lies in (-1, 1]
    assert np.linalg.eigvalsh(s).max() <= 1 + 1e-12


def test_binarize():
    g = Graph.from_edge_list(4, [], np.ones((4, 1)), [0, 1, 2, 1])
    assert binarize(g, 2).labels.tolist() == [0, 0, 1, 0]
    g2 = Graph.from_edge_list(2, [], np.ones((2, 1)), [2, 2], class_count=3)
    assert binarize(g2, 2).labels.tolist() == [1, 1]
    with pytest.raises(DomainError):
        binarize(g, 5)


def test_split_cardinalities_and_determinism():
    g = gen_synthetic([50, 50], 0.1, 0.01, 4, 1.0, 0)
    a = make_split(g, g.labels, 20, 30, 30, seed=3)
    b = make_split(g, g.labels, 20, 30, 30, seed=3)
    assert (a.train_ids.size, a.val_ids.size, a.test_ids.size) == (40, 30, 30)
    assert not set(a.train_ids) & set(a.val_ids)
    assert not set(a.val_ids) & set(a.test_ids)
    assert not set(a.train_ids) & set(a.test_ids)
    for role in ("train", "val", "test"):
        np.testing.assert_array_equal(a.ids(role), b.ids(role))
    assert np.bincount(g.labels[a.train_ids]).tolist() == [20, 20]


def test_split_rejects_excess_label_rate():
    g = gen_synthetic([30, 30], 0.1, 0.01, 4, 1.0, 0)
    with pytest.raises(DomainError):
        make_split(g, g.labels, 40, 0, 0, seed=0)


def test_split_rejects_overlap():
    with pytest.raises(DomainError):
        DatasetSplit([0, 1], [1], [2])


def test_split_roundtrip(tmp_path):
    g = gen_synthetic([20, 20], 0.1, 0.01, 4, 1.0, 0)
    s = make_split(g, g.labels, 5, 10, 10, seed=1)
    save_split(s, tmp_path / "s.csv")
    back = load_split(tmp_path / "s.csv")
    for role in ("train", "val", "test"):
        np.testing.assert_array_equal(s.ids(role), back.ids(role))


def test_synthetic_minority_fraction_and_determinism():
    a = gen_synthetic([90, 10], 0.1, 0.01, 8, 2.0, 1)
    b = gen_synthetic([90, 10], 0.1, 0.01, 8, 2.0, 1)
    assert np.mean(a.labels == 1) == pytest.approx(0.1)
    np.testing.assert_array_equal(a.edges, b.edges)
    np.testing.assert_array_equal(a.features, b.features)


def test_synthetic_edgeless():
    assert gen_synthetic([5, 5], 0.0, 0.0, 3, 1.0, 0).num_edges == 0


@pytest.mark.parametrize("blocks", [[0, 10], [10], [-1, 5]])
def test_synthetic_rejects_bad_blocks(blocks):
    with pytest.raises(DomainError):
        gen_synthetic(blocks, 0.1, 0.01, 3, 1.0, 0)


def test_save_load_roundtrip(tmp_path):
    g = gen_synthetic([15, 5], 0.2, 0.05, 3, 1.0, 7)
    files = (tmp_path / "e.txt", tmp_path / "f.csv", tmp_path / "l.txt")
    save_graph(g, *files)
    back = load_graph(*files, normalize=False)
    np.testing.assert_array_equal(back.edges, g.edges)
    np.testing.assert_array_equal(back.features, g.features)
    np.testing.assert_array_equal(back.labels, g.labels)
