from dataclasses import replace

import numpy as np
import pytest

from calikit.calirare import (CaliRareConfig, _FrozenTargets, eice_regularizer, evaluate,
                              joint_loss, save_log, temperature_scale, train_calirare,
                              train_label_smoothing)
from calikit.errors import DomainError
from calikit.gcn import GCNObjective, TrainConfig, fit, softmax, train
from calikit.graph import gen_synthetic, make_split, normalize_adjacency
from calikit.influence import SolverConfig
from calikit.uncertainty import CoverageConfig

from conftest import small_problem


@pytest.fixture(scope="module")
def dataset():
    g = gen_synthetic([60, 20], 0.15, 0.02, 6, 1.5, 0)
    split = make_split(g, g.labels, 8, 20, 30, seed=0)
    return g, split


def test_joint_loss_endpoints_and_mix():
    assert joint_loss(0.6, 0.2, 0.0) == 0.6
    assert joint_loss(0.6, 0.2, 1.0) == 0.2
    assert joint_loss(0.6, 0.2, 0.1) == pytest.approx(0.56)
    with pytest.raises(DomainError):
        joint_loss(0.6, 0.2, 1.5)


@pytest.mark.parametrize("kwargs", [{"lam": -0.1}, {"lam": 1.5}, {"refresh_every": 0}])
def test_config_validation(kwargs):
    with pytest.raises(DomainError):
        CaliRareConfig(**kwargs)


def test_lambda_zero_is_bitwise_baseline(dataset):
    g, split = dataset
    tc = TrainConfig(seed=3, max_epochs=60)
    base = train(g, split, tc)
    joint, _, rows, refreshed = train_calirare(g, split, CaliRareConfig(lam=0.0, train=tc),
                                               report=False)
    assert joint.flat.tobytes() == base.flat.tobytes()
    assert refreshed == []
    assert all(r[3] == 0.0 for r in rows)


def test_regularized_training_refresh_schedule(dataset, tmp_path):
    g, split = dataset
    cfg = CaliRareConfig(lam=0.3, refresh_every=4, train=TrainConfig(seed=1, max_epochs=12))
    params, report, rows, refreshed = train_calirare(g, split, cfg)
    assert refreshed == [e for e in range(1, len(rows) + 1) if (e - 1) % 4 == 0]
    assert all(np.isfinite(r[1]) and r[3] > 0 for r in rows)
    assert report.eice is not None and 0 <= report.eice <= 1
    save_log(rows, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,loss_total,loss_ce,loss_eice,val_macro_ace,val_macro_f1"
    assert len(lines) == len(rows) + 1


def test_regularizer_gradient_matches_finite_differences():
    g, adj, split, w, obj, theta = small_problem(seed=1)
    hook = _FrozenTargets(obj, CaliRareConfig(lam=0.5), workers=1)
    cache = obj.cache(theta)
    value, g_out, info = hook(1, theta, cache)
    targets = info["targets"]
    analytic = obj.backward(theta, cache, g_out)

    def frozen(x):
        probs = obj.cache(x).probs[obj.train_ids]
        return np.abs(targets - probs.max(1)).mean()

    assert value == pytest.approx(frozen(theta.flat))
    step = 1e-6
    fd = np.array([(frozen(theta.flat + step * e) - frozen(theta.flat - step * e)) / (2 * step)
                   for e in np.eye(theta.size)])
    np.testing.assert_allclose(analytic, fd, atol=1e-6)


def test_regularizer_matches_records():
    g, adj, split, w, obj, theta = small_problem(seed=4)
    value, ices, records, _ = eice_regularizer(obj, theta, SolverConfig(), CoverageConfig())
    assert len(records) == obj.n
    assert value == pytest.approx(np.mean([abs(r.uncertainty - r.confidence) for r in records]))
    assert value == pytest.approx(ices.mean())


def test_temperature_recovers_one_on_calibrated_logits():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        logits = rng.normal(0, 2, size=(20000, 3))
        p = softmax(logits)
        labels = (rng.random(20000)[:, None] > p.cumsum(1)).sum(1)
        assert abs(temperature_scale(logits, labels) - 1.0) < 0.05


def test_temperature_undoes_sharpening():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 1.5, size=(5000, 2))
    labels = (rng.random(5000) > softmax(logits)[:, 0]).astype(int)
    assert temperature_scale(3 * logits, labels) == pytest.approx(3.0, rel=0.1)


def test_temperature_preserves_predictions(dataset):
    g, split = dataset
    params = train(g, split, TrainConfig(seed=0, max_epochs=30))
    obj = GCNObjective.for_graph(g, normalize_adjacency(g), split.train_ids, [1, 1], 0.0,
                                 d=g.feature_dim, h=16, c=2)
    logits = obj.cache(params).logits
    T = temperature_scale(logits[split.val_ids], g.labels[split.val_ids])
    assert 0.05 <= T <= 20
    for t in (T, 0.1, 7.0):
        assert np.array_equal(np.argmax(softmax(logits / t), 1), np.argmax(logits, 1))
    report = evaluate(obj, params, g.labels, split.test_ids, SolverConfig(), CoverageConfig(),
                      temperature=T)
    plain = evaluate(obj, params, g.labels, split.test_ids, SolverConfig(), CoverageConfig())
    assert report.accuracy == plain.accuracy
    assert report.macro_f1 == plain.macro_f1


def test_temperature_empty_validation():
    with pytest.raises(DomainError):
        temperature_scale(np.zeros((0, 2)), np.zeros(0, int))


def test_label_smoothing_baseline_runs(dataset):
    g, split = dataset
    tc = TrainConfig(seed=0, max_epochs=15)
    smooth, history = train_label_smoothing(g, split, tc, epsilon=0.1)
    plain, _ = fit(g, split, tc)
    assert len(history) >= 1
    assert smooth.flat.tobytes() != plain.flat.tobytes()
    same, _ = train_label_smoothing(g, split, replace(tc), epsilon=0.0)
    assert same.flat.tobytes() == plain.flat.tobytes()
