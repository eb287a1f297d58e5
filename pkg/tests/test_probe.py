import dataclasses
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from xshift import probe, protocols, synth
from xshift.data import MISSING, FeatureSet, LabelSet
from xshift.errors import ArgumentError, InsufficientSamples, ShapeError
from xshift.probe import ProbeConfig, ProbeModel


def _toy(rng, n_ds=2, n_t=3, dim=4, n=12, missing=0.2):
    datasets = tuple(f"d{i}" for i in range(n_ds))
    tasks = tuple(f"t{j}" for j in range(n_t))
    ids, dsets, labels = [], [], {}
    for d in datasets:
        sids = [f"{d}_{i}" for i in range(n)]
        y = rng.integers(0, 2, (n, n_t))
        y[rng.random((n, n_t)) < missing] = MISSING
        labels[d] = LabelSet(d, sids, tasks, y)
        ids += sids
        dsets += [d] * n
    feats = FeatureSet(ids, dsets, rng.normal(size=(len(ids), dim)))
    return datasets, tasks, feats, labels


def _random_model(rng, datasets, tasks, dim, scale=0.5):
    return ProbeModel(datasets, tasks, scale * rng.normal(size=(len(datasets), len(tasks), dim)),
                      scale * rng.normal(size=(len(datasets), len(tasks))))


def test_task_weights_examples():
    w = probe.task_weights([10, 30, 50])
    assert [Fraction(x).limit_denominator(100) for x in w.weights] == [1, Fraction(5, 7), Fraction(3, 7)]
    np.testing.assert_array_equal(w.alphas, [70, 50, 30])
    assert probe.task_weights([7, 7, 7]).weights.tolist() == [1, 1, 1]
    assert probe.task_weights([4]).weights.tolist() == [1]
    assert probe.task_weights([0, 0]).weights.tolist() == [1, 1]
    assert probe.task_weights({"a": 1, "b": 3})["a"] == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 10_000), min_size=1, max_size=18))
def test_rarest_task_weight_is_one(counts):
    w = probe.task_weights(counts)
    assert w.weights[int(np.argmin(counts))] == 1.0
    assert np.all((w.weights > 0) & (w.weights <= 1))


def test_zero_model_loss_is_log_two():
    rng = np.random.default_rng(0)
    datasets, tasks, feats, labels = _toy(rng, missing=0.0)
    model = ProbeModel.zeros(datasets, tasks, 4)
    loss, _ = probe.probe_objective(model, feats, labels, None, lam=0.0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_all_missing_gives_zero_loss_and_gradient():
    rng = np.random.default_rng(1)
    datasets, tasks, feats, labels = _toy(rng, missing=1.1)
    model = _random_model(rng, datasets, tasks, 4)
    loss, grad = probe.probe_objective(model, feats, labels, None, lam=0.0)
    assert loss == 0.0
    assert not grad.weights.any() and not grad.bias.any()


def test_loss_matches_direct_loop():
    rng = np.random.default_rng(2)
    datasets, tasks, feats, labels = _toy(rng)
    model = _random_model(rng, datasets, tasks, 4)
    weights = {d: probe.task_weights(rng.integers(1, 20, len(tasks)), tasks) for d in datasets}
    data = probe.probe_data(feats, labels, datasets, tasks)
    loss, _ = probe.probe_objective(model, data, weights=weights, lam=0.7)
    wlist = [[weights[d][t] for t in tasks] for d in datasets]
    expected = oracles.probe_loss(model.weights, model.bias, data.x, data.y, wlist, 0.7)
    assert loss == pytest.approx(expected, rel=1e-12)


def _finite_difference_error(rng):
    n_ds, n_t, dim = (int(v) for v in rng.integers(1, 4, 3))
    datasets, tasks, feats, labels = _toy(rng, n_ds, n_t, dim, n=int(rng.integers(3, 10)))
    model = _random_model(rng, datasets, tasks, dim)
    lam = float(rng.choice([0.0, 0.3, 5.0]))
    weights = {d: probe.task_weights(rng.integers(0, 9, n_t), tasks) for d in datasets}
    data = probe.probe_data(feats, labels, datasets, tasks)
    _, grad = probe.probe_objective(model, data, weights=weights, lam=lam)
    params = np.concatenate([model.weights.ravel(), model.bias.ravel()])
    analytic = np.concatenate([grad.weights.ravel(), grad.bias.ravel()])
    h = 1e-6
    numeric = np.empty_like(params)
    split = model.weights.size
    for i in range(params.size):
        vals = []
        for sign in (1, -1):
            p = params.copy()
            p[i] += sign * h
            m = ProbeModel(datasets, tasks, p[:split].reshape(model.weights.shape),
                           p[split:].reshape(model.bias.shape))
            vals.append(probe.probe_objective(m, data, weights=weights, lam=lam)[0])
        numeric[i] = (vals[0] - vals[1]) / (2 * h)
    return np.linalg.norm(numeric - analytic) / max(np.linalg.norm(analytic), 1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    errors = [_finite_difference_error(rng) for _ in range(20)]
    assert max(errors) < 1e-4


def test_dataset_perturbation_only_touches_its_heads():
    rng = np.random.default_rng(4)
    datasets, tasks, feats, labels = _toy(rng, n_ds=3)
    model = _random_model(rng, datasets, tasks, 4)
    _, g0 = probe.probe_objective(model, feats, labels, None, lam=0.0)
    x = feats.features.copy()
    rows = [i for i, d in enumerate(feats.dataset_ids) if d == "d1"]
    x[rows] += rng.normal(size=(len(rows), 4))
    moved = FeatureSet(feats.sample_ids, feats.dataset_ids, x)
    _, g1 = probe.probe_objective(model, moved, labels, None, lam=0.0)
    diff_w = np.abs(g1.weights - g0.weights).sum(axis=(1, 2))
    diff_b = np.abs(g1.bias - g0.bias).sum(axis=1)
    assert diff_w[1] > 0 and diff_w[0] == 0 and diff_w[2] == 0
    assert diff_b[0] == 0 and diff_b[2] == 0


def test_objective_validation():
    rng = np.random.default_rng(5)
    datasets, tasks, feats, labels = _toy(rng)
    with pytest.raises(ShapeError):
        probe.probe_objective(ProbeModel.zeros(datasets, tasks, 3), feats, labels)
    with pytest.raises(ArgumentError):
        probe.probe_objective(ProbeModel.zeros(datasets, tasks, 4), feats, labels, lam=-1)


def test_separable_toy_reaches_full_accuracy():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(80, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(int).reshape(-1, 1)
    ids = [f"s{i}" for i in range(80)]
    feats = FeatureSet(ids, ["d"] * 80, x)
    labels = {"d": LabelSet("d", ids, ["T"], y)}
    cfg = ProbeConfig(("d",), ("T",), 2, lam=0.0, max_iter=2000)
    model, trace = probe.train_probe(cfg, feats, labels)
    data = probe.probe_data(feats, labels, ("d",), ("T",))
    assert probe.training_accuracy(model, data) == 1.0
    assert np.all(np.diff(trace.losses) <= 0)


def test_training_is_seed_deterministic():
    rng = np.random.default_rng(7)
    datasets, tasks, feats, labels = _toy(rng, n=30)
    runs = {}
    for seed in (0, 0, 1):
        cfg = ProbeConfig(datasets, tasks, 4, lam=0.5, seed=seed, max_iter=50)
        runs.setdefault(seed, []).append(probe.train_probe(cfg, feats, labels)[1].final_loss)
    assert runs[0][0] == runs[0][1]
    assert runs[0][0] != runs[1][0]


def test_training_needs_labels():
    rng = np.random.default_rng(8)
    datasets, tasks, feats, labels = _toy(rng, missing=1.1)
    with pytest.raises(InsufficientSamples):
        probe.train_probe(ProbeConfig(datasets, tasks, 4), feats, labels)


def test_strong_regularizer_merges_aligned_heads():
    # noisy features keep the pooled problem non-separable, so a finite optimum exists
    cfg = dataclasses.replace(synth.scenario("aligned-vs-divergent-concepts"), labelers={},
                              features=synth.FeatureSpec(16, 1.0, 1.0))
    cohort = synth.generate_cohort(cfg, 2)
    pc = ProbeConfig(("dsA", "dsB", "dsC"), cfg.tasks, 16, lam=100.0)
    model, trace = probe.train_probe(pc, cohort.features, cohort.labels)
    assert trace.converged
    widest = max(np.linalg.norm(model.weights[a, j] - model.weights[b, j])
                 for j in range(len(cfg.tasks)) for a in range(3) for b in range(3))
    assert widest < 1e-3


def test_pca_two_points():
    proj = probe.pca_project([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]], k=1)
    np.testing.assert_allclose(np.abs(proj.components[0]), [0.6, 0.8, 0.0], atol=1e-12)


def test_pca_subspace_has_no_extra_variance():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(10, 2)) @ rng.normal(size=(2, 5)) + 3.0
    proj = probe.pca_project(x, k=4)
    assert np.all(proj.explained_variance[2:] < 1e-20 * 1e10)


def test_pca_matches_covariance_eigendecomposition():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(8, 5))
    proj = probe.pca_project(x, k=2)
    vals, vecs = oracles.covariance_pca(x, 2)
    np.testing.assert_allclose(proj.explained_variance, vals, atol=1e-8)
    for got, want in zip(proj.components, vecs):
        assert min(np.abs(got - want).max(), np.abs(got + want).max()) < 1e-8
    np.testing.assert_allclose(proj.components @ proj.components.T, np.eye(2), atol=1e-12)


def test_pca_full_rank_preserves_distances():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(7, 4))
    proj = probe.pca_project(x, k=4)
    for a in range(7):
        for b in range(7):
            assert np.linalg.norm(proj.coordinates[a] - proj.coordinates[b]) == pytest.approx(
                np.linalg.norm(x[a] - x[b]), abs=1e-10)


def test_distances_cases():
    ds, ts = ("a", "b", "c"), ("t0", "t1")
    same = ProbeModel(ds, ts, np.ones((3, 2, 4)), np.zeros((3, 2)))
    summary = probe.weight_distance_summary({"v": [same]})
    assert summary.raw["v"] == {"t0": 0.0, "t1": 0.0}
    w = np.ones((3, 2, 4))
    w[1, 1] += 10.0
    far = ProbeModel(ds, ts, w, np.zeros((3, 2)))
    assert probe.weight_distance_summary({"v": [far]}).normalized["v"]["t1"] == 1.0


def test_distances_match_pair_oracle():
    rng = np.random.default_rng(12)
    models = [_random_model(rng, ("a", "b", "c", "d"), ("t0", "t1"), 3) for _ in range(3)]
    summary = probe.weight_distance_summary({"v": models})
    for j, t in enumerate(("t0", "t1")):
        per_seed = [oracles.mean_pair_distance([m.weights[i, j].tolist() for i in range(4)])
                    for m in models]
        assert summary.raw["v"][t] == pytest.approx(sum(per_seed) / 3, abs=1e-12)


def _auc_report(values, tasks, train=("x",)):
    cols = tuple(f"y/{t}" for t in tasks)
    return protocols.MatrixReport("auc", ("m",), cols, np.array([values], dtype=float),
                                  row_meta={"m": {"train_domains": list(train)}})


def test_similarity_cases():
    tasks = ("a", "b", "c", "d")
    rep = _auc_report([0.9, 0.8, 0.7, 0.6], tasks)
    sim = probe.similarity_vs_generalization(dict(zip(tasks, [1.0, 2.0, 3.0, 4.0])), rep)
    assert sim.rho == pytest.approx(-1.0)
    flat = _auc_report([0.7] * 4, tasks)
    assert probe.similarity_vs_generalization(dict(zip(tasks, [1.0, 2, 3, 4])), flat).rho is None
    with pytest.raises(InsufficientSamples):
        probe.similarity_vs_generalization({"a": 1.0, "b": 2.0}, rep)


def test_similarity_excludes_in_domain_cells():
    rep = protocols.MatrixReport("auc", ("m",), ("x/a", "y/a"), np.array([[0.99, 0.6]]),
                                 row_meta={"m": {"train_domains": ["x"]}})
    assert probe.cross_domain_auc(rep) == {"a": 0.6}


def test_similarity_random_matches_rank_oracle():
    rng = np.random.default_rng(13)
    tasks = tuple(f"t{i}" for i in range(10))
    aucs = rng.random(10)
    dist = rng.random(10)
    sim = probe.similarity_vs_generalization(dict(zip(tasks, dist)), _auc_report(aucs, tasks))
    expected = oracles.pearson(oracles.ranks(dist.tolist()), oracles.ranks(aucs.tolist()))
    assert sim.rho == pytest.approx(expected, abs=1e-12)


def test_probe_csv_round_trip(tmp_path):
    rng = np.random.default_rng(14)
    model = _random_model(rng, ("a", "b"), ("t0", "t1", "t2"), 5)
    probe.write_probe_csv(model, tmp_path / "p.csv")
    back = probe.read_probe_csv(tmp_path / "p.csv")
    np.testing.assert_array_equal(back.weights, model.weights)
    np.testing.assert_array_equal(back.bias, model.bias)
    assert back.datasets == model.datasets and back.tasks == model.tasks
