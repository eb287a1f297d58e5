import dataclasses

import numpy as np
import pytest

from xshift import data, metrics, protocols, synth
from xshift.errors import ArgumentError, ConfigError
from xshift.synth import CohortConfig, DatasetSpec, LabelerSpec, ScorerSpec


def _base(**kw):
    cfg = dict(datasets=(DatasetSpec("d", 3000),), tasks=("Edema",),
               scorers=(ScorerSpec("m", ("d",), noise=0.5),))
    cfg.update(kw)
    return CohortConfig(**cfg)


def test_generation_is_deterministic():
    a = synth.generate_cohort(synth.scenario("planted-loo-gap"), 5)
    b = synth.generate_cohort(synth.scenario("planted-loo-gap"), 5)
    for ds in a.labels:
        np.testing.assert_array_equal(a.labels[ds].values, b.labels[ds].values)
    for p, q in zip(a.predictions, b.predictions):
        assert p.key == q.key
        np.testing.assert_array_equal(p.scores, q.scores)
    c = synth.generate_cohort(synth.scenario("planted-loo-gap"), 6)
    assert not np.array_equal(a.predictions[0].scores, c.predictions[0].scores)


def test_adding_a_scorer_leaves_others_untouched():
    one = synth.generate_cohort(_base(), 1)
    two = synth.generate_cohort(_base(scorers=(ScorerSpec("m", ("d",), noise=0.5),
                                               ScorerSpec("n", ("d",)))), 1)
    np.testing.assert_array_equal(one.labels["d"].values, two.labels["d"].values)
    np.testing.assert_array_equal(one.predictions[0].scores, two.predictions[0].scores)


def test_noiseless_scorer_is_perfect():
    c = synth.generate_cohort(_base(scorers=(ScorerSpec("m", ("d",), noise=0.0),)), 0)
    p = c.predictions[0]
    assert metrics.auc(p.column("Edema"), c.labels["d"].column("Edema")) == 1.0


def test_flip_free_labelers_agree_and_flips_lower_kappa():
    columns = {}
    for rate in (0.0, 0.1, 0.3):
        cfg = _base(labelers={"d": LabelerSpec(flip_rate=rate)})
        columns[rate] = synth.generate_cohort(cfg, 3).labels["d"].column("Edema")
    again = synth.generate_cohort(_base(labelers={"d": LabelerSpec(flip_rate=0.0)}), 3)
    assert metrics.cohen_kappa(columns[0.0], again.labels["d"].column("Edema")).kappa == 1.0
    k1 = metrics.cohen_kappa(columns[0.0], columns[0.1]).kappa
    k3 = metrics.cohen_kappa(columns[0.0], columns[0.3]).kappa
    assert 1.0 > k1 > k3


def test_prevalence_and_prior_shift():
    c = synth.generate_cohort(_base(datasets=(DatasetSpec("d", 20000),), prevalence=0.2), 0)
    assert np.mean(c.labels["d"].column("Edema")) == pytest.approx(0.2, abs=0.01)
    shifted = _base(datasets=(DatasetSpec("d", 20000, prior_shift=0.5),), prevalence=0.2)
    assert np.mean(synth.generate_cohort(shifted, 0).labels["d"].column("Edema")) > 0.3


def test_label_task_subsets_are_missing():
    cfg = _base(tasks=("Edema", "Mass"), labelers={"d": LabelerSpec(tasks=("Mass",))})
    ls = synth.generate_cohort(cfg, 0).labels["d"]
    assert (ls.column("Edema") == data.MISSING).all()


def test_expected_auc_tracks_empirical():
    cfg = _base(datasets=(DatasetSpec("d", 40000),), prevalence=0.3,
                scorers=(ScorerSpec("m", ("d",), noise=0.9),))
    c = synth.generate_cohort(cfg, 0)
    empirical = metrics.auc(c.predictions[0].column("Edema"), c.labels["d"].column("Edema"))
    analytic = synth.expected_auc(0.9, threshold=cfg.threshold("Edema"))
    assert empirical == pytest.approx(analytic, abs=0.01)
    assert synth.expected_auc(0.0) == pytest.approx(1.0, abs=1e-6)


def test_config_validation():
    with pytest.raises(ConfigError):
        synth.generate_cohort(_base(prevalence=1.5))
    with pytest.raises(ConfigError):
        synth.generate_cohort(_base(scorers=(ScorerSpec("m", ("nope",)),)))
    with pytest.raises(ConfigError):
        synth.generate_cohort(_base(labelers={"d": LabelerSpec(flip_rate=2.0)}))
    with pytest.raises(ArgumentError):
        synth.scenario("nonexistent")


def test_every_scenario_generates():
    for name in synth.SCENARIOS:
        cfg = synth.scenario(name)
        cfg.validate()
        assert cfg.description


def test_written_cohort_loads_back(tmp_path):
    cohort = synth.generate_cohort(synth.scenario("aligned-vs-divergent-concepts"), 1)
    path = synth.write_cohort(cohort, tmp_path)
    study = data.load_study(data.load_manifest(path))
    for ds, ls in cohort.labels.items():
        np.testing.assert_array_equal(study.labels[ds].values, ls.values)
    np.testing.assert_array_equal(study.features.features, cohort.features.features)
    assert [p.key for p in study.predictions] == [p.key for p in cohort.predictions]
    a = protocols.auc_matrix(cohort.predictions, cohort.labels)
    b = protocols.auc_matrix(study.predictions, study.labels)
    np.testing.assert_array_equal(a.values, b.values)


def test_features_carry_the_concept():
    cfg = dataclasses.replace(synth.scenario("aligned-vs-divergent-concepts"))
    c = synth.generate_cohort(cfg, 0)
    assert c.features.dim == 16
    assert len(c.features.sample_ids) == 600
