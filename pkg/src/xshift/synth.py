"""Synthetic multi-dataset cohorts with controllable covariate, prior and concept shift.

Every sample carries two latent channels per task, ``u`` and ``v``. A dataset's
labeler looks at the concept ``cos(angle) * u + sin(angle) * v`` and calls the
finding present above a threshold (then flips a fraction of labels). A scorer
trained on some domains sees the concept of those domains through Gaussian
logit noise. Features are a noisy linear embedding of the latent channels.

Random draws come from independent substreams keyed by (dataset, model,
purpose), so adding a model or dataset never perturbs the existing ones.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .data import (
    MISSING,
    FeatureSet,
    LabelSet,
    PredictionSet,
    write_feature_csv,
    write_label_csv,
    write_prediction_csv,
)
from .errors import ArgumentError, ConfigError
from .protocols import classify_condition


def _per_task(value, task, default=0.0) -> float:
    if isinstance(value, Mapping):
        return float(value.get(task, default))
    return float(value)


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    size: int
    prior_shift: float | Mapping[str, float] = 0.0
    covariate_shift: float = 0.0


@dataclass(frozen=True)
class LabelerSpec:
    """How one dataset turns the latent state into labels (the concept ``c``)."""

    threshold_offset: float | Mapping[str, float] = 0.0
    flip_rate: float | Mapping[str, float] = 0.0
    concept_angle: float | Mapping[str, float] = 0.0
    tasks: tuple[str, ...] | None = None


@dataclass(frozen=True)
class ScorerSpec:
    model_id: str
    train_domains: tuple[str, ...]
    seeds: tuple[int, ...] = (0,)
    noise: float | Mapping[str, float] = 1.0
    unseen_degradation: float = 0.0
    gain: float = 1.0
    shared_group: str | None = None
    shared_fraction: float = 0.0
    seed_fraction: float = 1.0
    tasks: tuple[str, ...] | None = None
    eval_datasets: tuple[str, ...] | None = None


@dataclass(frozen=True)
class FeatureSpec:
    dim: int = 16
    separation: float = 1.0
    noise: float = 1.0


@dataclass(frozen=True)
class CohortConfig:
    datasets: tuple[DatasetSpec, ...]
    tasks: tuple[str, ...]
    prevalence: float | Mapping[str, float] = 0.3
    labelers: Mapping[str, LabelerSpec] = field(default_factory=dict)
    scorers: tuple[ScorerSpec, ...] = ()
    features: FeatureSpec | None = None
    description: str = ""

    def dataset(self, name: str) -> DatasetSpec:
        for d in self.datasets:
            if d.name == name:
                return d
        raise KeyError(name)

    def labeler(self, name: str) -> LabelerSpec:
        return self.labelers.get(name, LabelerSpec())

    def threshold(self, task: str) -> float:
        return float(ndtri(1.0 - _per_task(self.prevalence, task)))

    def validate(self):
        names = [d.name for d in self.datasets]
        if not names:
            raise ConfigError("cohort needs at least one dataset")
        if len(set(names)) != len(names):
            raise ConfigError("dataset names must be unique")
        if not self.tasks or len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("tasks must be a non-empty list of unique names")
        for d in self.datasets:
            if d.size < 1:
                raise ConfigError(f"dataset {d.name!r} must have at least one sample")
        for t in self.tasks:
            p = _per_task(self.prevalence, t, 0.3)
            if not 0.0 < p < 1.0:
                raise ConfigError(f"prevalence of {t!r} must lie in (0, 1), got {p}")
        for name, lab in self.labelers.items():
            if name not in names:
                raise ConfigError(f"labeler for unknown dataset {name!r}")
            for t in self.tasks:
                f = _per_task(lab.flip_rate, t)
                if not 0.0 <= f <= 1.0:
                    raise ConfigError(f"flip rate for {name}/{t} must lie in [0, 1], got {f}")
        ids = set()
        for s in self.scorers:
            if s.model_id in ids:
                raise ConfigError(f"duplicate scorer {s.model_id!r}")
            ids.add(s.model_id)
            for d in (*s.train_domains, *(s.eval_datasets or ())):
                if d not in names:
                    raise ConfigError(f"scorer {s.model_id!r} references unknown dataset {d!r}")
            if not s.train_domains:
                raise ConfigError(f"scorer {s.model_id!r} has no train domains")
            for frac in (s.shared_fraction, s.seed_fraction):
                if not 0.0 <= frac <= 1.0:
                    raise ConfigError(f"scorer {s.model_id!r}: fractions must lie in [0, 1]")
            if s.unseen_degradation < 0 or s.gain <= 0:
                raise ConfigError(f"scorer {s.model_id!r}: bad degradation or gain")
            for t in self.tasks:
                if _per_task(s.noise, t, 1.0) < 0:
                    raise ConfigError(f"scorer {s.model_id!r}: negative noise")
        if self.features is not None and self.features.dim < 1:
            raise ConfigError("feature dimension must be positive")


@dataclass(frozen=True)
class Cohort:
    config: CohortConfig
    seed: int
    labels: Mapping[str, LabelSet]
    predictions: tuple[PredictionSet, ...]
    features: FeatureSet | None


def _stream(seed: int, *keys) -> np.random.Generator:
    key = tuple(zlib.crc32(str(k).encode("utf-8")) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))


def _sample_ids(spec: DatasetSpec) -> list[str]:
    width = max(5, len(str(spec.size)))
    return [f"{spec.name}_{i:0{width}d}" for i in range(spec.size)]


def scorer_angle(config: CohortConfig, scorer: ScorerSpec, task: str) -> float:
    return float(np.mean([_per_task(config.labeler(d).concept_angle, task)
                          for d in scorer.train_domains]))


def scorer_noise(scorer: ScorerSpec, task: str, eval_dataset: str) -> float:
    """Total logit-noise standard deviation of a scorer on one dataset."""
    base = _per_task(scorer.noise, task, 1.0)
    if eval_dataset in scorer.train_domains:
        return base
    return math.hypot(base, scorer.unseen_degradation)


def generate_cohort(config: CohortConfig, seed: int = 0) -> Cohort:
    """Draw labels, scores and (optionally) features for a cohort.

    Deterministic in ``(config, seed)``.
    """
    config.validate()
    tasks = tuple(config.tasks)
    n_t = len(tasks)
    thr = np.array([config.threshold(t) for t in tasks])

    latent = {}
    for d in config.datasets:
        rng = _stream(seed, d.name, "latent")
        u = rng.standard_normal((d.size, n_t))
        v = rng.standard_normal((d.size, n_t))
        u += np.array([_per_task(d.prior_shift, t) for t in tasks])
        latent[d.name] = (u, v)

    def concept(name, angles):
        u, v = latent[name]
        return np.cos(angles) * u + np.sin(angles) * v

    labels = {}
    for d in config.datasets:
        lab = config.labeler(d.name)
        angles = np.array([_per_task(lab.concept_angle, t) for t in tasks])
        offsets = np.array([_per_task(lab.threshold_offset, t) for t in tasks])
        flips = np.array([_per_task(lab.flip_rate, t) for t in tasks])
        y = (concept(d.name, angles) > thr + offsets).astype(np.int8)
        flip = _stream(seed, d.name, "labeler").random(y.shape) < flips
        y = np.where(flip, 1 - y, y).astype(np.int8)
        if lab.tasks is not None:
            for j, t in enumerate(tasks):
                if t not in lab.tasks:
                    y[:, j] = MISSING
        labels[d.name] = LabelSet(d.name, _sample_ids(d), tasks, y)

    preds = []
    for s in sorted(config.scorers, key=lambda s: s.model_id):
        heads = [j for j, t in enumerate(tasks) if s.tasks is None or t in s.tasks]
        angles = np.array([scorer_angle(config, s, t) for t in tasks])
        offsets = np.array([
            np.mean([_per_task(config.labeler(d).threshold_offset, t) for d in s.train_domains])
            for t in tasks
        ])
        eval_sets = s.eval_datasets or tuple(d.name for d in config.datasets)
        for dname in sorted(eval_sets):
            size = config.dataset(dname).size
            sigma = np.array([scorer_noise(s, t, dname) for t in tasks])
            base = np.array([_per_task(s.noise, t, 1.0) for t in tasks])
            extra = np.sqrt(np.maximum(sigma**2 - base**2, 0.0))
            shared = (
                _stream(seed, "group", s.shared_group, dname).standard_normal((size, n_t))
                if s.shared_group else np.zeros((size, n_t))
            )
            own = _stream(seed, "model", s.model_id, dname).standard_normal((size, n_t))
            signal = s.gain * (concept(dname, angles) - thr - offsets)
            for seed_k in s.seeds:
                per_seed = _stream(seed, "model", s.model_id, "seed", seed_k, dname)
                eps_seed = per_seed.standard_normal((size, n_t))
                eps_deg = per_seed.standard_normal((size, n_t))
                private = (math.sqrt(s.seed_fraction) * eps_seed
                           + math.sqrt(1.0 - s.seed_fraction) * own)
                noise = (math.sqrt(s.shared_fraction) * shared
                         + math.sqrt(1.0 - s.shared_fraction) * private)
                scores = expit(signal + base * noise + extra * eps_deg)
                out = np.full((size, n_t), np.nan)
                out[:, heads] = scores[:, heads]
                preds.append(PredictionSet(
                    s.model_id, frozenset(s.train_domains), int(seed_k), dname,
                    _sample_ids(config.dataset(dname)), tasks, out,
                ))

    features = None
    if config.features is not None:
        fs = config.features
        n_latent = 2 * n_t
        basis_rng = _stream(seed, "feature-basis")
        cols = min(fs.dim, n_latent + 1)
        q, _ = np.linalg.qr(basis_rng.standard_normal((fs.dim, cols)))
        if fs.dim >= n_latent + 1:
            embed, nuisance = q[:, :n_latent], q[:, n_latent]
        else:
            embed = basis_rng.standard_normal((fs.dim, n_latent)) / math.sqrt(fs.dim)
            nuisance = q[:, 0]
        blocks, ids, dsets = [], [], []
        for d in config.datasets:
            u, v = latent[d.name]
            z = np.empty((d.size, n_latent))
            z[:, 0::2] = u
            z[:, 1::2] = v
            noise = _stream(seed, d.name, "features").standard_normal((d.size, fs.dim))
            blocks.append(fs.separation * z @ embed.T + d.covariate_shift * nuisance
                          + fs.noise * noise)
            ids.extend(_sample_ids(d))
            dsets.extend([d.name] * d.size)
        features = FeatureSet(ids, dsets, np.vstack(blocks))

    preds.sort(key=lambda p: p.key)
    return Cohort(config, int(seed), dict(sorted(labels.items())), tuple(preds), features)


# -- analytic expectations ---------------------------------------------------------------


def expected_auc(
    noise: float,
    *,
    gain: float = 1.0,
    threshold: float = 0.0,
    mean: float = 0.0,
    flip_rate: float = 0.0,
    grid: int = 1500,
) -> float:
    """Population AUC of a scorer whose concept matches the labeler's.

    The concept value is ``N(mean, 1)``, the true label is ``concept > threshold``
    and the score logit is ``gain * concept + N(0, noise^2)``. Evaluated with a
    midpoint rule in probability space over the truncated positive and negative
    concept distributions, then mixed for symmetric label flips.
    """
    cut = ndtr(threshold - mean)
    q = (np.arange(grid) + 0.5) / grid
    pos = mean + ndtri(cut + (1.0 - cut) * q)
    neg = mean + ndtri(cut * q)
    delta = gain * (pos[:, None] - neg[None, :])
    if noise > 0:
        a_true = float(np.mean(ndtr(delta / (noise * math.sqrt(2.0)))))
    else:
        a_true = float(np.mean(delta > 0) + 0.5 * np.mean(delta == 0))
    if flip_rate == 0:
        return a_true
    prev = 1.0 - cut
    f = flip_rate
    obs_pos = (1 - f) * prev + f * (1 - prev)
    obs_neg = 1.0 - obs_pos
    a = (1 - f) * prev / obs_pos  # observed positive is truly positive
    b = f * prev / obs_neg  # observed negative is truly positive
    return a * (1 - b) * a_true + a * b * 0.5 + (1 - a) * (1 - b) * 0.5 + (1 - a) * b * (1 - a_true)


def expected_condition_gap(
    config: CohortConfig, high: str = "all-including", low: str = "all-except"
) -> float:
    """Analytic ``mean AUC(high) - mean AUC(low)`` averaged over test datasets.

    Only valid when scorer and labeler concepts coincide (no concept rotation).
    """
    diffs = []
    for d in config.datasets:
        lab = config.labeler(d.name)
        by_cond: dict[str, list[float]] = {}
        for s in config.scorers:
            if s.eval_datasets is not None and d.name not in s.eval_datasets:
                continue
            cond = classify_condition(s.train_domains, d.name)
            if cond not in (high, low):
                continue
            tasks = [t for t in config.tasks if s.tasks is None or t in s.tasks]
            vals = [
                expected_auc(
                    scorer_noise(s, t, d.name), gain=s.gain,
                    threshold=config.threshold(t) + _per_task(lab.threshold_offset, t),
                    mean=_per_task(d.prior_shift, t),
                    flip_rate=_per_task(lab.flip_rate, t),
                )
                for t in tasks
            ]
            by_cond.setdefault(cond, []).append(float(np.mean(vals)))
        if high in by_cond and low in by_cond:
            diffs.append(np.mean(by_cond[high]) - np.mean(by_cond[low]))
    if not diffs:
        raise ArgumentError(f"config has no dataset with both {high!r} and {low!r} scorers")
    return float(np.mean(diffs))


# -- scenarios ---------------------------------------------------------------------------

SCENARIOS = {
    "good-perf-poor-agreement": "Two discriminative scorers with independent errors on a rare "
    "finding: both AUC > 0.8, pairwise kappa < 0.4.",
    "poor-perf-high-agreement": "Two near-duplicate scorers against heavily flipped labels: "
    "kappa > 0.7 while AUC < 0.65.",
    "planted-loo-gap": "Three domains; scorers lose accuracy on domains they were not trained "
    "on, so all-including beats all-except by a known margin.",
    "aligned-vs-divergent-concepts": "Three domains, four tasks, features; the Mass concept "
    "is rotated by 120 degrees from one domain to the next, so its probe heads cannot merge.",
}


def scenario(name: str) -> CohortConfig:
    if name == "good-perf-poor-agreement":
        task = "Hernia"
        return CohortConfig(
            datasets=(DatasetSpec("dsA", 5000),),
            tasks=(task,),
            prevalence=0.05,
            scorers=(
                ScorerSpec("modelA", ("dsA",), noise=1.3),
                ScorerSpec("modelB", ("dsA",), noise=1.3),
            ),
            description=SCENARIOS[name],
        )
    if name == "poor-perf-high-agreement":
        task = "Nodule"
        return CohortConfig(
            datasets=(DatasetSpec("dsA", 5000),),
            tasks=(task,),
            prevalence=0.3,
            labelers={"dsA": LabelerSpec(flip_rate=0.3)},
            scorers=(
                ScorerSpec("modelA", ("dsA",), noise=1.0, shared_group="g", shared_fraction=0.97),
                ScorerSpec("modelB", ("dsA",), noise=1.0, shared_group="g", shared_fraction=0.97),
            ),
            description=SCENARIOS[name],
        )
    if name == "planted-loo-gap":
        names = ("dsA", "dsB", "dsC")
        tasks = ("Cardiomegaly", "Edema", "Effusion")
        scorers = [ScorerSpec("all", names, seeds=(0, 1, 2), noise=0.8, unseen_degradation=1.5)]
        for d in names:
            others = tuple(x for x in names if x != d)
            scorers.append(ScorerSpec(f"only-{d}", (d,), seeds=(0, 1, 2), noise=0.8,
                                      unseen_degradation=1.5, eval_datasets=(d,)))
            scorers.append(ScorerSpec(f"except-{d}", others, seeds=(0, 1, 2), noise=0.8,
                                      unseen_degradation=1.5, eval_datasets=(d,)))
        return CohortConfig(
            datasets=tuple(DatasetSpec(d, 2000) for d in names),
            tasks=tasks,
            prevalence={"Cardiomegaly": 0.2, "Edema": 0.15, "Effusion": 0.3},
            scorers=tuple(scorers),
            description=SCENARIOS[name],
        )
    if name == "aligned-vs-divergent-concepts":
        names = ("dsA", "dsB", "dsC")
        tasks = ("Cardiomegaly", "Effusion", "Edema", "Mass")
        return CohortConfig(
            datasets=tuple(DatasetSpec(d, 200) for d in names),
            tasks=tasks,
            prevalence=0.3,
            labelers={
                "dsB": LabelerSpec(concept_angle={"Mass": 2 * math.pi / 3}),
                "dsC": LabelerSpec(concept_angle={"Mass": 4 * math.pi / 3}),
            },
            scorers=tuple(ScorerSpec(f"model-{d}", (d,), noise=0.7) for d in names),
            features=FeatureSpec(dim=16, separation=2.0, noise=0.25),
            description=SCENARIOS[name],
        )
    raise ArgumentError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")


# -- writing a cohort as an ingestible study -----------------------------------------------


def write_cohort(cohort: Cohort, out_dir) -> Path:
    """Write labels, predictions, features and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    (out / "predictions").mkdir(exist_ok=True)
    files = []
    for name, ls in cohort.labels.items():
        rel = f"labels/{name}.csv"
        write_label_csv(ls, out / rel)
        files.append({"role": "labels", "path": rel, "dataset_id": name,
                      "exhaustive_negative": False})
    for p in cohort.predictions:
        rel = f"predictions/{p.model_id}__seed{p.seed}__{p.eval_dataset_id}.csv"
        write_prediction_csv(p, out / rel)
        files.append({"role": "predictions", "path": rel, "model_id": p.model_id,
                      "train_domains": sorted(p.train_domains), "seed": p.seed,
                      "eval_dataset_id": p.eval_dataset_id})
    if cohort.features is not None:
        write_feature_csv(cohort.features, out / "features.csv")
        files.append({"role": "features", "path": "features.csv"})
    manifest = {
        "tasks": list(cohort.config.tasks),
        "uncertain_policy": "missing",
        "output_dir": "reports",
        "generator": {"seed": cohort.seed, "description": cohort.config.description},
        "files": files,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
