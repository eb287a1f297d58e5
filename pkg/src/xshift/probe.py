"""Linear probe over shared features with one sigmoid head per (dataset, task).

Each head only sees samples of its own dataset. An optional L2 penalty pulls
the heads of the same task towards their centroid, which makes it possible to
ask which tasks can share a single weight vector across datasets.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from . import metrics
from .data import MISSING, POS, FeatureSet, LabelSet, align_samples
from .errors import ArgumentError, DataError, InsufficientSamples, ShapeError, TrainingError
from .protocols import MatrixReport


@dataclass(frozen=True)
class TaskWeights:
    tasks: tuple[str, ...]
    weights: np.ndarray
    alphas: np.ndarray
    counts: np.ndarray
    mean_count: float

    def __getitem__(self, task: str) -> float:
        return float(self.weights[self.tasks.index(task)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.tasks, self.weights.tolist()))


def task_weights(counts, tasks: Sequence[str] | None = None) -> TaskWeights:
    """Loss weight per task from its positive count.

    ``alpha_t = max(c) - c_t + mean(c)`` and ``w_t = alpha_t / max(alpha)``, so
    the rarest task gets weight 1. ``counts`` is a mapping task -> count or a
    sequence aligned with ``tasks``.
    """
    if isinstance(counts, Mapping):
        tasks = tuple(counts) if tasks is None else tuple(tasks)
        c = np.array([counts[t] for t in tasks], dtype=np.float64)
    else:
        c = np.asarray(counts, dtype=np.float64).ravel()
        tasks = tuple(tasks) if tasks is not None else tuple(f"task{i}" for i in range(c.size))
    if c.size == 0:
        raise ArgumentError("task_weights needs at least one task")
    if c.size != len(tasks):
        raise ShapeError(f"{c.size} counts for {len(tasks)} tasks")
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise ArgumentError("task counts must be finite and non-negative")
    mean = float(c.mean())
    alphas = c.max() - c + mean
    top = alphas.max()
    # all counts zero: every alpha is 0, treat tasks as equally weighted
    weights = alphas / top if top > 0 else np.ones_like(alphas)
    return TaskWeights(tuple(tasks), weights, alphas, c, mean)


@dataclass(frozen=True)
class ProbeConfig:
    datasets: tuple[str, ...]
    tasks: tuple[str, ...]
    feature_dim: int
    lam: float = 1.0
    learning_rate: float = 1.0
    max_iter: int = 20000
    seed: int = 0
    use_task_weights: bool = True
    log_every: int = 10
    tol: float = 1e-12
    init_scale: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.datasets or not self.tasks:
            raise ArgumentError("probe needs at least one dataset and one task")
        if self.feature_dim < 1:
            raise ArgumentError("feature_dim must be positive")
        if self.lam < 0:
            raise ArgumentError("lambda must be non-negative")
        if self.learning_rate <= 0 or self.max_iter < 1 or self.log_every < 1:
            raise ArgumentError("learning_rate, max_iter and log_every must be positive")

    @property
    def n_heads(self) -> int:
        return len(self.datasets) * len(self.tasks)


@dataclass(frozen=True)
class ProbeModel:
    datasets: tuple[str, ...]
    tasks: tuple[str, ...]
    weights: np.ndarray  # datasets x tasks x D
    bias: np.ndarray  # datasets x tasks

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        w = np.array(self.weights, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64)
        if w.ndim != 3 or w.shape[:2] != (len(self.datasets), len(self.tasks)):
            raise ShapeError(f"weight tensor shape {w.shape} does not match heads")
        if b.shape != w.shape[:2]:
            raise ShapeError(f"bias shape {b.shape} does not match heads")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise DataError("probe parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def dim(self) -> int:
        return self.weights.shape[2]

    def head(self, dataset: str, task: str) -> tuple[np.ndarray, float]:
        i, j = self.datasets.index(dataset), self.tasks.index(task)
        return self.weights[i, j], float(self.bias[i, j])

    def head_keys(self) -> list[tuple[str, str]]:
        return list(itertools.product(self.datasets, self.tasks))

    def vectors(self) -> np.ndarray:
        """Weight vectors as a (heads x D) matrix in :meth:`head_keys` order."""
        return self.weights.reshape(-1, self.dim)

    @classmethod
    def zeros(cls, datasets, tasks, dim):
        return cls(datasets, tasks, np.zeros((len(datasets), len(tasks), dim)),
                   np.zeros((len(datasets), len(tasks))))


@dataclass(frozen=True)
class ProbeGradient:
    weights: np.ndarray
    bias: np.ndarray


@dataclass(frozen=True)
class ProbeData:
    """Design matrix grouped by dataset, with labels in {1, 0, -1}."""

    datasets: tuple[str, ...]
    tasks: tuple[str, ...]
    x: tuple[np.ndarray, ...]
    y: tuple[np.ndarray, ...]
    n_labelled: int

    @property
    def dim(self) -> int:
        return self.x[0].shape[1]


def probe_data(
    features: FeatureSet,
    labels: Mapping[str, LabelSet],
    datasets: Sequence[str],
    tasks: Sequence[str],
) -> ProbeData:
    """Attach each feature row to its dataset's labels.

    Samples of datasets outside ``datasets`` are dropped; samples without a
    label row are fully MISSING.
    """
    if not np.isfinite(features.features).all():
        raise DataError("features contain non-finite values")
    ds_arr = np.array(features.dataset_ids)
    xs, ys = [], []
    for d in datasets:
        rows = np.flatnonzero(ds_arr == d)
        ids = [features.sample_ids[i] for i in rows]
        y = np.full((len(rows), len(tasks)), MISSING, dtype=np.int8)
        if d in labels:
            ls = labels[d]
            al = align_samples(ids, ls)
            for j, t in enumerate(tasks):
                y[al.left, j] = ls.column(t)[al.right]
        xs.append(np.ascontiguousarray(features.features[rows]))
        ys.append(y)
    n_lab = int(sum(np.count_nonzero(y != MISSING) for y in ys))
    return ProbeData(tuple(datasets), tuple(tasks), tuple(xs), tuple(ys), n_lab)


def _weight_matrix(weights, datasets, tasks) -> np.ndarray:
    if weights is None:
        return np.ones((len(datasets), len(tasks)))
    if isinstance(weights, TaskWeights):
        row = np.array([weights[t] for t in tasks])
        return np.tile(row, (len(datasets), 1))
    return np.array([[weights[d][t] for t in tasks] for d in datasets], dtype=np.float64)


def _objective(w, b, data: ProbeData, wmat, lam):
    """Loss terms and gradient for raw parameter arrays."""
    gw = np.zeros_like(w)
    gb = np.zeros_like(b)
    data_term = 0.0
    scale = 1.0 / data.n_labelled if data.n_labelled else 0.0
    for d, (x, y) in enumerate(zip(data.x, data.y)):
        if x.shape[0] == 0:
            continue
        z = x @ w[d].T + b[d]
        present = y != MISSING
        target = (y == POS).astype(np.float64)
        cell_w = wmat[d] * present * scale
        # softplus(z) - y*z is the BCE of sigmoid(z) against y
        bce = np.logaddexp(0.0, z) - target * z
        data_term += float(np.sum(cell_w * bce))
        g = cell_w * (expit(z) - target)
        gw[d] = g.T @ x
        gb[d] = g.sum(axis=0)
    reg_term = 0.0
    if lam > 0:
        dev = w - w.mean(axis=0, keepdims=True)
        reg_term = float(lam * np.sum(dev * dev))
        gw += 2.0 * lam * dev
    return data_term, reg_term, gw, gb


def probe_objective(
    model: ProbeModel,
    features: FeatureSet | ProbeData,
    labels: Mapping[str, LabelSet] | None = None,
    weights: TaskWeights | Mapping[str, TaskWeights] | None = None,
    lam: float = 0.0,
) -> tuple[float, ProbeGradient]:
    """Weighted masked BCE over labelled cells plus the same-task alignment penalty.

    The data term is the task-weighted binary cross-entropy summed over every
    labelled (sample, task) cell and divided by the number of labelled cells;
    the penalty is ``lam * sum_t sum_d ||w_dt - mean_d' w_d't||^2``. Returns the
    loss and its exact gradient.
    """
    if lam < 0:
        raise ArgumentError("lambda must be non-negative")
    data = features if isinstance(features, ProbeData) else probe_data(
        features, labels or {}, model.datasets, model.tasks)
    if data.datasets != model.datasets or data.tasks != model.tasks:
        raise ShapeError("probe data and model disagree on datasets or tasks")
    if data.dim != model.dim:
        raise ShapeError(f"feature dimension {data.dim} does not match model dimension {model.dim}")
    wmat = _weight_matrix(weights, model.datasets, model.tasks)
    dt, rt, gw, gb = _objective(model.weights, model.bias, data, wmat, lam)
    return dt + rt, ProbeGradient(gw, gb)


@dataclass(frozen=True)
class TrainingTrace:
    rows: tuple[tuple[int, float, float, float], ...] = field(default_factory=tuple)
    converged: bool = False

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])

    @property
    def final_loss(self) -> float:
        return self.rows[-1][1]


def default_weights(data: ProbeData, use_task_weights: bool) -> dict[str, TaskWeights] | None:
    if not use_task_weights:
        return None
    return {
        d: task_weights((y == POS).sum(axis=0), data.tasks)
        for d, y in zip(data.datasets, data.y)
    }


def train_probe(
    config: ProbeConfig,
    features: FeatureSet,
    labels: Mapping[str, LabelSet],
) -> tuple[ProbeModel, TrainingTrace]:
    """Full-batch accelerated gradient descent with backtracking and restarts.

    Each step extrapolates along the previous update (Nesterov momentum), then
    halves the learning rate until the Armijo condition holds at the
    extrapolated point. If the result would raise the loss, the momentum is
    dropped and a plain gradient step is taken instead, so the logged loss is
    non-increasing. Task weights are computed per dataset from its positive
    counts when ``config.use_task_weights`` is set.
    """
    data = probe_data(features, labels, config.datasets, config.tasks)
    if data.dim != config.feature_dim:
        raise ShapeError(f"features have dimension {data.dim}, config says {config.feature_dim}")
    if data.n_labelled == 0:
        raise InsufficientSamples("no labelled cells to train on")
    wmat = _weight_matrix(default_weights(data, config.use_task_weights),
                          config.datasets, config.tasks)

    def evaluate(params, it):
        w, b = params
        dt, rt, gw, gb = _objective(w, b, data, wmat, config.lam)
        if not np.isfinite(dt + rt):
            raise TrainingError("loss diverged to a non-finite value", it)
        return dt + rt, dt, rt, (gw, gb)

    rng = np.random.default_rng(config.seed)
    n_d, n_t, dim = len(config.datasets), len(config.tasks), config.feature_dim
    x = (config.init_scale * rng.standard_normal((n_d, n_t, dim)), np.zeros((n_d, n_t)))
    x_prev = x
    loss, dt, rt, _ = evaluate(x, 0)
    rows = [(0, loss, dt, rt)]
    lr = config.learning_rate
    momentum_k = 1
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        beta = (momentum_k - 1.0) / (momentum_k + 2.0)
        y = tuple(a + beta * (a - p) for a, p in zip(x, x_prev))
        f_y, _, _, g_y = evaluate(y, it) if beta > 0 else (loss, dt, rt, evaluate(x, it)[3])
        g_sq = float(sum(np.sum(g * g) for g in g_y))
        if g_sq == 0.0:
            converged = True
            break
        for _ in range(80):
            z = tuple(a - lr * g for a, g in zip(y, g_y))
            f_z, dt_z, rt_z, _ = evaluate(z, it)
            if f_z <= f_y - 0.5 * lr * g_sq:
                break
            lr *= 0.5
        else:
            converged = True
            break
        if f_z > loss:
            # momentum overshot: restart from x without extrapolation
            momentum_k = 1
            x_prev = x
            continue
        improvement = loss - f_z
        x_prev, x = x, z
        loss, dt, rt = f_z, dt_z, rt_z
        momentum_k += 1
        lr *= 1.1
        if it % config.log_every == 0:
            rows.append((it, loss, dt, rt))
        if improvement <= config.tol * max(1.0, abs(loss)) and beta == 0:
            converged = True
            break
    if rows[-1][0] != it:
        rows.append((it, loss, dt, rt))
    return ProbeModel(config.datasets, config.tasks, *x), TrainingTrace(tuple(rows), converged)


def training_accuracy(model: ProbeModel, data: ProbeData) -> float:
    hits = total = 0
    for d, (x, y) in enumerate(zip(data.x, data.y)):
        z = x @ model.weights[d].T + model.bias[d]
        present = y != MISSING
        hits += int(np.count_nonzero(((z >= 0) == (y == POS)) & present))
        total += int(np.count_nonzero(present))
    return hits / total if total else float("nan")


# -- analysis of the weight vectors ----------------------------------------------------


@dataclass(frozen=True)
class ProjectionResult:
    components: np.ndarray  # k x D, orthonormal rows
    coordinates: np.ndarray  # n x k
    explained_variance: np.ndarray  # k
    mean: np.ndarray


def pca_project(vectors, k: int = 2) -> ProjectionResult:
    """Project vectors onto their top-``k`` principal directions.

    Components come from an SVD of the mean-centred data; each is signed so
    that its largest-magnitude coordinate is positive. Explained variance uses
    the ``n - 1`` denominator.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ArgumentError("PCA needs at least two vectors")
    n, dim = x.shape
    if not 1 <= k <= min(n - 1, dim):
        raise ArgumentError(f"k must be in [1, {min(n - 1, dim)}], got {k}")
    mean = x.mean(axis=0)
    centred = x - mean
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:k].copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    var = (s[:k] ** 2) / (n - 1)
    return ProjectionResult(comps, centred @ comps.T, var, mean)


@dataclass(frozen=True)
class DistanceSummary:
    tasks: tuple[str, ...]
    raw: Mapping[str, Mapping[str, float | None]]
    normalized: Mapping[str, Mapping[str, float | None]]

    @property
    def variants(self) -> tuple[str, ...]:
        return tuple(self.raw)


def mean_head_distance(model: ProbeModel, task: str) -> float | None:
    """Mean pairwise L2 distance between the dataset heads of one task (bias excluded)."""
    j = model.tasks.index(task)
    vecs = model.weights[:, j, :]
    pairs = list(itertools.combinations(range(vecs.shape[0]), 2))
    if not pairs:
        return None
    return float(np.mean([np.linalg.norm(vecs[a] - vecs[b]) for a, b in pairs]))


def weight_distance_summary(variants: Mapping[str, Sequence[ProbeModel]]) -> DistanceSummary:
    """Per-task head spread, averaged over seeds and scaled so the widest task is 1.

    ``variants`` maps a variant name (e.g. ``"unregularized"``) to the models
    trained with different seeds.
    """
    tasks: tuple[str, ...] | None = None
    raw, normalized = {}, {}
    for name, models in variants.items():
        if not models:
            raise ArgumentError(f"variant {name!r} has no models")
        if tasks is None:
            tasks = models[0].tasks
        per_task = {}
        for t in tasks:
            vals = [mean_head_distance(m, t) for m in models]
            per_task[t] = None if any(v is None for v in vals) else float(np.mean(vals))
        raw[name] = per_task
        top = max((v for v in per_task.values() if v is not None), default=None)
        normalized[name] = {
            t: (None if v is None else (v / top if top else 0.0)) for t, v in per_task.items()
        }
    return DistanceSummary(tasks or (), raw, normalized)


@dataclass(frozen=True)
class SimilarityReport:
    tasks: tuple[str, ...]
    distances: tuple[float, ...]
    cross_domain_auc: tuple[float, ...]
    rho: float | None


def cross_domain_auc(report: MatrixReport) -> dict[str, float]:
    """Mean AUC per task over cells whose test dataset the model was not trained on."""
    acc: dict[str, list[float]] = {}
    for i, model in enumerate(report.row_ids):
        train = set(report.row_meta.get(model, {}).get("train_domains", ()))
        for j, col in enumerate(report.col_ids):
            dataset, task = col.split("/", 1)
            v = report.values[i, j]
            if dataset in train or np.isnan(v):
                continue
            acc.setdefault(task, []).append(float(v))
    return {t: float(np.mean(v)) for t, v in acc.items()}


def similarity_vs_generalization(
    distances: Mapping[str, float | None], auc_report: MatrixReport
) -> SimilarityReport:
    """Spearman correlation between per-task head distance and cross-domain AUC."""
    aucs = cross_domain_auc(auc_report)
    tasks = tuple(t for t in distances if distances[t] is not None and t in aucs)
    if len(tasks) < 3:
        raise InsufficientSamples(f"need at least 3 tasks in common, found {len(tasks)}")
    d = tuple(float(distances[t]) for t in tasks)
    a = tuple(aucs[t] for t in tasks)
    return SimilarityReport(tasks, d, a, metrics.spearman(d, a))


# -- serialization ---------------------------------------------------------------------


def write_probe_csv(model: ProbeModel, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dataset", "task", "b", *(f"w{j}" for j in range(model.dim))])
        for i, d in enumerate(model.datasets):
            for j, t in enumerate(model.tasks):
                writer.writerow([d, t, repr(float(model.bias[i, j])),
                                 *(repr(float(v)) for v in model.weights[i, j])])


def read_probe_csv(path) -> ProbeModel:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:3] != ["dataset", "task", "b"]:
            raise DataError(f"{path}: probe CSV must start with dataset,task,b")
        rows = [r for r in reader if r]
    datasets = list(dict.fromkeys(r[0] for r in rows))
    tasks = list(dict.fromkeys(r[1] for r in rows))
    dim = len(header) - 3
    w = np.full((len(datasets), len(tasks), dim), np.nan)
    b = np.full((len(datasets), len(tasks)), np.nan)
    for r in rows:
        i, j = datasets.index(r[0]), tasks.index(r[1])
        b[i, j] = float(r[2])
        w[i, j] = [float(v) for v in r[3:]]
    if np.isnan(b).any():
        raise DataError(f"{path}: probe CSV does not list every (dataset, task) head")
    return ProbeModel(datasets, tasks, w, b)


def write_trace_csv(trace: TrainingTrace, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iter", "loss", "data_term", "reg_term"])
        for it, loss, dt, rt in trace.rows:
            writer.writerow([it, repr(loss), repr(dt), repr(rt)])
