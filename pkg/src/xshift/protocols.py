"""Experiment grids: cross-domain AUC, leave-one-domain-out, agreement, mining.

Every grid is assembled in sorted-key order, so reports are identical whatever
the number of worker threads (``XSHIFT_THREADS``).
"""

from __future__ import annotations

import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import metrics
from .data import (
    DEFAULT_TASKS,
    MISSING,
    NEG,
    POS,
    LabelSet,
    PredictionSet,
    align_samples,
    group_members,
)
from .errors import (
    ArgumentError,
    DataError,
    InsufficientSamples,
    MissingClass,
    MissingHead,
    MissingTask,
    NoValidCells,
)

MEMBER_MODES = ("ensemble", "per-member")


def worker_count(workers: int | None = None) -> int:
    if workers is not None:
        return max(1, int(workers))
    env = os.environ.get("XSHIFT_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ArgumentError(f"XSHIFT_THREADS must be an integer, got {env!r}") from None
    return min(4, os.cpu_count() or 1)


def parallel_map(fn: Callable, items: Sequence, workers: int | None) -> list:
    n = worker_count(workers)
    if n == 1 or len(items) < 2:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def task_order(tasks: Iterable[str]) -> list[str]:
    """Canonical tasks first in vocabulary order, then the rest alphabetically."""
    tasks = set(tasks)
    known = [t for t in DEFAULT_TASKS if t in tasks]
    return known + sorted(tasks - set(known))


@dataclass(frozen=True)
class MatrixReport:
    """A grid of metric values; NaN cells are EMPTY and carry a reason."""

    metric: str
    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]
    values: np.ndarray
    reasons: Mapping[tuple[str, str], str] = field(default_factory=dict)
    metadata: Mapping[str, object] = field(default_factory=dict)
    row_meta: Mapping[str, Mapping] = field(default_factory=dict)

    def get(self, row: str, col: str) -> float | None:
        v = self.values[self.row_ids.index(row), self.col_ids.index(col)]
        return None if math.isnan(v) else float(v)

    def is_empty(self, row: str, col: str) -> bool:
        return self.get(row, col) is None

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(~np.isnan(self.values)))


class _SingleSeed(InsufficientSamples):
    pass


def _reason(exc: Exception) -> str:
    if isinstance(exc, _SingleSeed):
        return "single-seed"
    if isinstance(exc, MissingHead):
        return "missing-head"
    if isinstance(exc, MissingTask):
        return "missing-task"
    if isinstance(exc, MissingClass):
        return "single-class"
    raise exc


def _build_report(metric, rows, cols, cell_fn, workers, **kw) -> MatrixReport:
    keys = [(r, c) for r in rows for c in cols]

    def run(key):
        try:
            return cell_fn(*key), None
        except (MissingHead, MissingTask, MissingClass, _SingleSeed) as exc:
            return math.nan, _reason(exc)

    results = parallel_map(run, keys, workers)
    values = np.array([v for v, _ in results], dtype=np.float64).reshape(len(rows), len(cols))
    reasons = {k: why for k, (_, why) in zip(keys, results) if why is not None}
    values.setflags(write=False)
    return MatrixReport(metric, tuple(rows), tuple(cols), values, reasons, **kw)


# -- calibration of (ensembles of) prediction sets -----------------------------------


def _check_dataset(members: Sequence[PredictionSet], labels: LabelSet):
    for m in members:
        if m.eval_dataset_id != labels.dataset_id:
            raise DataError(
                f"prediction set {m.key} evaluates {m.eval_dataset_id!r}, "
                f"labels belong to {labels.dataset_id!r}"
            )


def operating_points(members: Sequence[PredictionSet], labels: LabelSet, task: str):
    """Informedness-optimal operating point of each member on ``labels``.

    Raises ``MissingHead``, ``MissingTask`` or ``MissingClass`` when the cell
    cannot be computed.
    """
    if not members:
        raise MissingHead("no prediction sets")
    _check_dataset(members, labels)
    for m in members:
        if not m.has_head(task):
            raise MissingHead(f"{m.model_id!r} has no output for {task!r}")
    col = labels.column(task)
    if not labels.has_task(task) or not np.any(col != MISSING):
        raise MissingTask(f"{labels.dataset_id!r} has no labels for {task!r}")
    ops = []
    for m in members:
        al = align_samples(m, labels)
        s = m.column(task)[al.left]
        y = col[al.right]
        keep = ~np.isnan(s) & (y != MISSING)
        if not keep.any():
            raise MissingClass(f"no labelled samples for {m.key} on {task!r}")
        ops.append(metrics.optimal_operating_point(s[keep], y[keep] == POS))
    return ops


def calibrated_members(members: Sequence[PredictionSet], labels: LabelSet, task: str):
    """Per-member calibrated scores on the samples every member covers.

    Returns ``(sample_ids, matrix)`` with one row per member; unscored cells are NaN.
    """
    ops = operating_points(members, labels, task)
    common = set(members[0].sample_ids)
    for m in members[1:]:
        common &= set(m.sample_ids)
    ids = tuple(sorted(common))
    rows = []
    for m, op in zip(members, ops):
        al = align_samples(ids, m)
        rows.append(metrics.calibrate(m.column(task)[al.right], op))
    return ids, np.vstack(rows) if rows else np.empty((0, 0))


def calibrated_ensemble(members: Sequence[PredictionSet], labels: LabelSet, task: str):
    """Mean of the members' calibrated scores, as ``(sample_ids, scores)``."""
    ids, mat = calibrated_members(members, labels, task)
    return ids, mat.mean(axis=0)


def _labelled(ids, scores, labels: LabelSet, task: str):
    al = align_samples(ids, labels)
    s = np.asarray(scores)[al.left]
    y = labels.column(task)[al.right]
    keep = ~np.isnan(s) & (y != MISSING)
    return s[keep], y[keep] == POS


def auc_cell(members: Sequence[PredictionSet], labels: LabelSet, task: str) -> float:
    """AUC of the calibrated-then-averaged ensemble on one (test set, task)."""
    ids, ens = calibrated_ensemble(members, labels, task)
    s, y = _labelled(ids, ens, labels, task)
    return metrics.auc(s, y)


def _model_meta(preds: Sequence[PredictionSet]) -> dict[str, dict]:
    meta: dict[str, dict] = {}
    for p in preds:
        entry = meta.setdefault(p.model_id, {"train_domains": sorted(p.train_domains), "seeds": set()})
        if entry["train_domains"] != sorted(p.train_domains):
            raise DataError(f"model {p.model_id!r} has inconsistent train_domains")
        entry["seeds"].add(p.seed)
    return {k: {"train_domains": v["train_domains"], "seeds": sorted(v["seeds"])}
            for k, v in sorted(meta.items())}


def auc_matrix(
    predictions: Sequence[PredictionSet],
    labels: Mapping[str, LabelSet],
    *,
    tasks: Iterable[str] | None = None,
    workers: int | None = None,
) -> MatrixReport:
    """Models x (test dataset, task) AUC grid.

    Columns are ``"<dataset>/<task>"`` for every dataset with labels and every
    task the dataset labels or some model predicts. Unavailable combinations
    are EMPTY with reason ``missing-head``, ``missing-task`` or ``single-class``.
    """
    groups = group_members(predictions)
    models = sorted({m for m, _ in groups})
    if tasks is None:
        tasks = {t for ls in labels.values() for t in ls.tasks}
        tasks |= {t for p in predictions for t in p.tasks}
    tasks = task_order(tasks)
    cols = [f"{d}/{t}" for d in sorted(labels) for t in tasks]

    def cell(model, col):
        dataset, task = col.split("/", 1)
        members = groups.get((model, dataset))
        if not members:
            raise MissingHead(f"{model!r} was not evaluated on {dataset!r}")
        return auc_cell(members, labels[dataset], task)

    report = _build_report(
        "auc", models, cols, cell, workers,
        metadata={"calibration": "per-member operating point on test set; calibrated mean"},
        row_meta=_model_meta(predictions),
    )
    if report.n_valid == 0:
        raise NoValidCells("no (model, dataset, task) combination could be evaluated")
    return report


# -- leave one domain out -------------------------------------------------------------

LOO_CONDITIONS = ("self-only", "all-except", "all-including")


def classify_condition(train_domains: Iterable[str], test_dataset: str) -> str | None:
    train = set(train_domains)
    if train == {test_dataset}:
        return "self-only"
    if len(train) >= 2:
        return "all-including" if test_dataset in train else "all-except"
    return None


@dataclass(frozen=True)
class LooCondition:
    condition: str
    mean: float
    std: float | None
    runs: tuple[tuple[str, int, float], ...]
    per_task: Mapping[str, float]

    @property
    def n_runs(self) -> int:
        return len(self.runs)


@dataclass(frozen=True)
class LooReport:
    datasets: tuple[str, ...]
    conditions: Mapping[str, Mapping[str, LooCondition]]
    tasks_used: Mapping[str, tuple[str, ...]]
    ignored: tuple[tuple[str, int, str, str], ...]

    def gap(self, high: str = "all-including", low: str = "all-except") -> float:
        """Mean over test datasets of ``mean(high) - mean(low)``."""
        diffs = [
            c[high].mean - c[low].mean
            for c in self.conditions.values()
            if high in c and low in c
        ]
        if not diffs:
            raise InsufficientSamples(f"no test dataset has both {high!r} and {low!r}")
        return float(np.mean(diffs))


def loo_summary(
    predictions: Sequence[PredictionSet],
    labels: Mapping[str, LabelSet],
    *,
    workers: int | None = None,
) -> LooReport:
    """Self-only / all-except / all-including comparison per test dataset.

    Each prediction set (one seed) is a run; a run's score is its mean AUC over
    the tasks that every run on that test set can be scored on.
    """
    ignored = []
    by_dataset: dict[str, list[tuple[str, PredictionSet]]] = {}
    for p in sorted(predictions, key=lambda p: p.key):
        if p.eval_dataset_id not in labels:
            ignored.append((p.model_id, p.seed, p.eval_dataset_id, "no labels for test dataset"))
            continue
        cond = classify_condition(p.train_domains, p.eval_dataset_id)
        if cond is None:
            reason = "trained on a single foreign domain" if p.train_domains else "no train domains"
            ignored.append((p.model_id, p.seed, p.eval_dataset_id, reason))
            continue
        by_dataset.setdefault(p.eval_dataset_id, []).append((cond, p))

    conditions, tasks_used = {}, {}
    for dataset in sorted(by_dataset):
        runs = by_dataset[dataset]
        ls = labels[dataset]
        tasks = task_order({t for _, p in runs for t in p.tasks} & set(ls.tasks))

        def run_aucs(item, ls=ls, tasks=tasks):
            _, p = item
            out = {}
            for t in tasks:
                try:
                    out[t] = auc_cell([p], ls, t)
                except (MissingHead, MissingTask, MissingClass):
                    pass
            return out

        aucs = parallel_map(run_aucs, runs, workers)
        kept = tuple(t for t in tasks if all(t in a for a in aucs))
        if not kept:
            for _, p in runs:
                ignored.append((p.model_id, p.seed, dataset, "no task scorable by every run"))
            continue
        tasks_used[dataset] = kept
        conds = {}
        for name in LOO_CONDITIONS:
            sel = [(p, a) for (c, p), a in zip(runs, aucs) if c == name]
            if not sel:
                continue
            run_means = [float(np.mean([a[t] for t in kept])) for _, a in sel]
            conds[name] = LooCondition(
                condition=name,
                mean=float(np.mean(run_means)),
                std=float(np.std(run_means, ddof=1)) if len(run_means) >= 2 else None,
                runs=tuple((p.model_id, p.seed, m) for (p, _), m in zip(sel, run_means)),
                per_task={t: float(np.mean([a[t] for _, a in sel])) for t in kept},
            )
        conditions[dataset] = conds
    return LooReport(tuple(sorted(conditions)), conditions, tasks_used, tuple(ignored))


# -- agreement ------------------------------------------------------------------------


def pair_id(a: str, b: str) -> str:
    a, b = sorted((a, b))
    return f"{a}|{b}"


def _decisions(members, labels, task, members_mode):
    ids, mat = calibrated_members(members, labels, task)
    if members_mode == "ensemble":
        mat = mat.mean(axis=0, keepdims=True)
    return ids, mat


def _pair_kappa(dec_a, dec_b) -> float:
    ids_a, mat_a = dec_a
    ids_b, mat_b = dec_b
    al = align_samples(ids_a, ids_b)
    if len(al) == 0:
        raise MissingClass("models share no samples")
    values = []
    for row_a in mat_a:
        for row_b in mat_b:
            sa = row_a[al.left]
            sb = row_b[al.right]
            keep = ~np.isnan(sa) & ~np.isnan(sb)
            if not keep.any():
                raise MissingClass("models share no scored samples")
            values.append(metrics.cohen_kappa(
                metrics.decisions(sa[keep]), metrics.decisions(sb[keep])).kappa)
    return float(np.mean(values))


def kappa_matrix(
    testset: LabelSet,
    predictions: Sequence[PredictionSet],
    *,
    tasks: Iterable[str] | None = None,
    members_mode: str = "ensemble",
    workers: int | None = None,
) -> MatrixReport:
    """Pairwise Cohen's kappa between models on one test set.

    Rows are unordered model pairs ``"a|b"``; columns are tasks. Each model is
    calibrated on ``testset`` and thresholded at 0.5. With ``members_mode`` set to
    ``"per-member"`` the kappa is averaged over all cross-member pairs instead of
    using the ensemble's decision.
    """
    if members_mode not in MEMBER_MODES:
        raise ArgumentError(f"members_mode must be one of {MEMBER_MODES}")
    preds = [p for p in predictions if p.eval_dataset_id == testset.dataset_id]
    groups = {m: g for (m, _), g in group_members(preds).items()}
    models = sorted(groups)
    if tasks is None:
        tasks = set(testset.tasks) | {t for p in preds for t in p.tasks}
    tasks = task_order(tasks)
    pairs = list(itertools.combinations(models, 2))
    rows = [pair_id(a, b) for a, b in pairs]

    cache: dict[tuple[str, str], object] = {}

    def decisions_of(model, task):
        key = (model, task)
        if key not in cache:
            try:
                cache[key] = _decisions(groups[model], testset, task, members_mode)
            except (MissingHead, MissingTask, MissingClass) as exc:
                cache[key] = exc
        if isinstance(cache[key], Exception):
            raise cache[key]
        return cache[key]

    # decisions are computed up front so worker threads only read the cache
    for m in models:
        for t in tasks:
            try:
                decisions_of(m, t)
            except (MissingHead, MissingTask, MissingClass):
                pass

    def cell(row, task):
        a, b = row.split("|")
        return _pair_kappa(decisions_of(a, task), decisions_of(b, task))

    return _build_report(
        "kappa", rows, tasks, cell, workers,
        metadata={"testset": testset.dataset_id, "members_mode": members_mode,
                  "decision": "calibrated score >= 0.5"},
        row_meta=_model_meta(preds),
    )


def kappa_lookup(report: MatrixReport, a: str, b: str, task: str) -> float | None:
    if a == b:
        return 1.0
    return report.get(pair_id(a, b), task)


def seed_agreement(
    predictions: Sequence[PredictionSet],
    labels: Mapping[str, LabelSet],
    *,
    tasks: Iterable[str] | None = None,
    workers: int | None = None,
) -> MatrixReport:
    """Mean pairwise kappa between seeds of the same model on the same test set.

    Rows are ``"<model>@<dataset>"``; rows with a single seed are EMPTY
    (reason ``single-seed``).
    """
    groups = {k: g for k, g in group_members(predictions).items() if k[1] in labels}
    rows = [f"{m}@{d}" for m, d in sorted(groups)]
    if tasks is None:
        tasks = {t for p in predictions for t in p.tasks}
    tasks = task_order(tasks)

    def cell(row, task):
        model, dataset = row.rsplit("@", 1)
        members = groups[(model, dataset)]
        if len(members) < 2:
            raise _SingleSeed(f"{row} has a single seed")
        ids, mat = calibrated_members(members, labels[dataset], task)
        values = []
        for i, j in itertools.combinations(range(len(members)), 2):
            keep = ~np.isnan(mat[i]) & ~np.isnan(mat[j])
            values.append(metrics.cohen_kappa(
                metrics.decisions(mat[i][keep]), metrics.decisions(mat[j][keep])).kappa)
        return float(np.mean(values))

    return _build_report("seed-kappa", rows, tasks, cell, workers,
                         metadata={"decision": "calibrated score >= 0.5"},
                         row_meta=_model_meta(predictions))


def relabel_agreement(
    labels_a: LabelSet,
    labels_b: LabelSet,
    task_pairing: Mapping[str, str] | None = None,
) -> dict[tuple[str, str], metrics.AgreementTable]:
    """Confusion/F1 between two labelings of overlapping samples, ``labels_a`` as reference.

    Only samples labelled (non-MISSING) by both sources enter each table. The
    default pairing matches task names present in both label sets.
    """
    al = align_samples(labels_a, labels_b)
    if len(al) == 0:
        raise InsufficientSamples(
            f"{labels_a.dataset_id!r} and {labels_b.dataset_id!r} share no samples"
        )
    if task_pairing is None:
        task_pairing = {t: t for t in labels_a.tasks if t in labels_b.tasks}
    out = {}
    for ta, tb in task_pairing.items():
        if not labels_a.has_task(ta):
            raise MissingTask(f"{labels_a.dataset_id!r} has no task {ta!r}")
        if not labels_b.has_task(tb):
            raise MissingTask(f"{labels_b.dataset_id!r} has no task {tb!r}")
        ya = labels_a.column(ta)[al.left]
        yb = labels_b.column(tb)[al.right]
        keep = (ya != MISSING) & (yb != MISSING)
        out[(ta, tb)] = metrics.confusion_f1(ya[keep] == POS, yb[keep] == POS)
    return out


# -- Bland-Altman and disagreement mining ----------------------------------------------


def _as_members(pred) -> list[PredictionSet]:
    return [pred] if isinstance(pred, PredictionSet) else list(pred)


def paired_calibrated(pred_a, pred_b, labels: LabelSet, task: str):
    """Calibrated ensemble outputs of two models on their common scored samples."""
    ids_a, sa = calibrated_ensemble(_as_members(pred_a), labels, task)
    ids_b, sb = calibrated_ensemble(_as_members(pred_b), labels, task)
    al = align_samples(ids_a, ids_b)
    sa = sa[al.left]
    sb = sb[al.right]
    keep = ~np.isnan(sa) & ~np.isnan(sb)
    return tuple(np.array(al.sample_ids)[keep].tolist()), sa[keep], sb[keep]


def bland_altman_pair(pred_a, pred_b, labels: LabelSet, task: str) -> metrics.BlandAltmanSummary:
    _, sa, sb = paired_calibrated(pred_a, pred_b, labels, task)
    return metrics.bland_altman(sa, sb)


@dataclass(frozen=True)
class DisagreementCase:
    sample_id: str
    score_a: float
    score_b: float
    label_states: Mapping[str, int]
    rank_key: float

    @property
    def higher(self) -> str:
        if self.score_a > self.score_b:
            return "a"
        return "b" if self.score_b > self.score_a else "tie"


_FILTERS = {"pos": POS, "neg": NEG, "missing": MISSING}


def mine_disagreements(
    pred_a,
    pred_b,
    labels: LabelSet | Sequence[LabelSet],
    task: str,
    label_filter: int | str | None = None,
    k: int = 10,
) -> list[DisagreementCase]:
    """Top-``k`` samples by absolute difference of the two calibrated outputs.

    ``labels`` may be several label sources for the same images; the first one
    calibrates both models and is the one ``label_filter`` applies to. Ties in
    the rank key are broken by ascending sample_id, so a larger ``k`` only
    extends the list.
    """
    if k <= 0:
        raise ArgumentError(f"k must be positive, got {k}")
    sources = [labels] if isinstance(labels, LabelSet) else list(labels)
    ref = sources[0]
    if isinstance(label_filter, str):
        try:
            label_filter = _FILTERS[label_filter.lower()]
        except KeyError:
            raise ArgumentError(f"label filter must be one of {sorted(_FILTERS)}") from None

    ids, sa, sb = paired_calibrated(pred_a, pred_b, ref, task)
    states = {}
    for src in sources:
        al = align_samples(ids, src)
        col = np.full(len(ids), MISSING, dtype=np.int8)
        col[al.left] = src.column(task)[al.right]
        states[src.dataset_id] = col

    keep = np.ones(len(ids), dtype=bool)
    if label_filter is not None:
        keep = states[ref.dataset_id] == label_filter
    idx = np.flatnonzero(keep)
    diff = np.abs(sa - sb)
    order = sorted(idx, key=lambda i: (-diff[i], ids[i]))[:k]
    return [
        DisagreementCase(
            sample_id=ids[i],
            score_a=float(sa[i]),
            score_b=float(sb[i]),
            label_states={name: int(col[i]) for name, col in states.items()},
            rank_key=float(diff[i]),
        )
        for i in order
    ]
