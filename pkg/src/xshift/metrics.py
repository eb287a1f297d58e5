"""Statistical primitives: AUC, operating points, calibration, agreement."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import (
    DegenerateOperatingPoint,
    EmptyEnsemble,
    InsufficientSamples,
    MissingClass,
    ShapeError,
)

CLAMP = 1e-6


def _binary(labels, name="labels"):
    y = np.asarray(labels)
    if y.ndim != 1:
        raise ShapeError(f"{name} must be one-dimensional")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ShapeError(f"{name} must be binary (0/1)")
    return y.astype(bool)


def _scores_labels(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = _binary(labels)
    if s.shape != y.shape:
        raise ShapeError(f"scores {s.shape} and labels {y.shape} differ in shape")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise MissingClass("labels need at least one positive and one negative")
    return s, y


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    tpr: np.ndarray
    fpr: np.ndarray


@dataclass(frozen=True)
class OperatingPoint:
    opt: float
    informedness: float
    clamped: bool = False


@dataclass(frozen=True)
class KappaResult:
    kappa: float
    p_o: float
    p_e: float
    degenerate: bool = False


@dataclass(frozen=True)
class AgreementTable:
    tp: int
    fp: int
    fn: int
    tn: int
    f1: float | None

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class BlandAltmanSummary:
    means: np.ndarray
    differences: np.ndarray
    bias: float
    loa_low: float
    loa_high: float

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.means.tolist(), self.differences.tolist()))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC with midrank tie correction.

    Equals the probability that a random positive outscores a random negative,
    counting ties as one half. Raises ``MissingClass`` for single-class labels.
    """
    s, y = _scores_labels(scores, labels)
    ranks = rankdata(s)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_table(s, y):
    """Distinct thresholds (descending) with TP/FP counts for rule ``score >= t``."""
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # last index of each run of equal scores
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    return s_sorted[last], tp[last], fp[last]


def roc_curve(scores, labels) -> RocCurve:
    s, y = _scores_labels(scores, labels)
    thr, tp, fp = _threshold_table(s, y)
    n_pos = y.sum()
    n_neg = y.size - n_pos
    return RocCurve(
        thresholds=np.r_[np.inf, thr],
        tpr=np.r_[0.0, tp / n_pos],
        fpr=np.r_[0.0, fp / n_neg],
    )


def optimal_operating_point(scores, labels) -> OperatingPoint:
    """Threshold maximizing informedness (TPR - FPR) for the rule ``score >= t``.

    Candidates are the distinct observed scores plus an all-negative sentinel
    above the maximum. Among maximizers the smallest threshold wins. The result
    is clamped into ``[1e-6, 1 - 1e-6]`` so that it can feed :func:`calibrate`.
    """
    s, y = _scores_labels(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    thr, tp, fp = _threshold_table(s, y)
    thresholds = np.r_[np.inf, thr]
    # J scaled by n_pos * n_neg stays integral, so ties are exact
    j_num = np.r_[0, tp.astype(np.int64) * n_neg - fp.astype(np.int64) * n_pos]
    # thresholds are descending, so the last maximizer is the smallest one
    k = int(np.flatnonzero(j_num == j_num.max())[-1])
    opt = float(thresholds[k])
    clamped_opt = min(max(opt, CLAMP), 1.0 - CLAMP)
    return OperatingPoint(
        opt=clamped_opt,
        informedness=float(j_num[k]) / (n_pos * n_neg),
        clamped=clamped_opt != opt,
    )


def calibrate(x, op: OperatingPoint | float):
    """Piecewise-linear map sending 0 -> 0, ``opt`` -> 0.5 and 1 -> 1.

    Accepts a scalar or an array; NaN passes through.
    """
    opt = op.opt if isinstance(op, OperatingPoint) else float(op)
    if not 0.0 < opt < 1.0:
        raise DegenerateOperatingPoint(f"operating point {opt!r} is outside (0, 1)")
    x_arr = np.asarray(x, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        out = np.where(
            x_arr <= opt,
            x_arr / (2.0 * opt),
            1.0 - (1.0 - x_arr) / (2.0 * (1.0 - opt)),
        )
    return float(out) if out.ndim == 0 else out


def ensemble_calibrated(member_scores: Sequence, member_ops: Sequence[OperatingPoint]):
    """Average of the members' individually calibrated scores."""
    if len(member_scores) == 0:
        raise EmptyEnsemble("ensemble has no members")
    if len(member_scores) != len(member_ops):
        raise ShapeError(
            f"{len(member_scores)} member score lists but {len(member_ops)} operating points"
        )
    stacked = np.stack([np.asarray(calibrate(s, op)) for s, op in zip(member_scores, member_ops)])
    out = stacked.mean(axis=0)
    return float(out) if out.ndim == 0 else out


def decisions(calibrated) -> np.ndarray:
    """Binary decisions of calibrated scores at the 0.5 operating point."""
    return np.asarray(calibrated) >= 0.5


def cohen_kappa(a, b) -> KappaResult:
    a = _binary(a, "a")
    b = _binary(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"rater lengths differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise InsufficientSamples("kappa needs at least one rating")
    n = int(a.size)
    agree = int(np.count_nonzero(a == b))
    a1, b1 = int(np.count_nonzero(a)), int(np.count_nonzero(b))
    # chance agreement scaled by n^2; integer arithmetic keeps the ratio correctly rounded
    chance = a1 * b1 + (n - a1) * (n - b1)
    p_o = agree / n
    if chance == n * n:
        return KappaResult(kappa=1.0, p_o=p_o, p_e=1.0, degenerate=True)
    return KappaResult(kappa=(agree * n - chance) / (n * n - chance), p_o=p_o, p_e=chance / (n * n))


def confusion_f1(reference, comparison) -> AgreementTable:
    """Confusion counts and F1 of ``comparison`` against ``reference``."""
    r = _binary(reference, "reference")
    c = _binary(comparison, "comparison")
    if r.shape != c.shape:
        raise ShapeError(f"label lengths differ: {r.size} vs {c.size}")
    tp = int(np.count_nonzero(r & c))
    fp = int(np.count_nonzero(~r & c))
    fn = int(np.count_nonzero(r & ~c))
    tn = int(np.count_nonzero(~r & ~c))
    denom = 2 * tp + fp + fn
    return AgreementTable(tp, fp, fn, tn, f1=(2 * tp / denom) if denom else None)


def bland_altman(a, b) -> BlandAltmanSummary:
    """Per-sample mean/difference pairs with bias and 1.96-SD limits of agreement."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError("Bland-Altman inputs must be equal-length vectors")
    if a.size < 2:
        raise InsufficientSamples("Bland-Altman needs at least two paired samples")
    diff = a - b
    bias = float(diff.mean())
    sd = float(diff.std(ddof=1))
    return BlandAltmanSummary((a + b) / 2.0, diff, bias, bias - 1.96 * sd, bias + 1.96 * sd)


def rater_disagreement(ratings) -> float:
    """Fraction of items on which a panel of raters is not unanimous.

    ``ratings`` is items x raters; NaN entries (unrated) are ignored, items
    with fewer than two ratings are skipped.
    """
    r = np.asarray(ratings, dtype=np.float64)
    if r.ndim != 2:
        raise ShapeError("ratings must be an items x raters matrix")
    rated = ~np.isnan(r)
    usable = rated.sum(axis=1) >= 2
    if not usable.any():
        raise InsufficientSamples("no item has two or more ratings")
    lo = np.where(rated, r, np.inf).min(axis=1)
    hi = np.where(rated, r, -np.inf).max(axis=1)
    return float(np.mean(lo[usable] != hi[usable]))


def spearman(x, y) -> float | None:
    """Spearman rank correlation with average ranks; ``None`` if a side is constant."""
    rx = rankdata(np.asarray(x, dtype=np.float64))
    ry = rankdata(np.asarray(y, dtype=np.float64))
    if rx.shape != ry.shape:
        raise ShapeError("rank correlation inputs differ in length")
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        return None
    return float((rx * ry).sum() / denom)
