"""Slow, obviously-correct reference implementations used as test oracles."""

import itertools
import math

import numpy as np


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def best_threshold(scores, labels):
    """Exhaustive scan: every distinct score plus +inf; smallest maximizer wins.

    Informedness is compared as exact fractions via integer cross-multiplication.
    """
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = len(labels) - n_pos
    best = None
    for t in sorted(set(scores)) + [math.inf]:
        tp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 1)
        fp = sum(1 for s, y in zip(scores, labels) if s >= t and y == 0)
        j = tp * n_neg - fp * n_pos
        if best is None or j > best[0]:
            best = (j, t)
    return best[1], best[0] / (n_pos * n_neg)


def calibrate_scalar(x, opt):
    if x <= opt:
        return x / (2 * opt)
    return 1 - (1 - x) / (2 * (1 - opt))


def kappa_table(a, b):
    n = len(a)
    agree = sum(1 for x, y in zip(a, b) if x == y)
    pa = sum(a) / n
    pb = sum(b) / n
    p_e = pa * pb + (1 - pa) * (1 - pb)
    return (agree / n - p_e) / (1 - p_e)


def ranks(values):
    """Average ranks (1-based) by explicit grouping of ties."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    out = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            out[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return out


def pearson(x, y):
    mx = sum(x) / len(x)
    my = sum(y) / len(y)
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def mean_pair_distance(vectors):
    pairs = list(itertools.combinations(range(len(vectors)), 2))
    return sum(math.dist(vectors[a], vectors[b]) for a, b in pairs) / len(pairs)


def covariance_pca(x, k):
    """Top-k eigenpairs of the explicit sample covariance."""
    x = np.asarray(x, dtype=float)
    c = x - x.mean(axis=0)
    cov = c.T @ c / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:k]
    return vals[order], vecs[:, order].T


def probe_loss(w, b, x_by_ds, y_by_ds, weights, lam):
    """Direct loop over every labelled cell plus the centroid penalty."""
    total, cells = 0.0, 0
    n_ds, n_t, _ = w.shape
    for d in range(n_ds):
        for i in range(x_by_ds[d].shape[0]):
            for t in range(n_t):
                y = y_by_ds[d][i, t]
                if y < 0:
                    continue
                z = float(x_by_ds[d][i] @ w[d, t] + b[d, t])
                # numerically stable log(1 + exp(z)) - y z
                total += weights[d][t] * (max(z, 0) + math.log1p(math.exp(-abs(z))) - y * z)
                cells += 1
    data = total / cells if cells else 0.0
    reg = 0.0
    for t in range(n_t):
        centroid = w[:, t].mean(axis=0)
        reg += sum(float(np.sum((w[d, t] - centroid) ** 2)) for d in range(n_ds))
    return data + lam * reg
