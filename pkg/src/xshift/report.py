"""Report emission: CSV/JSON tables (canonical) and SVG figures (derived).

Numbers in CSV tables and the ``values`` fields of JSON documents carry six
significant digits; JSON ``raw`` fields keep full precision. Figures are drawn
with a fixed SVG hash salt and no date stamp, so repeated runs write identical
bytes.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib
import numpy as np
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from . import __version__
from .errors import DataError

matplotlib.rcParams["svg.hashsalt"] = "xshift"
matplotlib.rcParams["svg.fonttype"] = "none"

SIG_DIGITS = 6
EMPTY_COLOR = "white"


def fmt(x) -> str:
    """Six-significant-digit rendering; ``None``/NaN become an empty cell."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return ""
        return format(x, f".{SIG_DIGITS}g")
    return str(x)


def rounded(x):
    """The value a reader recovers from :func:`fmt`."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return None
    return float(format(float(x), f".{SIG_DIGITS}g"))


def _raw(x):
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) else x


def run_meta(manifest=None, **extra) -> dict:
    meta = {"tool": "xshift", "version": __version__}
    if manifest is not None:
        meta["manifest_sha256"] = manifest.digest
    meta.update({k: v for k, v in extra.items() if v is not None})
    return meta


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty report")
        return header, [r for r in reader if r]


def write_json(path, doc: Mapping):
    text = json.dumps(doc, indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def parse_number(cell: str) -> float | None:
    return None if cell == "" else float(cell)


# -- matrix reports -----------------------------------------------------------------------


def write_matrix_csv(report, path):
    rows = ([r, *report.values[i]] for i, r in enumerate(report.row_ids))
    write_csv(path, ["row", *report.col_ids], rows)


def read_matrix_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    header, rows = read_csv(path)
    if not header or header[0] != "row":
        raise DataError(f"{path}: matrix CSV must start with a 'row' column")
    values = np.array(
        [[math.nan if c == "" else float(c) for c in r[1:]] for r in rows], dtype=np.float64
    ).reshape(len(rows), len(header) - 1)
    return [r[0] for r in rows], header[1:], values


def matrix_doc(report, meta: Mapping) -> dict:
    return {
        "meta": {**meta, **{k: v for k, v in report.metadata.items()}},
        "metric": report.metric,
        "rows": list(report.row_ids),
        "cols": list(report.col_ids),
        "values": [[rounded(v) for v in row] for row in report.values.tolist()],
        "raw": [[_raw(v) for v in row] for row in report.values.tolist()],
        "empty": [
            {"row": r, "col": c, "reason": why} for (r, c), why in sorted(report.reasons.items())
        ],
        "row_meta": {k: dict(v) for k, v in sorted(report.row_meta.items())},
    }


def matrix_from_doc(doc: Mapping) -> tuple[list[str], list[str], np.ndarray]:
    raw = [[math.nan if v is None else v for v in row] for row in doc["raw"]]
    values = np.array(raw, dtype=np.float64).reshape(len(doc["rows"]), len(doc["cols"]))
    return doc["rows"], doc["cols"], values


def write_matrix(report, out_dir, stem: str, meta: Mapping, title: str = "") -> list[Path]:
    out = Path(out_dir)
    paths = [out / f"{stem}.csv", out / f"{stem}.json", out / f"{stem}.svg"]
    write_matrix_csv(report, paths[0])
    write_json(paths[1], matrix_doc(report, meta))
    heatmap_svg(report.values, report.row_ids, report.col_ids, paths[2],
                title=title or report.metric)
    return paths


# -- figures ---------------------------------------------------------------------------


def _save(fig: Figure, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def heatmap_svg(values, row_ids, col_ids, path, *, title="", vmin=None, vmax=None, cmap="viridis"):
    """Grid of coloured cells; EMPTY (NaN) cells stay white and get an ``empty-r-c`` gid."""
    values = np.asarray(values, dtype=np.float64)
    n_rows, n_cols = values.shape
    finite = values[~np.isnan(values)]
    if vmin is None:
        vmin = float(finite.min()) if finite.size else 0.0
    if vmax is None:
        vmax = float(finite.max()) if finite.size else 1.0
    lo, hi = vmin, vmax
    if hi <= lo:
        hi = lo + 1.0
    colormap = matplotlib.colormaps[cmap]

    fig = Figure(figsize=(1.2 + 0.9 * n_cols, 1.2 + 0.45 * n_rows))
    ax = fig.add_subplot()
    for i in range(n_rows):
        for j in range(n_cols):
            v = values[i, j]
            y = n_rows - 1 - i
            if math.isnan(v):
                cell = Rectangle((j, y), 1, 1, facecolor=EMPTY_COLOR, edgecolor="0.8",
                                 gid=f"empty-{i}-{j}")
                ax.add_patch(cell)
                continue
            rgba = colormap((v - lo) / (hi - lo))
            ax.add_patch(Rectangle((j, y), 1, 1, facecolor=rgba, edgecolor="white",
                                   gid=f"cell-{i}-{j}"))
            shade = 0.299 * rgba[0] + 0.587 * rgba[1] + 0.114 * rgba[2]
            ax.text(j + 0.5, y + 0.5, format(v, ".2f"), ha="center", va="center", fontsize=7,
                    color="black" if shade > 0.5 else "white")
    ax.set_xlim(0, n_cols)
    ax.set_ylim(0, n_rows)
    ax.set_xticks(np.arange(n_cols) + 0.5)
    ax.set_xticklabels(col_ids, rotation=60, ha="right", fontsize=7)
    ax.set_yticks(np.arange(n_rows) + 0.5)
    ax.set_yticklabels(list(reversed(row_ids)), fontsize=7)
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def scatter_svg(x, y, labels, path, *, xlabel="", ylabel="", title="", groups=None):
    fig = Figure(figsize=(5, 4))
    ax = fig.add_subplot()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if groups is None:
        ax.scatter(x, y, s=18)
    else:
        groups = list(groups)
        for g in sorted(set(groups)):
            idx = [i for i, v in enumerate(groups) if v == g]
            ax.scatter(x[idx], y[idx], s=18, label=g)
        ax.legend(fontsize=6)
    for xi, yi, text in zip(x, y, labels):
        ax.annotate(text, (xi, yi), fontsize=6, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def bland_altman_svg(summary, path, *, title=""):
    fig = Figure(figsize=(5, 4))
    ax = fig.add_subplot()
    ax.scatter(summary.means, summary.differences, s=4, alpha=0.5)
    for level, style in ((summary.bias, "-"), (summary.loa_low, "--"), (summary.loa_high, "--")):
        ax.axhline(level, color="black", linestyle=style, linewidth=0.8)
    ax.set_xlabel("mean of calibrated outputs")
    ax.set_ylabel("difference (a - b)")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save(fig, path)


def bars_svg(groups: Mapping[str, Mapping[str, float | None]], path, *, ylabel="", title="",
             errors: Mapping[str, Mapping[str, float | None]] | None = None):
    """Grouped bars: one group per outer key, one bar per inner key. Missing bars are skipped."""
    outer = list(groups)
    inner = list(dict.fromkeys(k for g in groups.values() for k in g))
    width = 0.8 / max(1, len(inner))
    fig = Figure(figsize=(1.5 + 0.8 * len(outer) * max(1, len(inner)) * 0.5, 4))
    ax = fig.add_subplot()
    for k, name in enumerate(inner):
        xs, hs, es = [], [], []
        for i, g in enumerate(outer):
            v = groups[g].get(name)
            if v is None or math.isnan(v):
                continue
            xs.append(i + (k - (len(inner) - 1) / 2) * width)
            hs.append(v)
            e = errors.get(g, {}).get(name) if errors else None
            es.append(0.0 if e is None else e)
        ax.bar(xs, hs, width=width, label=name, yerr=es if errors else None)
    ax.set_xticks(range(len(outer)))
    ax.set_xticklabels(outer, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=9)
    if len(inner) > 1:
        ax.legend(fontsize=6)
    fig.tight_layout()
    _save(fig, path)
