"""Canonical data model, CSV/manifest ingestion and label harmonization.

Label cells are stored as small integers: ``POS`` (1), ``NEG`` (0) and
``MISSING`` (-1). Prediction cells are floats in [0, 1] with ``NaN`` marking an
unavailable head. Every container sorts its samples by ``sample_id`` so that
downstream matrices are byte-reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ArgumentError,
    CycleError,
    DataError,
    HarmonizationError,
    ManifestError,
    ShapeError,
)

POS = 1
NEG = 0
MISSING = -1
UNCERTAIN = "U"

UNCERTAIN_POLICIES = {"missing": MISSING, "pos": POS, "neg": NEG}

DEFAULT_TASKS = (
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Effusion",
    "Emphysema",
    "Enlarged Cardiomediastinum",
    "Fibrosis",
    "Fracture",
    "Hernia",
    "Infiltration",
    "Lung Lesion",
    "Lung Opacity",
    "Mass",
    "Nodule",
    "Pleural_Thickening",
    "Pneumonia",
    "Pneumothorax",
)


def _frozen(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


def _check_unique(ids, what):
    if len(set(ids)) != len(ids):
        seen = set()
        dup = next(i for i in ids if i in seen or seen.add(i))
        raise DataError(f"duplicate {what}: {dup!r}")


def _policy_value(policy: str) -> int:
    try:
        return UNCERTAIN_POLICIES[policy]
    except KeyError:
        raise ArgumentError(
            f"uncertain policy must be one of {sorted(UNCERTAIN_POLICIES)}, got {policy!r}"
        ) from None


@dataclass(frozen=True)
class TaskVocabulary:
    tasks: tuple[str, ...] = DEFAULT_TASKS

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ArgumentError("task vocabulary is empty")
        _check_unique(self.tasks, "task name")

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    def __contains__(self, name):
        return name in self.tasks

    def index(self, name: str) -> int:
        return self.tasks.index(name)


@dataclass(frozen=True)
class LabelMap:
    """Raw-label vocabulary of one dataset.

    ``hierarchy`` maps a child raw label to its parent; labels are flattened to
    their top-level ancestor before ``entries`` is consulted. ``ignore`` lists
    raw labels that are dropped silently. ``covered_tasks`` restricts which
    canonical tasks the source annotates at all (``None`` means every task);
    uncovered tasks are always ``MISSING``.
    """

    dataset_id: str
    entries: Mapping[str, str] = field(default_factory=dict)
    hierarchy: Mapping[str, str] = field(default_factory=dict)
    ignore: frozenset = frozenset()
    covered_tasks: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "entries", dict(self.entries))
        object.__setattr__(self, "hierarchy", dict(self.hierarchy))
        object.__setattr__(self, "ignore", frozenset(self.ignore))
        if self.covered_tasks is not None:
            object.__setattr__(self, "covered_tasks", tuple(self.covered_tasks))
        for child in self.hierarchy:
            self._ancestry(child)

    def _ancestry(self, label):
        chain = [label]
        while chain[-1] in self.hierarchy:
            parent = self.hierarchy[chain[-1]]
            if parent in chain:
                raise CycleError(
                    f"cyclic label hierarchy in {self.dataset_id!r}: "
                    + " -> ".join(chain + [parent])
                )
            chain.append(parent)
        return chain

    def flatten(self, label: str) -> str:
        """Top-level ancestor of ``label`` (the label itself when it has no parent)."""
        return self._ancestry(label)[-1]

    def validate(self, vocab: TaskVocabulary):
        for raw, task in self.entries.items():
            if task not in vocab:
                raise DataError(
                    f"label map {self.dataset_id!r} maps {raw!r} to unknown task {task!r}"
                )
        for task in self.covered_tasks or ():
            if task not in vocab:
                raise DataError(f"label map {self.dataset_id!r} covers unknown task {task!r}")

    def resolve(self, label: str, vocab: TaskVocabulary) -> str | None:
        """Canonical task for a raw label, or ``None`` when it is ignorable."""
        top = self.flatten(label)
        for candidate in (top, label):
            if candidate in self.ignore:
                return None
            if candidate in self.entries:
                return self.entries[candidate]
        if top in vocab:
            return top
        raise HarmonizationError(label, self.dataset_id)

    def to_json(self) -> dict:
        doc = {
            "dataset_id": self.dataset_id,
            "entries": dict(sorted(self.entries.items())),
            "hierarchy": dict(sorted(self.hierarchy.items())),
            "ignore": sorted(self.ignore),
        }
        if self.covered_tasks is not None:
            doc["covered_tasks"] = list(self.covered_tasks)
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "LabelMap":
        return cls(
            dataset_id=doc["dataset_id"],
            entries=doc.get("entries", {}),
            hierarchy=doc.get("hierarchy", {}),
            ignore=frozenset(doc.get("ignore", ())),
            covered_tasks=doc.get("covered_tasks"),
        )


@dataclass(frozen=True)
class LabelSet:
    dataset_id: str
    sample_ids: tuple[str, ...]
    tasks: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        values = np.asarray(self.values, dtype=np.int8)
        if values.shape != (len(self.sample_ids), len(self.tasks)):
            raise ShapeError(
                f"label matrix shape {values.shape} does not match "
                f"{len(self.sample_ids)} samples x {len(self.tasks)} tasks"
            )
        if values.size and not np.isin(values, (POS, NEG, MISSING)).all():
            raise DataError("label values must be POS, NEG or MISSING")
        _check_unique(self.sample_ids, "sample_id")
        _check_unique(self.tasks, "task")
        order = sorted(range(len(self.sample_ids)), key=self.sample_ids.__getitem__)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids[i] for i in order))
        object.__setattr__(self, "values", _frozen(values[order]))

    def __len__(self):
        return len(self.sample_ids)

    def has_task(self, task: str) -> bool:
        return task in self.tasks

    def column(self, task: str) -> np.ndarray:
        if task not in self.tasks:
            return np.full(len(self.sample_ids), MISSING, dtype=np.int8)
        return self.values[:, self.tasks.index(task)]


@dataclass(frozen=True)
class PredictionSet:
    """Scores of one trained model (one seed) on one evaluation dataset."""

    model_id: str
    train_domains: frozenset
    seed: int
    eval_dataset_id: str
    sample_ids: tuple[str, ...]
    tasks: tuple[str, ...]
    scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "train_domains", frozenset(self.train_domains))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "tasks", tuple(self.tasks))
        scores = np.asarray(self.scores, dtype=np.float64)
        if scores.shape != (len(self.sample_ids), len(self.tasks)):
            raise ShapeError(
                f"score matrix shape {scores.shape} does not match "
                f"{len(self.sample_ids)} samples x {len(self.tasks)} tasks"
            )
        present = scores[~np.isnan(scores)]
        if present.size and (present.min() < 0.0 or present.max() > 1.0):
            raise DataError(f"scores of {self.model_id!r} fall outside [0, 1]")
        _check_unique(self.sample_ids, "sample_id")
        _check_unique(self.tasks, "task")
        order = sorted(range(len(self.sample_ids)), key=self.sample_ids.__getitem__)
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids[i] for i in order))
        object.__setattr__(self, "scores", _frozen(scores[order]))

    @property
    def mask(self) -> np.ndarray:
        return ~np.isnan(self.scores)

    @property
    def key(self) -> tuple[str, int, str]:
        return (self.model_id, self.seed, self.eval_dataset_id)

    def has_head(self, task: str) -> bool:
        return task in self.tasks and bool(np.any(self.mask[:, self.tasks.index(task)]))

    def column(self, task: str) -> np.ndarray:
        if task not in self.tasks:
            return np.full(len(self.sample_ids), np.nan)
        return self.scores[:, self.tasks.index(task)]


@dataclass(frozen=True)
class FeatureSet:
    sample_ids: tuple[str, ...]
    dataset_ids: tuple[str, ...]
    features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "dataset_ids", tuple(self.dataset_ids))
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != len(self.sample_ids):
            raise ShapeError(f"feature matrix shape {feats.shape} does not match sample count")
        if len(self.dataset_ids) != len(self.sample_ids):
            raise ShapeError("dataset_ids and sample_ids differ in length")
        if not np.isfinite(feats).all():
            raise DataError("feature matrix contains non-finite entries")
        keys = list(zip(self.dataset_ids, self.sample_ids))
        _check_unique(keys, "(dataset_id, sample_id)")
        order = sorted(range(len(keys)), key=lambda i: (keys[i][1], keys[i][0]))
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids[i] for i in order))
        object.__setattr__(self, "dataset_ids", tuple(self.dataset_ids[i] for i in order))
        object.__setattr__(self, "features", _frozen(feats[order]))

    @property
    def dim(self) -> int:
        return self.features.shape[1]


# -- harmonization --------------------------------------------------------------


def _parse_state(state, policy_value: int) -> int:
    if isinstance(state, (int, np.integer)) and state in (POS, NEG, MISSING):
        return int(state)
    text = str(state).strip()
    if text in ("1", "1.0"):
        return POS
    if text in ("0", "0.0"):
        return NEG
    if text.upper() == UNCERTAIN:
        return policy_value
    if text in ("", "-1"):
        return MISSING
    raise DataError(f"unrecognized label state {state!r}")


_RANK = {MISSING: 0, NEG: 1, POS: 2}


def harmonize_labels(
    raw: Iterable[tuple],
    label_map: LabelMap,
    vocab: TaskVocabulary = TaskVocabulary(),
    *,
    sample_ids: Iterable[str] = (),
    exhaustive_negative: bool = False,
    uncertain_policy: str = "missing",
) -> LabelSet:
    """Map raw ``(sample_id, raw_label, state)`` rows onto the canonical tasks.

    Rows whose ``raw_label`` is empty only declare the sample. Conflicting
    rows for the same cell resolve POS > NEG > MISSING. When the source is
    exhaustive-negative, covered tasks never mentioned for a sample are NEG.
    """
    label_map.validate(vocab)
    policy_value = _policy_value(uncertain_policy)
    covered = set(vocab.tasks if label_map.covered_tasks is None else label_map.covered_tasks)

    cells: dict[str, dict[str, int]] = {sid: {} for sid in sample_ids}
    for sample_id, raw_label, state in raw:
        row = cells.setdefault(str(sample_id), {})
        if raw_label is None or str(raw_label).strip() == "":
            continue
        task = label_map.resolve(str(raw_label).strip(), vocab)
        if task is None or task not in covered:
            continue
        value = _parse_state(state, policy_value)
        prev = row.get(task)
        row[task] = value if prev is None else max(prev, value, key=_RANK.__getitem__)

    ids = sorted(cells)
    values = np.full((len(ids), len(vocab)), MISSING, dtype=np.int8)
    fill = NEG if exhaustive_negative else MISSING
    for j, task in enumerate(vocab.tasks):
        if task in covered:
            values[:, j] = fill
    for i, sid in enumerate(ids):
        for task, value in cells[sid].items():
            j = vocab.index(task)
            # an explicit MISSING/uncertain row must not erase an exhaustive NEG
            values[i, j] = value if value != MISSING else values[i, j]
    return LabelSet(label_map.dataset_id, ids, vocab.tasks, values)


def labelset_to_raw(labels: LabelSet) -> list[tuple[str, str, int]]:
    """Canonical-form raw rows of ``labels`` (every sample declared)."""
    rows = [(sid, "", MISSING) for sid in labels.sample_ids]
    for i, sid in enumerate(labels.sample_ids):
        for j, task in enumerate(labels.tasks):
            if labels.values[i, j] != MISSING:
                rows.append((sid, task, int(labels.values[i, j])))
    return rows


@dataclass(frozen=True)
class Alignment:
    """Common samples of two containers plus the row index into each."""

    sample_ids: tuple[str, ...]
    left: np.ndarray
    right: np.ndarray

    def __len__(self):
        return len(self.sample_ids)


def align_samples(a, b) -> Alignment:
    """Intersect two sample-indexed containers, ordered by ascending sample_id.

    ``a`` and ``b`` may be any objects exposing ``sample_ids`` or plain id
    sequences. An empty intersection is a valid (empty) result.
    """
    ids_a = getattr(a, "sample_ids", a)
    ids_b = getattr(b, "sample_ids", b)
    pos_a = {sid: i for i, sid in enumerate(ids_a)}
    pos_b = {sid: i for i, sid in enumerate(ids_b)}
    common = sorted(pos_a.keys() & pos_b.keys())
    return Alignment(
        tuple(common),
        np.array([pos_a[s] for s in common], dtype=np.intp),
        np.array([pos_b[s] for s in common], dtype=np.intp),
    )


def dataset_counts(labels: LabelSet) -> dict[str, tuple[int, int]]:
    """Per-task ``(positive, negative)`` counts; MISSING cells count for neither."""
    pos = (labels.values == POS).sum(axis=0)
    neg = (labels.values == NEG).sum(axis=0)
    return {t: (int(pos[j]), int(neg[j])) for j, t in enumerate(labels.tasks)}


# -- CSV formats ---------------------------------------------------------------


def _format_score(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def read_label_csv(path, dataset_id: str, uncertain_policy: str = "missing") -> LabelSet:
    policy_value = _policy_value(uncertain_policy)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "sample_id":
            raise DataError(f"{path}: label CSV must start with a sample_id column")
        tasks = header[1:]
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            ids.append(row[0])
            try:
                rows.append([_parse_state(cell, policy_value) for cell in row[1:]])
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    values = np.array(rows, dtype=np.int8).reshape(len(ids), len(tasks))
    return LabelSet(dataset_id, ids, tasks, values)


def write_label_csv(labels: LabelSet, path):
    cell = {POS: "1", NEG: "0", MISSING: ""}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", *labels.tasks])
        for sid, row in zip(labels.sample_ids, labels.values):
            writer.writerow([sid, *(cell[int(v)] for v in row)])


def read_raw_label_csv(path) -> list[tuple[str, str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"sample_id", "raw_label", "state"}:
            raise DataError(f"{path}: raw label CSV needs sample_id,raw_label,state")
        return [(r["sample_id"], r["raw_label"] or "", r["state"] or "") for r in reader]


def write_raw_label_csv(rows: Iterable[tuple], path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "raw_label", "state"])
        for sid, label, state in rows:
            writer.writerow([sid, label, "" if state == MISSING else state])


def read_prediction_csv(
    path, *, model_id: str, train_domains: Iterable[str], seed: int, eval_dataset_id: str
) -> PredictionSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "sample_id":
            raise DataError(f"{path}: prediction CSV must start with a sample_id column")
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            ids.append(row[0])
            try:
                rows.append([float(c) if c.strip() else np.nan for c in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    scores = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 1)
    return PredictionSet(model_id, frozenset(train_domains), int(seed), eval_dataset_id,
                         ids, header[1:], scores)


def write_prediction_csv(pred: PredictionSet, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", *pred.tasks])
        for sid, row in zip(pred.sample_ids, pred.scores):
            writer.writerow([sid, *(_format_score(x) for x in row)])


def read_feature_csv(path) -> FeatureSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["sample_id", "dataset_id"]:
            raise DataError(f"{path}: feature CSV must start with sample_id,dataset_id")
        ids, dsets, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            ids.append(row[0])
            dsets.append(row[1])
            try:
                rows.append([float(c) for c in row[2:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    feats = np.array(rows, dtype=np.float64).reshape(len(ids), len(header) - 2)
    return FeatureSet(ids, dsets, feats)


def write_feature_csv(features: FeatureSet, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "dataset_id", *(f"f{j}" for j in range(features.dim))])
        for sid, ds, row in zip(features.sample_ids, features.dataset_ids, features.features):
            writer.writerow([sid, ds, *(repr(float(x)) for x in row)])


# -- manifest ------------------------------------------------------------------

ROLES = ("labels", "raw_labels", "predictions", "features")


@dataclass(frozen=True)
class StudyManifest:
    """Parsed manifest. Paths are resolved relative to the manifest file."""

    path: Path | None
    files: tuple[Mapping, ...]
    tasks: TaskVocabulary = TaskVocabulary()
    uncertain_policy: str = "missing"
    output_dir: Path | None = None
    digest: str = ""

    def of_role(self, role: str) -> list[Mapping]:
        return [f for f in self.files if f["role"] == role]


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def parse_manifest(doc: Mapping, base_dir: Path, *, digest: str = "", path=None) -> StudyManifest:
    if not isinstance(doc, Mapping) or "files" not in doc:
        raise ManifestError("manifest must be a JSON object with a 'files' list")
    tasks = TaskVocabulary(tuple(doc["tasks"])) if doc.get("tasks") else TaskVocabulary()
    policy = doc.get("uncertain_policy", "missing")
    if policy not in UNCERTAIN_POLICIES:
        raise ManifestError(f"unknown uncertain_policy {policy!r}")

    files = []
    label_ids, pred_keys = set(), set()
    for k, entry in enumerate(doc["files"]):
        entry = dict(entry)
        role = entry.get("role")
        if role not in ROLES:
            raise ManifestError(f"files[{k}]: role must be one of {ROLES}, got {role!r}")
        if "path" not in entry:
            raise ManifestError(f"files[{k}]: missing 'path'")
        entry["path"] = _resolve(base_dir, entry["path"])
        if not entry["path"].is_file():
            raise ManifestError(f"files[{k}]: {entry['path']} does not exist")
        if role in ("labels", "raw_labels"):
            ds = entry.get("dataset_id")
            if not ds:
                raise ManifestError(f"files[{k}]: label files need a dataset_id")
            if ds in label_ids:
                raise ManifestError(f"dataset_id {ds!r} listed twice")
            label_ids.add(ds)
            if role == "raw_labels":
                if "label_map" not in entry:
                    raise ManifestError(f"files[{k}]: raw_labels need a label_map")
                entry["label_map"] = _resolve(base_dir, entry["label_map"])
        elif role == "predictions":
            missing = {"model_id", "train_domains", "eval_dataset_id"} - entry.keys()
            if missing:
                raise ManifestError(f"files[{k}]: prediction entry lacks {sorted(missing)}")
            entry.setdefault("seed", 0)
            key = (entry["model_id"], int(entry["seed"]), entry["eval_dataset_id"])
            if key in pred_keys:
                raise ManifestError(f"prediction set {key} listed twice")
            pred_keys.add(key)
        files.append(entry)

    out = doc.get("output_dir")
    return StudyManifest(
        path=path,
        files=tuple(files),
        tasks=tasks,
        uncertain_policy=policy,
        output_dir=_resolve(base_dir, out) if out else None,
        digest=digest,
    )


def load_manifest(path) -> StudyManifest:
    path = Path(path)
    try:
        raw = path.read_bytes()
        doc = json.loads(raw)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from None
    return parse_manifest(doc, path.parent, digest=hashlib.sha256(raw).hexdigest(), path=path)


@dataclass(frozen=True)
class Study:
    manifest: StudyManifest
    labels: Mapping[str, LabelSet]
    predictions: tuple[PredictionSet, ...]
    features: FeatureSet | None
    uncertain_policy: str


def load_study(manifest: StudyManifest, uncertain_policy: str | None = None) -> Study:
    """Read every file a manifest references; raw labels are harmonized on the way."""
    policy = uncertain_policy or manifest.uncertain_policy
    labels = {}
    for entry in manifest.of_role("labels"):
        labels[entry["dataset_id"]] = read_label_csv(entry["path"], entry["dataset_id"], policy)
    for entry in manifest.of_role("raw_labels"):
        lmap = LabelMap.from_json(json.loads(Path(entry["label_map"]).read_text("utf-8")))
        if lmap.dataset_id != entry["dataset_id"]:
            lmap = LabelMap(entry["dataset_id"], lmap.entries, lmap.hierarchy,
                            lmap.ignore, lmap.covered_tasks)
        labels[entry["dataset_id"]] = harmonize_labels(
            read_raw_label_csv(entry["path"]), lmap, manifest.tasks,
            exhaustive_negative=bool(entry.get("exhaustive_negative", False)),
            uncertain_policy=policy,
        )
    preds = [
        read_prediction_csv(
            e["path"], model_id=e["model_id"], train_domains=e["train_domains"],
            seed=int(e["seed"]), eval_dataset_id=e["eval_dataset_id"],
        )
        for e in manifest.of_role("predictions")
    ]
    preds.sort(key=lambda p: p.key)
    feature_files = manifest.of_role("features")
    features = None
    if feature_files:
        parts = [read_feature_csv(e["path"]) for e in feature_files]
        if len({p.dim for p in parts}) > 1:
            raise ShapeError("feature files disagree on dimension")
        features = parts[0] if len(parts) == 1 else FeatureSet(
            sum((p.sample_ids for p in parts), ()),
            sum((p.dataset_ids for p in parts), ()),
            np.vstack([p.features for p in parts]),
        )
    return Study(manifest, dict(sorted(labels.items())), tuple(preds), features, policy)


def group_members(preds: Sequence[PredictionSet]) -> dict[tuple[str, str], list[PredictionSet]]:
    """Ensembles: prediction sets sharing ``(model_id, eval_dataset_id)``, sorted by seed."""
    groups: dict[tuple[str, str], list[PredictionSet]] = {}
    for p in sorted(preds, key=lambda p: p.key):
        groups.setdefault((p.model_id, p.eval_dataset_id), []).append(p)
    return groups
