import json

import numpy as np
import pytest

from xshift import cli, data, protocols, report


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_no_arguments_prints_usage(capsys):
    assert run() == 1
    assert "usage" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert run("auc-matrix", "--manifest", "x.json", "--bogus") == 1
    assert run("frobnicate") == 1
    assert run("synth", "--scenario", "nope", "--out", tmp_path) == 1
    assert run("probe-train", "--manifest", "x", "--lambda", "-1") == 1


def test_data_errors(tmp_path):
    assert run("auc-matrix", "--manifest", tmp_path / "missing.json", "--out", tmp_path) == 2
    (tmp_path / "bad.json").write_text("[]")
    assert run("loo", "--manifest", tmp_path / "bad.json", "--out", tmp_path) == 2


def test_synth_twice_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--scenario", "good-perf-poor-agreement", "--seed", 7,
                   "--out", tmp_path / name) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_auc_matrix_matches_library(cohort_dir, tmp_path):
    manifest = cohort_dir("planted-loo-gap") / "manifest.json"
    assert run("auc-matrix", "--manifest", manifest, "--out", tmp_path) == 0
    study = data.load_study(data.load_manifest(manifest))
    rep = protocols.auc_matrix(study.predictions, study.labels)
    rows, cols, values = report.read_matrix_csv(tmp_path / "auc_matrix.csv")
    assert (tuple(rows), tuple(cols)) == (rep.row_ids, rep.col_ids)
    expected = np.array([[np.nan if np.isnan(v) else report.rounded(v) for v in r]
                         for r in rep.values])
    np.testing.assert_array_equal(values, expected)
    doc = json.loads((tmp_path / "auc_matrix.json").read_text())
    np.testing.assert_array_equal(report.matrix_from_doc(doc)[2], rep.values)
    assert doc["meta"]["manifest_sha256"] == data.load_manifest(manifest).digest
    assert (tmp_path / "auc_matrix.svg").read_text().count('id="empty-') == len(rep.reasons)


def test_output_dir_defaults_to_manifest(cohort_dir):
    root = cohort_dir("good-perf-poor-agreement")
    assert run("seed-agreement", "--manifest", root / "manifest.json") == 0
    assert (root / "reports" / "seed_agreement.csv").is_file()


def test_pairwise_commands(cohort_dir, tmp_path):
    manifest = cohort_dir("good-perf-poor-agreement") / "manifest.json"
    pair = ["--model-a", "modelA", "--model-b", "modelB", "--dataset", "dsA", "--task", "Hernia"]
    assert run("bland-altman", "--manifest", manifest, "--out", tmp_path, *pair) == 0
    assert run("mine-disagreements", "--manifest", manifest, "--out", tmp_path, *pair,
               "--k", 5, "--label-filter", "neg") == 0
    header, rows = report.read_csv(tmp_path / "disagreements.csv")
    assert len(rows) == 5 and all(r[-1] == "0" for r in rows)
    assert run("mine-disagreements", "--manifest", manifest, "--out", tmp_path, *pair,
               "--k", 0) == 1
    assert run("bland-altman", "--manifest", manifest, "--out", tmp_path,
               *pair[:-1], "NoSuchTask") == 2


def test_kappa_matrix_members_mode(cohort_dir, tmp_path):
    manifest = cohort_dir("planted-loo-gap") / "manifest.json"
    assert run("kappa-matrix", "--manifest", manifest, "--out", tmp_path / "e",
               "--dataset", "dsA") == 0
    assert run("kappa-matrix", "--manifest", manifest, "--out", tmp_path / "p",
               "--dataset", "dsA", "--members-mode", "per-member") == 0
    e = json.loads((tmp_path / "e" / "kappa_dsA.json").read_text())
    p = json.loads((tmp_path / "p" / "kappa_dsA.json").read_text())
    assert e["meta"]["members_mode"] == "ensemble" and p["meta"]["members_mode"] == "per-member"
    assert e["raw"] != p["raw"]


def _relabel_study(tmp_path):
    rng = np.random.default_rng(0)
    ids = [f"s{i}" for i in range(40)]
    ya = rng.integers(0, 2, (40, 2))
    yb = np.where(rng.random((40, 2)) < 0.25, 1 - ya, ya)
    for name, y in (("orig", ya), ("relab", yb)):
        data.write_label_csv(data.LabelSet(name, ids, ("Mass", "Pneumonia"), y),
                             tmp_path / f"{name}.csv")
    (tmp_path / "ratings.csv").write_text(
        "sample_id,rater,value\na,r1,1\na,r2,1\nb,r1,0\nb,r2,1\nc,r1,0\nc,r2,\n")
    (tmp_path / "study.json").write_text(json.dumps({"files": [
        {"role": "labels", "path": "orig.csv", "dataset_id": "orig"},
        {"role": "labels", "path": "relab.csv", "dataset_id": "relab"},
    ]}))
    return ya, yb


def test_relabel_agreement_command(tmp_path):
    ya, yb = _relabel_study(tmp_path)
    assert run("relabel-agreement", "--manifest", tmp_path / "study.json", "--out", tmp_path,
               "--reference", "orig", "--comparison", "relab",
               "--ratings", tmp_path / "ratings.csv") == 0
    doc = json.loads((tmp_path / "relabel_agreement.json").read_text())
    tp = int(((ya[:, 0] == 1) & (yb[:, 0] == 1)).sum())
    assert doc["tables"][0]["reference_task"] == "Mass" and doc["tables"][0]["tp"] == tp
    assert doc["raw"]["rater_disagreement"] == 0.5
    assert run("relabel-agreement", "--manifest", tmp_path / "study.json", "--out", tmp_path,
               "--reference", "orig", "--comparison", "relab", "--pair", "Mass") == 1


def test_probe_commands(cohort_dir, tmp_path):
    manifest = cohort_dir("aligned-vs-divergent-concepts") / "manifest.json"
    common = ["--manifest", manifest, "--out", tmp_path, "--lambda", 10, "--max-iter", 300]
    assert run("probe-train", *common) == 0
    model = __import__("xshift.probe", fromlist=["read_probe_csv"]).read_probe_csv(
        tmp_path / "probe.csv")
    assert model.weights.shape == (3, 4, 16)
    assert run("probe-pca", *common) == 0
    _, rows = report.read_csv(tmp_path / "probe_pca.csv")
    assert len(rows) == 12
    assert run("probe-distances", *common, "--seeds", "0,1") == 0
    doc = json.loads((tmp_path / "probe_distances.json").read_text())
    assert set(doc["raw"]) == {"lambda=0", "lambda=10"}
    assert run("similarity-auc", *common) == 0
    assert "spearman" in json.loads((tmp_path / "similarity_auc.json").read_text())


def test_probe_needs_features(cohort_dir, tmp_path):
    manifest = cohort_dir("good-perf-poor-agreement") / "manifest.json"
    assert run("probe-train", "--manifest", manifest, "--out", tmp_path) == 2
