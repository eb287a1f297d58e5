"""Command-line front end: ``xshift <subcommand> --manifest study.json --out dir``.

Exit status is 0 on success, 1 on a usage error and 2 on a data error.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__, data, metrics, probe, protocols, report, synth
from .errors import ArgumentError, DataError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# -- shared helpers ------------------------------------------------------------------


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _seed_list(text: str) -> list[int]:
    return [_seed(s) for s in text.split(",") if s.strip()]


def _lambda(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"lambda must be a number, got {text!r}") from None
    if not math.isfinite(value) or value < 0:
        raise argparse.ArgumentTypeError("lambda must be a finite non-negative number")
    return value


def _out_dir(args, manifest=None) -> Path:
    out = args.out or (manifest.output_dir if manifest is not None else None)
    if out is None:
        raise ArgumentError("no output directory: pass --out or set output_dir in the manifest")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _study(args):
    manifest = data.load_manifest(args.manifest)
    return data.load_study(manifest, args.uncertain_policy), manifest


def _meta(args, study, **extra):
    return report.run_meta(study.manifest, uncertain_policy=study.uncertain_policy, **extra)


def _labels(study, dataset: str) -> data.LabelSet:
    try:
        return study.labels[dataset]
    except KeyError:
        raise DataError(f"no labels for dataset {dataset!r}; have {sorted(study.labels)}") from None


def _members(study, model: str, dataset: str) -> list[data.PredictionSet]:
    members = [p for p in study.predictions
               if p.model_id == model and p.eval_dataset_id == dataset]
    if not members:
        raise DataError(f"no predictions of model {model!r} on {dataset!r}")
    return members


# -- subcommands -----------------------------------------------------------------------


def cmd_harmonize(args):
    study, manifest = _study(args)
    out = _out_dir(args, manifest)
    (out / "labels").mkdir(exist_ok=True)
    rows, counts = [], {}
    for ds, ls in study.labels.items():
        data.write_label_csv(ls, out / "labels" / f"{ds}.csv")
        counts[ds] = {}
        for j, t in enumerate(ls.tasks):
            col = ls.values[:, j]
            c = {s: int(np.count_nonzero(col == v))
                 for s, v in (("pos", data.POS), ("neg", data.NEG), ("missing", data.MISSING))}
            counts[ds][t] = c
            rows.append((ds, t, c["pos"], c["neg"], c["missing"]))
    report.write_csv(out / "harmonize.csv", ["dataset", "task", "pos", "neg", "missing"], rows)
    report.write_json(out / "harmonize.json", {"meta": _meta(args, study), "counts": counts})


def cmd_auc_matrix(args):
    study, manifest = _study(args)
    out = _out_dir(args, manifest)
    rep = protocols.auc_matrix(study.predictions, study.labels, tasks=args.tasks)
    report.write_matrix(rep, out, "auc_matrix", _meta(args, study), title="AUC")


def cmd_loo(args):
    study, manifest = _study(args)
    out = _out_dir(args, manifest)
    loo = protocols.loo_summary(study.predictions, study.labels)
    rows, doc_conds, means, stds = [], {}, {}, {}
    for ds in loo.datasets:
        doc_conds[ds] = {}
        means[ds], stds[ds] = {}, {}
        for name, c in loo.conditions[ds].items():
            rows.append((ds, name, c.mean, c.std, c.n_runs))
            means[ds][name], stds[ds][name] = c.mean, c.std
            doc_conds[ds][name] = {
                "mean": report.rounded(c.mean),
                "std": report.rounded(c.std),
                "raw": {"mean": c.mean, "std": c.std,
                        "per_task": dict(c.per_task)},
                "runs": [{"model": m, "seed": s, "auc": a} for m, s, a in c.runs],
            }
    try:
        gap = loo.gap()
    except DataError:
        gap = None
    report.write_csv(out / "loo.csv", ["dataset", "condition", "mean_auc", "std", "runs"], rows)
    report.write_json(out / "loo.json", {
        "meta": _meta(args, study),
        "conditions": doc_conds,
        "tasks_used": {k: list(v) for k, v in loo.tasks_used.items()},
        "gap_all_including_minus_all_except": report.rounded(gap),
        "raw": {"gap": gap},
        "ignored": [{"model": m, "seed": s, "dataset": d, "reason": r}
                    for m, s, d, r in loo.ignored],
    })
    report.bars_svg(means, out / "loo.svg", ylabel="mean AUC", title="leave-one-domain-out",
                    errors=stds)


def cmd_kappa_matrix(args):
    study, manifest = _study(args)
    out = _out_dir(args, manifest)
    datasets = [args.dataset] if args.dataset else list(study.labels)
    meta = _meta(args, study, members_mode=args.members_mode)
    for ds in datasets:
        rep = protocols.kappa_matrix(_labels(study, ds), study.predictions, tasks=args.tasks,
                                     members_mode=args.members_mode)
        if not rep.row_ids:
            continue
        report.write_matrix(rep, out, f"kappa_{ds}", meta, title=f"kappa on {ds}")


def cmd_seed_agreement(args):
    study, manifest = _study(args)
    out = _out_dir(args, manifest)
    rep = protocols.seed_agreement(study.predictions, study.labels, tasks=args.tasks)
    report.write_matrix(rep, out, "seed_agreement", _meta(args, study), title="seed kappa")


def _pair_args(args, study):
    ls = _labels(study, args.dataset)
    return (_members(study, args.model_a, args.dataset),
            _members(study, args.model_b, args.dataset), ls)


def cmd_bland_altman(args):
    study, manifest = _study(args)
    out = _out_dir(args, manifest)
    a, b, ls = _pair_args(args, study)
    ids, sa, sb = protocols.paired_calibrated(a, b, ls, args.task)
    summary = metrics.bland_altman(sa, sb)
    report.write_csv(out / "bland_altman.csv", ["sample_id", "mean", "difference"],
                     zip(ids, summary.means, summary.differences))
    stats = {"bias": summary.bias, "loa_low": summary.loa_low, "loa_high": summary.loa_high}
    report.write_json(out / "bland_altman.json", {
        "meta": _meta(args, study, model_a=args.model_a, model_b=args.model_b,
                      dataset=args.dataset, task=args.task),
        "n": len(ids),
        **{k: report.rounded(v) for k, v in stats.items()},
        "raw": stats,
    })
    report.bland_altman_svg(summary, out / "bland_altman.svg",
                            title=f"{args.model_a} vs {args.model_b}: {args.task}")


def _read_ratings(path) -> np.ndarray:
    """Long-form ``sample_id,rater,value`` file -> items x raters matrix (NaN = unrated)."""
    header, rows = report.read_csv(path)
    if header[:3] != ["sample_id", "rater", "value"]:
        raise DataError(f"{path}: ratings CSV must have columns sample_id,rater,value")
    items = sorted({r[0] for r in rows})
    raters = sorted({r[1] for r in rows})
    mat = np.full((len(items), len(raters)), np.nan)
    for sid, rater, value in (r[:3] for r in rows):
        if value.strip() == "":
            continue
        if value.strip() not in ("0", "1"):
            raise DataError(f"{path}: rating {value!r} is not 0/1")
        mat[items.index(sid), raters.index(rater)] = float(value)
    return mat


def cmd_relabel_agreement(args):
    study, manifest = _study(args)
    out = _out_dir(args, manifest)
    ref = _labels(study, args.reference)
    comp = _labels(study, args.comparison)
    pairing = None
    if args.pair:
        pairing = {}
        for item in args.pair:
            a, sep, b = item.partition("=")
            if not sep:
                raise ArgumentError(f"--pair expects REF_TASK=COMP_TASK, got {item!r}")
            pairing[a] = b
    tables = protocols.relabel_agreement(ref, comp, pairing)
    rows = [(ta, tb, t.tp, t.fp, t.fn, t.tn, t.f1) for (ta, tb), t in tables.items()]
    report.write_csv(out / "relabel_agreement.csv",
                     ["reference_task", "comparison_task", "tp", "fp", "fn", "tn", "f1"], rows)
    doc = {
        "meta": _meta(args, study, reference=args.reference, comparison=args.comparison),
        "tables": [{"reference_task": ta, "comparison_task": tb, "tp": t.tp, "fp": t.fp,
                    "fn": t.fn, "tn": t.tn, "f1": report.rounded(t.f1)}
                   for (ta, tb), t in tables.items()],
        "raw": {"f1": [t.f1 for t in tables.values()]},
    }
    if args.ratings:
        value = metrics.rater_disagreement(_read_ratings(args.ratings))
        doc["rater_disagreement"] = report.rounded(value)
        doc["raw"]["rater_disagreement"] = value
    report.write_json(out / "relabel_agreement.json", doc)


def cmd_mine_disagreements(args):
    study, manifest = _study(args)
    out = _out_dir(args, manifest)
    a, b, ls = _pair_args(args, study)
    sources = [ls] + [_labels(study, d) for d in args.extra_labels or ()]
    cases = protocols.mine_disagreements(a, b, sources, args.task,
                                         label_filter=args.label_filter, k=args.k)
    names = [s.dataset_id for s in sources]
    report.write_csv(
        out / "disagreements.csv",
        ["rank", "sample_id", "score_a", "score_b", "abs_difference", "higher",
         *(f"label_{n}" for n in names)],
        ((i + 1, c.sample_id, c.score_a, c.score_b, c.rank_key, c.higher,
          *(c.label_states[n] for n in names)) for i, c in enumerate(cases)),
    )
    report.write_json(out / "disagreements.json", {
        "meta": _meta(args, study, model_a=args.model_a, model_b=args.model_b,
                      dataset=args.dataset, task=args.task, k=args.k,
                      label_filter=args.label_filter),
        "cases": [{"sample_id": c.sample_id, "score_a": report.rounded(c.score_a),
                   "score_b": report.rounded(c.score_b), "higher": c.higher,
                   "labels": dict(c.label_states)} for c in cases],
        "raw": [{"sample_id": c.sample_id, "score_a": c.score_a, "score_b": c.score_b}
                for c in cases],
    })


# -- probe subcommands -------------------------------------------------------------------


def _probe_setup(study):
    if study.features is None:
        raise DataError("manifest lists no features file")
    datasets = tuple(sorted(set(study.features.dataset_ids) & set(study.labels)))
    if not datasets:
        raise DataError("no dataset has both features and labels")
    tasks = tuple(protocols.task_order({t for d in datasets for t in study.labels[d].tasks}))
    return datasets, tasks


def _train(study, lam: float, seed: int, max_iter: int):
    datasets, tasks = _probe_setup(study)
    cfg = probe.ProbeConfig(datasets, tasks, study.features.dim, lam=lam, seed=seed,
                            max_iter=max_iter)
    return probe.train_probe(cfg, study.features, study.labels)


def _train_many(study, jobs, max_iter):
    return protocols.parallel_map(lambda job: _train(study, job[0], job[1], max_iter)[0], jobs, None)


def cmd_probe_train(args):
    study, manifest = _study(args)
    out = _out_dir(args, manifest)
    model, trace = _train(study, args.lam, args.seed, args.max_iter)
    datasets, tasks = _probe_setup(study)
    pdata = probe.probe_data(study.features, study.labels, datasets, tasks)
    probe.write_probe_csv(model, out / "probe.csv")
    probe.write_trace_csv(trace, out / "probe_trace.csv")
    acc = probe.training_accuracy(model, pdata)
    weights = probe.default_weights(pdata, True)
    report.write_json(out / "probe.json", {
        "meta": _meta(args, study, **{"lambda": args.lam, "seed": args.seed}),
        "datasets": list(datasets),
        "tasks": list(tasks),
        "converged": trace.converged,
        "iterations": trace.rows[-1][0],
        "final_loss": report.rounded(trace.final_loss),
        "training_accuracy": report.rounded(acc),
        "task_weights": {d: {t: report.rounded(v) for t, v in w.as_dict().items()}
                         for d, w in (weights or {}).items()},
        "raw": {"final_loss": trace.final_loss, "training_accuracy": acc},
    })


def cmd_probe_pca(args):
    study, manifest = _study(args)
    out = _out_dir(args, manifest)
    model, _ = _train(study, args.lam, args.seed, args.max_iter)
    proj = probe.pca_project(model.vectors(), k=2)
    keys = model.head_keys()
    report.write_csv(out / "probe_pca.csv", ["dataset", "task", "pc1", "pc2"],
                     ((d, t, *xy) for (d, t), xy in zip(keys, proj.coordinates)))
    report.write_json(out / "probe_pca.json", {
        "meta": _meta(args, study, **{"lambda": args.lam, "seed": args.seed}),
        "explained_variance": [report.rounded(v) for v in proj.explained_variance],
        "raw": {"explained_variance": proj.explained_variance.tolist(),
                "components": proj.components.tolist(),
                "coordinates": proj.coordinates.tolist()},
    })
    report.scatter_svg(proj.coordinates[:, 0], proj.coordinates[:, 1],
                       [d for d, _ in keys], out / "probe_pca.svg",
                       groups=[t for _, t in keys], xlabel="PC1", ylabel="PC2",
                       title=f"probe heads, lambda={args.lam:g}")


def _distance_summary(study, args) -> probe.DistanceSummary:
    seeds = args.seeds or [args.seed]
    variants = {"lambda=0": 0.0, f"lambda={args.lam:g}": args.lam}
    jobs = [(lam, s) for lam in variants.values() for s in seeds]
    models = _train_many(study, jobs, args.max_iter)
    grouped = {name: [m for (lam, _), m in zip(jobs, models) if lam == value]
               for name, value in variants.items()}
    return probe.weight_distance_summary(grouped)


def cmd_probe_distances(args):
    study, manifest = _study(args)
    out = _out_dir(args, manifest)
    summary = _distance_summary(study, args)
    names = summary.variants
    report.write_csv(
        out / "probe_distances.csv",
        ["task", *(f"{n} raw" for n in names), *(f"{n} normalized" for n in names)],
        ((t, *(summary.raw[n][t] for n in names), *(summary.normalized[n][t] for n in names))
         for t in summary.tasks),
    )
    report.write_json(out / "probe_distances.json", {
        "meta": _meta(args, study, **{"lambda": args.lam,
                                      "seeds": args.seeds or [args.seed]}),
        "normalized": {n: {t: report.rounded(v) for t, v in summary.normalized[n].items()}
                       for n in names},
        "raw": {n: dict(summary.raw[n]) for n in names},
    })
    groups = {t: {n: summary.normalized[n][t] for n in names} for t in summary.tasks}
    report.bars_svg(groups, out / "probe_distances.svg", ylabel="normalized head distance",
                    title="same-task head distance")


def cmd_similarity_auc(args):
    study, manifest = _study(args)
    out = _out_dir(args, manifest)
    summary = _distance_summary(study, args)
    name = f"lambda={args.lam:g}"
    auc_rep = protocols.auc_matrix(study.predictions, study.labels)
    sim = probe.similarity_vs_generalization(summary.raw[name], auc_rep)
    report.write_csv(out / "similarity_auc.csv", ["task", "head_distance", "cross_domain_auc"],
                     zip(sim.tasks, sim.distances, sim.cross_domain_auc))
    report.write_json(out / "similarity_auc.json", {
        "meta": _meta(args, study, **{"lambda": args.lam,
                                      "seeds": args.seeds or [args.seed]}),
        "spearman": report.rounded(sim.rho),
        "raw": {"spearman": sim.rho, "distances": list(sim.distances),
                "cross_domain_auc": list(sim.cross_domain_auc)},
    })
    report.scatter_svg(sim.distances, sim.cross_domain_auc, sim.tasks,
                       out / "similarity_auc.svg", xlabel="head distance",
                       ylabel="cross-domain AUC", title=f"{name}")


def cmd_synth(args):
    out = _out_dir(args)
    cohort = synth.generate_cohort(synth.scenario(args.scenario), args.seed)
    synth.write_cohort(cohort, out)


# -- parser --------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xshift", description="Cross-domain chest X-ray audit toolkit.")
    parser.add_argument("--version", action="version", version=f"xshift {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    def add(name, fn, help_text, *, study=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--out", help="output directory (default: manifest output_dir)")
        if study:
            p.add_argument("--manifest", required=True, help="study manifest JSON")
            p.add_argument("--uncertain-policy", choices=data.UNCERTAIN_POLICIES,
                           help="override the manifest's handling of uncertain labels")
        return p

    def tasks_opt(p):
        p.add_argument("--tasks", type=lambda s: [t for t in s.split(",") if t],
                       help="comma-separated task subset")

    def pair_opts(p):
        p.add_argument("--model-a", required=True)
        p.add_argument("--model-b", required=True)
        p.add_argument("--dataset", required=True, help="test dataset (calibration labels)")
        p.add_argument("--task", required=True)

    def probe_opts(p, seeds=False):
        p.add_argument("--lambda", dest="lam", type=_lambda, default=1.0,
                       help="alignment regularizer strength")
        p.add_argument("--seed", type=_seed, default=0)
        p.add_argument("--max-iter", type=int, default=20000)
        if seeds:
            p.add_argument("--seeds", type=_seed_list,
                           help="comma-separated training seeds (default: --seed)")

    add("harmonize", cmd_harmonize, "harmonize label files onto the task vocabulary")
    tasks_opt(add("auc-matrix", cmd_auc_matrix, "AUC of every model on every test set and task"))
    add("loo", cmd_loo, "self-only / all-except / all-including comparison")
    p = add("kappa-matrix", cmd_kappa_matrix, "pairwise kappa between models per task")
    p.add_argument("--dataset", help="test dataset (default: every labelled dataset)")
    p.add_argument("--members-mode", choices=protocols.MEMBER_MODES, default="ensemble")
    tasks_opt(p)
    tasks_opt(add("seed-agreement", cmd_seed_agreement, "kappa between seeds of one model"))
    pair_opts(add("bland-altman", cmd_bland_altman, "Bland-Altman analysis of two models"))
    p = add("relabel-agreement", cmd_relabel_agreement, "F1 between two labelings")
    p.add_argument("--reference", required=True, help="reference label dataset")
    p.add_argument("--comparison", required=True, help="comparison label dataset")
    p.add_argument("--pair", action="append", metavar="REF_TASK=COMP_TASK",
                   help="explicit task pairing (repeatable)")
    p.add_argument("--ratings", help="sample_id,rater,value CSV for panel disagreement")
    p = add("mine-disagreements", cmd_mine_disagreements, "samples where two models differ most")
    pair_opts(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--label-filter", choices=("pos", "neg", "missing"))
    p.add_argument("--extra-labels", action="append", metavar="DATASET",
                   help="further label sources to report (repeatable)")
    probe_opts(add("probe-train", cmd_probe_train, "train the multi-head representation probe"))
    probe_opts(add("probe-pca", cmd_probe_pca, "2-D PCA of the probe's head vectors"))
    probe_opts(add("probe-distances", cmd_probe_distances, "same-task head distances"),
               seeds=True)
    probe_opts(add("similarity-auc", cmd_similarity_auc,
                   "head distance vs cross-domain AUC"), seeds=True)
    p = add("synth", cmd_synth, "generate a synthetic study", study=False)
    p.add_argument("--scenario", required=True, choices=sorted(synth.SCENARIOS))
    p.add_argument("--seed", type=_seed, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        args.func(args)
    except UsageError as exc:
        sys.stderr.write(str(exc).rstrip("\n") + "\n")
        return EXIT_USAGE
    except ArgumentError as exc:
        sys.stderr.write(f"xshift: error: {exc}\n")
        return EXIT_USAGE
    except DataError as exc:
        sys.stderr.write(f"xshift: data error: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
