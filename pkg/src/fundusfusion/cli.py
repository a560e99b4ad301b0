"""Command-line entry points: split, train, sweep, eval, compare, explain, report.

Every command writes under ``--run-dir`` and leaves a run manifest in
``manifests/``.  Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import (
    CohortValidationError,
    ManifestError,
    SplitAssignment,
    cohort_summary,
    generate_synthetic_cohort,
    load_manifest,
    stratified_patient_split,
)
from .config import (
    ConfigError,
    fusion_spec,
    load_config,
    preprocess_config,
    resolve,
    signal_config,
    sweep_grid,
    train_config,
    training_order,
)
from .data import CohortAccess, SplitAccessError
from .evaluation import (
    ALL_METRICS,
    BACKEND,
    PredictionSet,
    bootstrap_ci,
    curve_band,
    paired_difference,
    subgroup_eval,
)
from .fusion import FusionSpecError, NeuralSystem, assemble, load_system, predict_proba, save_system

log = logging.getLogger("fundusfusion")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
METRIC_TITLES = {"f1": "F1", "auc": "AUC", "pr": "PR", "accuracy": "Accuracy",
                 "precision": "Precision", "recall": "Recall", "specificity": "Specificity"}


class MissingArtifactError(RuntimeError):
    """A command's prerequisite output is absent from the run directory."""


# ---------------------------------------------------------------- plumbing

def _json_dump(obj, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Run-directory bookkeeping for one command invocation."""

    def __init__(self, args, cfg: dict):
        self.args = args
        self.cfg = cfg
        self.dir = Path(args.run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []
        self.timings: dict[str, float] = {}
        self.access_log: list[dict] = []
        self.notes: dict = {}

    def out(self, *paths) -> None:
        self.outputs += [Path(p) for p in paths]

    @contextmanager
    def timed(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 3)

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(f"missing {path} ({hint})")
        return path

    def manifest(self, name: str) -> Path:
        import torch

        rel = lambda p: str(p.relative_to(self.dir)) if p.is_relative_to(self.dir) else str(p)
        body = {
            "command": self.args.command,
            "argv": sys.argv[1:],
            "config": self.cfg,
            "software": {"fundusfusion": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "torch": torch.__version__,
                         "bootstrap_backend": BACKEND},
            "seeds": {"split": self.cfg["split"]["seed"], "train": self.cfg["train"]["seed"],
                      "eval": self.cfg["eval"]["seed"], "explain": self.cfg["explain"]["seed"],
                      "synthetic": self.cfg["data"]["synthetic"]["seed"]},
            "workers": self.args.workers,
            "outputs": [{"path": rel(p), "sha256": _sha256(p)}
                        for p in sorted(set(self.outputs)) if p.is_file()],
            "timings_seconds": self.timings,
            "data_access_log": self.access_log,
            "notes": self.notes,
        }
        return _json_dump(body, self.dir / "manifests" / f"{name}.json")


def _apply_seed(cfg: dict, command: str, seed: int | None) -> dict:
    if seed is None:
        return cfg
    section = {"split": "split", "train": "train", "sweep": "train", "eval": "eval",
               "compare": "eval", "report": "eval", "explain": "explain"}[command]
    cfg[section]["seed"] = seed
    return resolve(cfg)


# ---------------------------------------------------------------- cohort

def _records(run: Run, create: bool = False):
    data = run.cfg["data"]
    if data["manifest"]:
        return load_manifest(data["manifest"], data["check_files"]), Path(data["manifest"])
    cohort_dir = run.dir / "cohort"
    manifest = cohort_dir / "manifest.csv"
    if not manifest.exists():
        if not create:
            raise MissingArtifactError(f"missing {manifest} (run `split` first)")
        syn = data["synthetic"]
        generate_synthetic_cohort(syn["n_patients"], signal_config(run.cfg), syn["seed"], cohort_dir)
        run.out(manifest)
    return load_manifest(manifest), manifest


def _split(run: Run) -> SplitAssignment:
    d = run.dir / "split"
    run.require(d / "split.csv", "run `split` first")
    return SplitAssignment.read(d / "split.csv", d / "split.json")


def _access(run: Run, need_images: bool = True, image_size: int | None = None) -> CohortAccess:
    records, _ = _records(run)
    return CohortAccess(records, _split(run), preprocess_config(run.cfg, image_size), need_images)


def _model_dir(run: Run, name: str) -> Path:
    return run.dir / "models" / name


def _load_model(run: Run, name: str):
    if name not in run.cfg["models"]:
        raise ConfigError(f"models: unknown model {name!r}")
    d = _model_dir(run, name)
    run.require(d / "spec.json", f"train model {name!r} first")
    return load_system(d)


def _check_names(cfg: dict, names) -> None:
    unknown = sorted(set(names) - set(cfg["models"]))
    if unknown:
        raise ConfigError(f"models: unknown model(s) {unknown}")


def _needs_images(cfg: dict, names) -> bool:
    _check_names(cfg, names)
    return any(cfg["models"][n]["strategy"] != "unimodal_demographic"
               or cfg["models"][n].get("prerequisites") for n in names)


# ---------------------------------------------------------------- commands

def cmd_split(run: Run) -> None:
    cfg = run.cfg
    with run.timed("load"):
        records, manifest = _records(run, create=True)
    with run.timed("split"):
        split = stratified_patient_split(records, cfg["split"]["ratios"], cfg["split"]["seed"])
    d = run.dir / "split"
    d.mkdir(parents=True, exist_ok=True)
    split.write(d / "split.csv", d / "split.json")
    summary = cohort_summary(records)
    _json_dump(summary.to_dict(), d / "cohort_summary.json")
    (d / "cohort_summary.txt").write_text(summary.render())
    per_subset = {s: cohort_summary(split.select(records, s)).to_dict()
                  for s in ("train", "validation", "test") if split.select(records, s)}
    _json_dump(per_subset, d / "subset_summaries.json")
    run.out(d / "split.csv", d / "split.json", d / "cohort_summary.json",
            d / "cohort_summary.txt", d / "subset_summaries.json")
    run.notes["manifest"] = str(manifest)
    run.notes["sizes"] = split.sizes()
    for w in split.warnings:
        log.warning(w)
    print(f"split {split.sizes()} -> {d}")


def cmd_train(run: Run) -> None:
    cfg = run.cfg
    names = run.args.model or training_order(cfg)
    _check_names(cfg, names)
    order = [n for n in training_order(cfg) if n in names]
    access = _access(run, _needs_images(cfg, order))
    with access.phase("training"):
        train_t, val_t = access.table("train"), access.table("validation")
        for name in order:
            prereqs = {role: _load_model(run, ref)
                       for role, ref in cfg["models"][name].get("prerequisites", {}).items()}
            spec = fusion_spec(cfg, name, prereqs)
            model = assemble(spec)
            d = _model_dir(run, name)
            stats = {"age_mean": access.scaler.mean, "age_std": access.scaler.std,
                     "preprocess": cfg["preprocess"]}
            with run.timed(f"train:{name}"):
                if isinstance(model, NeuralSystem):
                    from .training import train

                    tcfg = train_config(cfg, name)
                    best, hist = train(model, train_t, val_t, tcfg, checkpoint_dir=d / "checkpoints")
                    run.out(hist.to_csv(d / "history.csv"), d / "checkpoints" / "index.json",
                            best.path)
                    run.notes[name] = {"best_epoch": best.epoch, "validation": best.metrics,
                                       "optimizer": {"kind": "AdamW (decoupled decay)",
                                                     "betas": list(tcfg.betas),
                                                     "weight_decay": tcfg.weight_decay,
                                                     "schedule": "cosine per iteration",
                                                     "lr_min": tcfg.lr_min}}
                    print(f"{name}: best epoch {best.epoch} validation AUC {best.metrics['auc']:.4f}")
                else:
                    model.fit(train_t, "train")
                    head = getattr(model, "head", None)
                    run.notes[name] = {"fit_subset": "train",
                                       "head": None if head is None else
                                       {"kind": head.kind, "best_params": head.best_params,
                                        "calibration": head.calibration}}
                    print(f"{name}: fitted {model.spec.head_kind} head on the training subset")
            run.out(*save_system(model, d, stats))
    run.access_log = access.access_log


def cmd_sweep(run: Run) -> None:
    from .training import sweep

    cfg = run.cfg
    s = cfg["sweep"]
    name = s["model"]
    prereqs = {role: _load_model(run, ref)
               for role, ref in cfg["models"][name].get("prerequisites", {}).items()}
    spec = fusion_spec(cfg, name, prereqs)
    logs = []

    def data(size):
        access = _access(run, _needs_images(cfg, [name]), size)
        with access.phase("training"):
            out = access.table("train"), access.table("validation")
        logs.extend(access.access_log)
        return out

    with run.timed("sweep"):
        result = sweep(spec, sweep_grid(cfg), data, train_config(cfg, name, epochs=s["epochs"]))
    d = run.dir / "sweep"
    d.mkdir(parents=True, exist_ok=True)
    result.to_csv(d / "results.csv")
    (d / "matrix.txt").write_text(result.render_matrix(*s["matrix"]))
    _json_dump({"model": name, "best": result.best, "cells": result.rows}, d / "best.json")
    run.out(d / "results.csv", d / "matrix.txt", d / "best.json")
    run.access_log = logs
    print(f"sweep best: {result.best}")


def _predictions(run: Run, name: str, access: CohortAccess) -> PredictionSet:
    model = _load_model(run, name)
    with access.phase("evaluation"):
        table = access.table(run.cfg["eval"]["subset"])
    return predict_proba(model, table)


def _fmt_row(label: str, cis: dict, metrics=ALL_METRICS) -> str:
    return "\t".join([label] + [cis[m].format() if m in cis else "n/a" for m in metrics])


def _table_header(first: str) -> str:
    return "\t".join([first] + [METRIC_TITLES[m] for m in ALL_METRICS])


def _plot_band(band, path: Path, title: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    for name, style in (("lower", ":"), ("median", "-"), ("upper", ":")):
        x, y = band.curves[name]
        ax.step(x, y, style, where="post", label=f"{name} ({band.run_areas[name]:.3f})")
    if band.kind == "roc":
        ax.plot([0, 1], [0, 1], color="grey", lw=0.5)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
    else:
        ax.set_xlabel("Recall")
        ax.set_ylabel("Precision")
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    e = cfg["eval"]
    names = run.args.model or list(cfg["models"])
    access = _access(run, _needs_images(cfg, names))
    for name in names:
        d = run.dir / "eval" / name
        d.mkdir(parents=True, exist_ok=True)
        with run.timed(f"predict:{name}"):
            preds = _predictions(run, name, access)
        preds.to_csv(d / "predictions.csv")
        kw = dict(B=e["B"], seed=e["seed"], threshold=e["threshold"], level=e["level"],
                  unit=e["unit"], workers=run.args.workers)
        with run.timed(f"bootstrap:{name}"):
            res = bootstrap_ci(preds, ALL_METRICS, **kw)
            sub = subgroup_eval(preds, "diabetes", **kw)
            bands = {k: curve_band(preds, k, e["B"], e["seed"], e["level"], e["unit"],
                                   run.args.workers) for k in ("roc", "pr")}
        report = {"model": name, "strategy": cfg["models"][name]["strategy"],
                  "subset": e["subset"], "n_images": len(preds),
                  "n_patients": int(len(set(preds.patient_id))),
                  "bootstrap": res.to_dict(), "subgroups": sub.to_dict(),
                  "curve_bands": {k: {"runs": b.runs, "areas": b.run_areas}
                                  for k, b in bands.items()}}
        _json_dump(report, d / "report.json")
        (d / "table2.txt").write_text(_table_header("Model") + "\n"
                                      + _fmt_row(name, res.metrics) + "\n")
        lines = [_table_header("Subgroup")]
        for group, title in (("positive", "Diabetic"), ("negative", "Non-diabetic")):
            r = sub.results[group]
            label = f"{title} (n={sub.sizes[group]}, {sub.share(group):.0f}%)"
            lines.append(_fmt_row(label, r.metrics) if r else f"{label}\tno images")
        (d / "table3.txt").write_text("\n".join(lines) + "\n")
        with open(d / "bootstrap_f1.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "f1"])
            for i, v in enumerate(res.distributions["f1"]):
                w.writerow([i, repr(float(v))])
        for kind, band in bands.items():
            with open(d / f"{kind}_band.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["band", "fpr" if kind == "roc" else "recall",
                            "tpr" if kind == "roc" else "precision"])
                for row in band.rows():
                    w.writerow([row[0], repr(row[1]), repr(row[2])])
            _plot_band(band, d / f"{kind}.png", f"{name} {kind.upper()}")
        run.out(d / "predictions.csv", d / "report.json", d / "table2.txt", d / "table3.txt",
                d / "bootstrap_f1.csv", d / "roc_band.csv", d / "pr_band.csv",
                d / "roc.png", d / "pr.png")
        print(_fmt_row(name, res.metrics))
    run.access_log = access.access_log


def cmd_compare(run: Run) -> None:
    cfg = run.cfg
    e = cfg["eval"]
    a, b = run.args.model_a, run.args.model_b
    access = _access(run, _needs_images(cfg, [a, b]))
    pa, pb = _predictions(run, a, access), _predictions(run, b, access)
    with run.timed("paired_bootstrap"):
        res = paired_difference(pa, pb, e["metric"], e["B"], e["seed"], e["threshold"],
                                e["level"], e["unit"], run.args.workers)
    body = {"model_a": a, "model_b": b, "subset": e["subset"], "level": e["level"],
            "unit": e["unit"], "threshold": e["threshold"], **res.to_dict()}
    path = _json_dump(body, run.dir / "compare" / f"{a}_vs_{b}.json")
    run.out(path)
    run.access_log = access.access_log
    flag = "significant" if res.significant else "not significant"
    print(f"{e['metric']}({a}) - {e['metric']}({b}) = {res.format()} ({flag})")


def cmd_explain(run: Run) -> None:
    from .explain import explain_batch

    cfg = run.cfg
    x = cfg["explain"]
    name = run.args.model
    _check_names(cfg, [name])
    model = _load_model(run, name)
    if not isinstance(model, NeuralSystem) or not model.uses_images:
        raise ConfigError(f"explain: model {name!r} has no trainable fundus encoder")
    access = _access(run, True)
    with access.phase("evaluation"):
        table = access.table(cfg["eval"]["subset"])
    d = run.dir / "explain" / name
    with run.timed("grad_cam"):
        maps, files = explain_batch(model, table, x["k"], x["seed"], d, x["colormap"])
    _json_dump({"model": name, "seed": x["seed"], "target_layer": maps[0].target_layer,
                "images": [m.image_id for m in maps]}, d / "index.json")
    run.out(*files, d / "index.json")
    run.access_log = access.access_log
    print(f"{len(maps)} saliency maps -> {d}")


def cmd_report(run: Run) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    eval_dir = run.require(run.dir / "eval", "run `eval` first")
    names = [n for n in run.cfg["models"] if (eval_dir / n / "report.json").exists()]
    if not names:
        raise MissingArtifactError(f"no evaluation reports under {eval_dir} (run `eval` first)")
    d = run.dir / "report"
    d.mkdir(parents=True, exist_ok=True)
    reports = {n: json.loads((eval_dir / n / "report.json").read_text()) for n in names}

    def ci_text(m):
        return f"{m['point']:.3f} [{m['ci_lo']:.3f}, {m['ci_hi']:.3f}]"

    t2 = [_table_header("Model")]
    t3 = [_table_header("Model / subgroup")]
    for n, r in reports.items():
        ms = r["bootstrap"]["metrics"]
        t2.append("\t".join([n] + [ci_text(ms[m]) if m in ms else "n/a" for m in ALL_METRICS]))
        for group, title in (("positive", "diabetic"), ("negative", "non-diabetic")):
            g = r["subgroups"]["groups"][group]
            label = f"{n} / {title} (n={g['n']}, {g['percent']:.0f}%)"
            gm = g["report"]["metrics"] if g["report"] else {}
            t3.append("\t".join([label] + [ci_text(gm[m]) if m in gm else "n/a"
                                           for m in ALL_METRICS]))
    (d / "table2.txt").write_text("\n".join(t2) + "\n")
    (d / "table3.txt").write_text("\n".join(t3) + "\n")

    dists = {}
    for n in names:
        with open(eval_dir / n / "bootstrap_f1.csv") as fh:
            dists[n] = np.array([float(row["f1"]) for row in csv.DictReader(fh)])
    with open(d / "bootstrap_f1.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration"] + names)
        for i in range(min(len(v) for v in dists.values())):
            w.writerow([i] + [repr(float(dists[n][i])) for n in names])
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(names), 4))
    ax.boxplot([dists[n] for n in names], whis=(2.5, 97.5), showfliers=False)
    ax.set_xticks(range(1, len(names) + 1), names, rotation=20)
    ax.set_ylabel("bootstrap F1")
    fig.tight_layout()
    fig.savefig(d / "f1_boxplot.png", dpi=100, metadata={"Software": None})
    plt.close(fig)

    for kind, (xl, yl) in {"roc": ("fpr", "tpr"), "pr": ("recall", "precision")}.items():
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        for n in names:
            with open(eval_dir / n / f"{kind}_band.csv") as fh:
                rows = [r for r in csv.DictReader(fh) if r["band"] == "median"]
            area = reports[n]["curve_bands"][kind]["areas"]["median"]
            ax.step([float(r[xl]) for r in rows], [float(r[yl]) for r in rows], where="post",
                    label=f"{n} ({area:.3f})")
        ax.set_xlabel(xl)
        ax.set_ylabel(yl)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(d / f"median_{kind}.png", dpi=100, metadata={"Software": None})
        plt.close(fig)

    comparisons = []
    cmp_dir = run.dir / "compare"
    for p in sorted(cmp_dir.glob("*.json")) if cmp_dir.exists() else []:
        c = json.loads(p.read_text())
        comparisons.append({k: c[k] for k in ("model_a", "model_b", "metric", "mean_difference",
                                              "ci_lo", "ci_hi", "significant")})
    summary = {"models": names,
               "metrics": {n: reports[n]["bootstrap"]["metrics"] for n in names},
               "comparisons": comparisons}
    _json_dump(summary, d / "summary.json")
    run.out(d / "table2.txt", d / "table3.txt", d / "bootstrap_f1.csv", d / "f1_boxplot.png",
            d / "median_roc.png", d / "median_pr.png", d / "summary.json")
    print((d / "table2.txt").read_text(), end="")


COMMANDS = {"split": cmd_split, "train": cmd_train, "sweep": cmd_sweep, "eval": cmd_eval,
            "compare": cmd_compare, "explain": cmd_explain, "report": cmd_report}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (defaults fill the rest)")
    common.add_argument("--run-dir", default="run", help="output directory (default: ./run)")
    common.add_argument("--seed", type=int, help="override the command's seed")
    common.add_argument("--workers", type=int, default=1,
                        help="bootstrap worker threads; results do not depend on it")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="fundusfusion",
                     description="Train and evaluate fundus and demographic fusion classifiers.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("split", parents=[common], help="split patients and summarize the cohort")
    p = sub.add_parser("train", parents=[common], help="train or fit configured models")
    p.add_argument("--model", action="append", help="model name (repeatable; default all)")
    sub.add_parser("sweep", parents=[common], help="learning-rate / feature-size grid search")
    p = sub.add_parser("eval", parents=[common], help="bootstrap reports for trained models")
    p.add_argument("--model", action="append", help="model name (repeatable; default all)")
    p = sub.add_parser("compare", parents=[common], help="paired bootstrap difference test")
    p.add_argument("model_a")
    p.add_argument("model_b")
    p = sub.add_parser("explain", parents=[common], help="Grad-CAM maps on positive images")
    p.add_argument("--model", default="intermediate")
    sub.add_parser("report", parents=[common], help="bundle evaluation tables and figures")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config) if args.config else resolve({})
        cfg = _apply_seed(cfg, args.command, args.seed)
        import torch

        # one intra-op thread keeps training bit-reproducible; --workers only
        # parallelizes the bootstrap, whose draws are counter-based
        torch.set_num_threads(1)
        run = Run(args, cfg)
        with run.timed("total"):
            COMMANDS[args.command](run)
        name = args.command
        if args.command in ("train", "eval") and args.model:
            name += "-" + "-".join(args.model)
        elif args.command in ("explain",):
            name += "-" + args.model
        elif args.command == "compare":
            name += f"-{args.model_a}-vs-{args.model_b}"
        run.manifest(name)
        return EXIT_OK
    except (ConfigError, ManifestError, CohortValidationError, FusionSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (MissingArtifactError, SplitAccessError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - surfaced as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
