import csv
import json

import pytest

from fundusfusion.cli import main
from fundusfusion.config import ConfigError, fusion_spec, load_config, resolve, training_order

SMALL = {
    "data": {"synthetic": {"n_patients": 60, "seed": 7}},
    "preprocess": {"image_size": 32},
    "encoder": {"head_learning_rate": 3e-3, "backbone_learning_rate": 3e-3},
    "train": {"epochs": 2},
    "models": {
        "fundus": {"strategy": "unimodal_fundus"},
        "demographic": {"strategy": "unimodal_demographic", "train": {"epochs": 3}},
        "intermediate": {"strategy": "intermediate"},
        "late": {"strategy": "late", "head_kind": "gbt", "prerequisites": {"fundus": "fundus"}},
        "vote": {"strategy": "voting", "prerequisites": {
            "fundus": "fundus", "demographic": "demographic", "intermediate": "intermediate"}},
    },
    "sweep": {"epochs": 1, "head_learning_rates": [1e-3, 3e-3],
              "backbone_learning_rates": [1e-4], "feature_dims": [8, None]},
    "eval": {"B": 100},
    "explain": {"k": 2},
}


def write_config(path, cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One trained run directory shared by the read-only CLI checks."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.json", SMALL)
    run = root / "run"
    common = ["--config", cfg, "--run-dir", str(run)]
    for cmd in (["split"], ["train"], ["eval"]):
        assert main(cmd + common) == 0, cmd
    return run, common


# ------------------------------------------------------------------ config

def test_defaults_resolve():
    cfg = resolve({})
    assert cfg["split"]["ratios"] == [0.6, 0.2, 0.2]
    assert cfg["eval"]["B"] == 10000
    assert training_order(cfg) == ["fundus", "demographic", "intermediate"]
    spec = fusion_spec(cfg, "intermediate")
    assert spec.encoder.image_size == 512 and spec.encoder.fundus_feature_dim == 8


@pytest.mark.parametrize("user, field", [
    ({"split": {"ratios": [0.5, 0.2, 0.2]}}, "split.ratios"),
    ({"train": {"epochs": 0}}, "train.epochs"),
    ({"bogus": 1}, "<root>"),
    ({"models": {"x": {"strategy": "late", "prerequisites": {"fundus": "y"}}}},
     "models.x.prerequisites.fundus"),
    ({"models": {"a": {"strategy": "late", "prerequisites": {"fundus": "b"}},
                 "b": {"strategy": "late", "prerequisites": {"fundus": "a"}}},
      "sweep": {"model": "a"}}, "cycle"),
    ({"eval": {"unit": "eye"}}, "eval.unit"),
])
def test_invalid_config_names_field(user, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        resolve(user)


def test_models_section_replaces_defaults(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.json", {
        "models": {"only": {"strategy": "unimodal_demographic"}}, "sweep": {"model": "only"}}))
    assert list(cfg["models"]) == ["only"]


def test_prerequisites_trained_first():
    assert training_order(resolve(SMALL)).index("vote") > training_order(resolve(SMALL)).index("intermediate")


# ------------------------------------------------------------------ CLI

def test_split_writes_files_and_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.json", SMALL)
    outs = []
    for k in range(2):
        run = tmp_path / f"r{k}"
        assert main(["split", "--config", cfg, "--run-dir", str(run)]) == 0
        files = {f: (run / "split" / f).read_bytes()
                 for f in ("split.csv", "split.json", "cohort_summary.json", "cohort_summary.txt")}
        outs.append(files)
    assert outs[0] == outs[1]
    rows = list(csv.DictReader(outs[0]["split.csv"].decode().splitlines()))
    assert len(rows) == 60 and {r["subset"] for r in rows} == {"train", "validation", "test"}
    manifest = json.loads((tmp_path / "r0" / "manifests" / "split.json").read_text())
    assert manifest["seeds"]["split"] == 0
    assert any(o["path"] == "split/split.csv" for o in manifest["outputs"])


def test_seed_flag_changes_split(tmp_path):
    cfg = write_config(tmp_path / "c.json", SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["split", "--config", cfg, "--run-dir", str(a)]) == 0
    assert main(["split", "--config", cfg, "--run-dir", str(b), "--seed", "5"]) == 0
    assert (a / "split" / "split.csv").read_bytes() != (b / "split" / "split.csv").read_bytes()
    assert json.loads((b / "split" / "split.json").read_text())["seed"] == 5


def test_bad_ratios_exit_one_and_name_field(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", {"split": {"ratios": [0.5, 0.2, 0.2]}})
    assert main(["split", "--config", cfg, "--run-dir", str(tmp_path / "r")]) == 1
    err = capsys.readouterr().err
    assert "split.ratios" in err and "0.9" in err
    assert not (tmp_path / "r" / "split").exists()


def test_usage_errors_exit_one(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["split", "--seed", "x"])
    assert exc.value.code == 1
    assert main(["split", "--workers", "0", "--run-dir", str(tmp_path)]) == 1


def test_missing_artifacts_exit_two(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", SMALL)
    run = str(tmp_path / "r")
    assert main(["eval", "--config", cfg, "--run-dir", run]) == 2
    assert "split" in capsys.readouterr().err
    assert main(["split", "--config", cfg, "--run-dir", run]) == 0
    assert main(["train", "--model", "late", "--config", cfg, "--run-dir", run]) == 2
    assert "models/fundus" in capsys.readouterr().err
    assert main(["compare", "nope", "fundus", "--config", cfg, "--run-dir", run]) == 1


def test_eval_report_contents(pipeline):
    run, _ = pipeline
    report = json.loads((run / "eval" / "intermediate" / "report.json").read_text())
    ms = report["bootstrap"]["metrics"]
    assert set(ms) == {"f1", "auc", "pr", "accuracy", "precision", "recall", "specificity"}
    for m in ms.values():
        assert m["ci_lo"] <= m["ci_hi"]
    assert report["bootstrap"]["B"] == 100 and report["subset"] == "test"
    assert set(report["subgroups"]["groups"]) == {"positive", "negative"}
    f1 = list(csv.DictReader(open(run / "eval" / "intermediate" / "bootstrap_f1.csv")))
    assert len(f1) == 100
    for f in ("table2.txt", "table3.txt", "roc_band.csv", "pr_band.csv", "roc.png", "pr.png"):
        assert (run / "eval" / "intermediate" / f).stat().st_size > 0
    assert "Diabetic" in (run / "eval" / "intermediate" / "table3.txt").read_text()


def test_train_manifest_and_access_log(pipeline):
    run, _ = pipeline
    m = json.loads((run / "manifests" / "train.json").read_text())
    assert {e["subset"] for e in m["data_access_log"]} == {"train", "validation"}
    assert m["notes"]["vote"]["fit_subset"] == "train"
    assert m["notes"]["late"]["head"]["kind"] == "gradient_boosted_trees"
    spec = json.loads((run / "models" / "late" / "spec.json").read_text())
    assert spec["trained"] and spec["fit_subset"] == "train"


def test_self_compare_is_zero(pipeline):
    run, common = pipeline
    assert main(["compare", "intermediate", "intermediate"] + common) == 0
    out = json.loads((run / "compare" / "intermediate_vs_intermediate.json").read_text())
    assert out["ci_lo"] == out["ci_hi"] == out["mean_difference"] == 0.0
    assert out["significant"] is False


def test_eval_independent_of_workers(pipeline, tmp_path):
    run, common = pipeline
    before = (run / "eval" / "late" / "report.json").read_bytes()
    bands = (run / "eval" / "late" / "roc_band.csv").read_bytes()
    assert main(["eval", "--model", "late", "--workers", "3"] + common) == 0
    assert (run / "eval" / "late" / "report.json").read_bytes() == before
    assert (run / "eval" / "late" / "roc_band.csv").read_bytes() == bands


def test_explain_sweep_report(pipeline):
    run, common = pipeline
    assert main(["explain"] + common) == 0
    index = json.loads((run / "explain" / "intermediate" / "index.json").read_text())
    assert len(index["images"]) <= 2
    assert main(["explain", "--model", "demographic"] + common) == 1
    assert main(["sweep"] + common) == 0
    assert "native" in (run / "sweep" / "matrix.txt").read_text()
    assert main(["report"] + common) == 0
    summary = json.loads((run / "report" / "summary.json").read_text())
    assert set(summary["models"]) == set(SMALL["models"])
    for f in ("f1_boxplot.png", "median_roc.png", "median_pr.png", "table2.txt"):
        assert (run / "report" / f).exists()
