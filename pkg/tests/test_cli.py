import json
import re

import numpy as np
import pytest
from click.testing import CliRunner

from gazeshield import experiments
from gazeshield.cli import PASSPHRASE_ENV, main
from gazeshield.config import DEFAULT_CONFIG, ConfigError, deep_merge, resolve_config
from gazeshield.data import load_dataset

FAST = {
    "data": {"synthetic": {"records_per_student_per_level": 30, "signature_separation": 6.0}},
    "scenario1": {"rf": {"n_estimators": 10}},
    "scenario2": {"rf": {"n_estimators": 10}},
    "scenario3": {"rf": {"n_estimators": 10}},
    "scenario4": {"n_init": 2, "iforest": {"n_trees": 20}},
    "phase2": {"rounds": 2, "folds": 2, "epochs": 2, "kdf_iterations": 1000},
}


@pytest.fixture
def runner():
    return CliRunner(env={PASSPHRASE_ENV: "admin pass"})


def _config(tmp_path, extra=None, name="cfg.json"):
    doc = deep_merge(FAST, extra or {})
    doc["out"] = str(tmp_path / "out")
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


def _invoke(runner, *args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


def test_config_precedence(tmp_path):
    path = _config(tmp_path, {"seed": 5})
    assert resolve_config()["seed"] == DEFAULT_CONFIG["seed"]
    assert resolve_config(path)["seed"] == 5
    assert resolve_config(path, {"seed": 9})["seed"] == 9
    cfg = resolve_config(path, {"seed": None})
    assert cfg["seed"] == 5 and cfg["scenario1"]["rf"]["n_estimators"] == 10
    assert cfg["scenario1"]["rf"]["min_samples_split"] == 2


def test_config_rejects_unknown_keys(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"scenario1": {"bogus": 1}}))
    with pytest.raises(ConfigError):
        resolve_config(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        resolve_config(bad)
    with pytest.raises(ConfigError):
        resolve_config(tmp_path / "missing.json")


def test_synth_default_and_rerun(tmp_path, runner):
    out = tmp_path / "o"
    assert _invoke(runner, "synth", "--out", out).exit_code == 0
    csv_path = out / "synth" / "dataset.csv"
    assert len(load_dataset(csv_path).dataset) == 2700
    first = csv_path.read_bytes()
    assert _invoke(runner, "synth", "--out", out).exit_code == 0
    assert csv_path.read_bytes() == first
    prov = json.loads((out / "synth" / "provenance.json").read_text())
    assert prov["seed"] == 42 and prov["dataset"]["n_rows"] == 2700


def test_invalid_config_writes_nothing(tmp_path, runner):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"out": str(tmp_path / "o"), "nope": True}))
    res = runner.invoke(main, ["synth", "--config", str(bad)])
    assert res.exit_code == 2
    assert not (tmp_path / "o").exists()


def test_data_error_exit_code(tmp_path, runner):
    csv_path = tmp_path / "d.csv"
    csv_path.write_text("a,b\n1,2\n")
    res = runner.invoke(main, ["scenario1", "--data", str(csv_path), "--out", str(tmp_path / "o")])
    assert res.exit_code == 3


def test_scenario1_report(tmp_path, runner):
    cfg = _config(tmp_path)
    assert _invoke(runner, "scenario1", "--config", cfg).exit_code == 0
    rep = json.loads((tmp_path / "out" / "scenario1" / "report.json").read_text())
    assert set(rep["models"]) == {"rf", "dt"}
    for m in rep["models"].values():
        assert len(m["cv_accuracy"]) == 5
        assert abs(sum(m["feature_importance"].values()) - 1) <= 1e-9
    conf = (tmp_path / "out" / "scenario1" / "confusion_rf.csv").read_text().splitlines()
    header = conf[0].split(",")
    assert header[0] == "true\\pred" and len(conf) == len(header)
    assert [r.split(",")[0] for r in conf[1:]] == header[1:]


def test_missing_level_is_data_error(tmp_path, runner):
    cfg = _config(tmp_path, {"data": {"synthetic": {"levels": [1, 2]}}})
    assert runner.invoke(main, ["scenario1", "--config", str(cfg)]).exit_code == 3


def test_gap_report_written(tmp_path, runner):
    cfg = _config(tmp_path)
    assert _invoke(runner, "scenario2", "--config", cfg).exit_code == 0
    assert not (tmp_path / "out" / "gap_report.json").exists()
    assert _invoke(runner, "scenario3", "--config", cfg).exit_code == 0
    gap = json.loads((tmp_path / "out" / "gap_report.json").read_text())
    assert gap["gap"] == pytest.approx(gap["accuracy_scenario3"] - gap["accuracy_scenario2"])


def test_scenario4_report(tmp_path, runner):
    cfg = _config(tmp_path)
    assert _invoke(runner, "scenario4", "--config", cfg).exit_code == 0
    rep = json.loads((tmp_path / "out" / "scenario4" / "decisions.json").read_text())
    assert rep["held_out_id"] == 9 and rep["known_ids"] == list(range(1, 9))
    assert len(rep["queries"]) == 90
    for q in rep["queries"]:
        assert [d["strategy"] for d in q["decisions"]] == ["sequential", "similarity", "outlier", "clustering",
                                                           "feature_hash", "ensemble"]
    wcss = (tmp_path / "out" / "scenario4" / "wcss.csv").read_text().splitlines()
    assert wcss[0] == "k,wcss,silhouette" and len(wcss) == 6


def _scenario4_cfg(seed, **synthetic):
    cfg = resolve_config(None, {"seed": seed})
    cfg["data"]["synthetic"].update(synthetic)
    cfg["scenario4"]["n_init"] = 3
    return cfg


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_scenario4_far_student_gets_new_id(seed):
    cfg = _scenario4_cfg(seed, outlier_offset=8.0)
    ds, summary = experiments.load_data(cfg)
    rep = json.loads(experiments.run_scenario4(cfg, ds, summary)["decisions.json"])
    assert rep["summary"]["ensemble"]["new_fraction"] >= 0.9


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_scenario4_clone_matches_source(seed):
    cfg = _scenario4_cfg(seed, clone_of=1)
    ds, summary = experiments.load_data(cfg)
    rep = json.loads(experiments.run_scenario4(cfg, ds, summary)["decisions.json"])
    sim = rep["summary"]["similarity"]
    assert sim["matched_ids"].get("1", 0) / len(rep["queries"]) >= 0.9


@pytest.mark.parametrize("seed", range(5))
def test_gap_shrinks_without_drift(seed):
    cfg = resolve_config(None, {"seed": seed})
    for sec in ("scenario2", "scenario3"):
        cfg[sec]["models"] = ["rf"]
        cfg[sec]["cv_folds"] = 2
    ds, summary = experiments.load_data(cfg)
    s2 = json.loads(experiments.run_scenario2(cfg, ds, summary)["report.json"])
    s3 = json.loads(experiments.run_scenario3(cfg, ds, summary)["report.json"])
    assert abs(experiments.gap_report(s2, s3, "rf")["gap"]) < 0.05


def test_scenario3_per_class_f1():
    cfg = resolve_config(None, {"seed": 3})
    cfg["scenario3"]["models"] = ["rf"]
    cfg["scenario3"]["cv_folds"] = 2
    ds, summary = experiments.load_data(cfg)
    rep = json.loads(experiments.run_scenario3(cfg, ds, summary)["report.json"])
    assert all(m["f1"] >= 0.99 for m in rep["models"]["rf"]["test"]["per_class"].values())


def test_phase2_resolve_and_report(tmp_path, runner):
    cfg = _config(tmp_path)
    out = tmp_path / "out"
    res = _invoke(runner, "phase2", "--config", cfg)
    assert res.exit_code == 0, res.output
    audit = json.loads((out / "phase2" / "privacy_audit.json").read_text())
    assert audit["passed"] and audit["labels_all_dummy_format"]
    header = (out / "phase2" / "confusion.csv").read_text().splitlines()[0].split(",")[1:]
    assert len(header) == 9 and all(re.fullmatch(r"[a-z]+[0-9]{3}", h) for h in header)
    assert sorted(p.name for p in (out / "phase2" / "weights").iterdir()) == ["round_01.gzw", "round_02.gzw"]
    vault_path = out / "phase2" / "vault.json"
    assert oct(vault_path.stat().st_mode & 0o777) == "0o600"

    dummy = header[0]
    ok = _invoke(runner, "resolve", dummy, "--epoch", 0, "--config", cfg)
    assert ok.exit_code == 0 and re.fullmatch(r"[1-9]\n", ok.output)
    assert runner.invoke(main, ["resolve", "zzz999", "--config", str(cfg)]).exit_code == 5
    bad = CliRunner(env={PASSPHRASE_ENV: "wrong"}).invoke(main, ["resolve", dummy, "--config", str(cfg)])
    assert bad.exit_code == 4
    audit_log = json.loads(vault_path.read_text())["audit"]
    assert [a["outcome"] for a in audit_log] == ["resolved", "not_found", "denied"]

    rep = _invoke(runner, "report", "--config", cfg)
    assert rep.exit_code == 0 and "INVALID" not in rep.output
    assert "phase2/report.json" in rep.output


def test_phase2_rotation_changes_labels(tmp_path, runner):
    cfg = _config(tmp_path, {"phase2": {"rounds": 1}})
    out = tmp_path / "out" / "phase2"
    _invoke(runner, "phase2", "--config", cfg)
    first = (out / "confusion.csv").read_text().splitlines()[0]
    _invoke(runner, "phase2", "--config", cfg, "--rotate-epoch")
    second = (out / "confusion.csv").read_text().splitlines()[0]
    assert first != second
    assert json.loads((out / "report.json").read_text())["epoch"] == 1
    old = first.split(",")[1]
    stale = runner.invoke(main, ["resolve", old, "--config", str(cfg)])
    assert stale.exit_code == 5
    assert _invoke(runner, "resolve", old, "--epoch", 0, "--config", cfg).exit_code == 0


def test_prompted_passphrase(tmp_path):
    cfg = _config(tmp_path, {"phase2": {"rounds": 1}})
    r = CliRunner()
    res = r.invoke(main, ["phase2", "--config", str(cfg)], input="pw\npw\n")
    assert res.exit_code == 0, res.output
    assert "pw" not in res.output.replace("admin passphrase", "")


def test_report_flags_invalid(tmp_path, runner):
    out = tmp_path / "o"
    out.mkdir()
    (out / "x.json").write_text(json.dumps({"kind": "gazeshield.gap_report"}))
    res = runner.invoke(main, ["report", "--out", str(out)])
    assert res.exit_code == 2 and "INVALID" in res.output


def test_privacy_audit_detects_leaks():
    labels = ["oak123", "fern456"]
    clean = {"a.json": b'{"labels": ["oak123"]}\n', "c.csv": b"true\\pred,oak123\noak123,5\n"}
    assert experiments.privacy_audit(clean, [5, 7], labels)["passed"]
    leaky = {"a.json": b'{"labels": ["5"]}\n'}
    assert not experiments.privacy_audit(leaky, [5, 7], labels)["passed"]
    leaky = {"c.csv": b"true\\pred,7\n7,1\n"}
    assert not experiments.privacy_audit(leaky, [5, 7], labels)["passed"]
    leaky = {"a.json": b'{"student_id": 1}\n'}
    assert not experiments.privacy_audit(leaky, [5, 7], labels)["passed"]
    assert not experiments.privacy_audit({}, [5], ["5"])["passed"]
