import json
import subprocess
import sys

import pytest

from landmarking.cli import main, read_config_file, resolve_config
from landmarking.data import load_dataset
from landmarking.errors import ConfigError

SIM = ["--set", "n_subjects=120", "--set", "baseline_hazard=2.0", "--set", "beta=-0.04",
       "--set", "censoring_rate=0.05", "--set", "max_time=12"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["simulate", "--seed", "7", "--out", str(d)] + SIM) == 0
    return ["--data-long", str(d / "longitudinal.csv"), "--data-surv", str(d / "survival.csv")]


def test_simulate_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--seed", "7", "--out", str(tmp_path / name)] + SIM) == 0
    for f in ("longitudinal.csv", "survival.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["simulate", "--seed", "8", "--out", str(tmp_path / "c")] + SIM) == 0
    assert (tmp_path / "a" / "survival.csv").read_bytes() != (tmp_path / "c" / "survival.csv").read_bytes()
    subs = load_dataset(tmp_path / "a" / "longitudinal.csv", tmp_path / "a" / "survival.csv")
    assert len(subs) == 120


@pytest.mark.parametrize("command, files", [
    ("km", ["km_survival.csv", "km_censoring.csv"]),
    ("fit-longitudinal", ["gp_fit.json"]),
    ("fit-revival", ["revival_model.json", "revival_means.csv"]),
    ("predict", ["predictions.csv", "predictions.json", "paths.csv"]),
])
def test_commands_deterministic(tmp_path, dataset, command, files):
    extra = ["--restarts", "1"] if command != "km" else []
    for name in ("a", "b"):
        assert main([command, "--out", str(tmp_path / name)] + dataset + extra) == 0
    for f in files:
        a = (tmp_path / "a" / f).read_bytes()
        assert a == (tmp_path / "b" / f).read_bytes()
        if f.endswith(".csv"):
            assert a.startswith(b"# config_sha256=")
        else:
            assert "config_hash" in json.loads(a)


def test_predict_outputs(tmp_path, dataset):
    assert main(["predict", "--out", str(tmp_path), "--methods", "LOCF,XHAT_GP", "--restarts", "0"] + dataset) == 0
    rows = (tmp_path / "predictions.csv").read_text().splitlines()
    assert rows[1] == "id,method,pi_hat"
    ids = [r.split(",")[0] for r in rows[2:]]
    assert ids == sorted(ids)
    assert {r.split(",")[1] for r in rows[2:]} == {"LOCF", "XHAT_GP"}
    body = json.loads((tmp_path / "predictions.json").read_text())
    assert set(body["cox"]) == {"LOCF", "XHAT_GP"}


def test_evaluate_kfold(tmp_path, dataset):
    args = ["evaluate", "--cv", "kfold", "--k", "3", "--methods", "LOCF,BLUP", "--restarts", "0"] + dataset
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    for f in ("evaluation.json", "evaluation.txt", "cv_predictions.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    report = json.loads((tmp_path / "a" / "evaluation.json").read_text())["report"]
    assert [m["method"] for m in report["methods"]] == ["LOCF", "BLUP"]
    assert "NULL" in (tmp_path / "a" / "evaluation.txt").read_text()


def test_window_beyond_tau_is_rejected(tmp_path, dataset, capsys):
    code = main(["predict", "--s", "8", "--w", "2", "--methods", "XHAT_REVIVAL", "--out", str(tmp_path)] + dataset)
    assert code == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "ConfigError"
    assert any("s + w <= tau" in v for v in err["violations"])


def test_all_violations_reported(tmp_path, capsys):
    code = main(["evaluate", "--s", "-1", "--w", "0", "--cv", "kfold", "--k", "1", "--methods", "FOO",
                 "--out", str(tmp_path)])
    assert code == 2
    v = json.loads(capsys.readouterr().err)["violations"]
    text = " ".join(v)
    for needle in ("s must be", "w must be", "k must be", "unknown method", "--data-long", "--data-surv"):
        assert needle in text


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# reproduction run\ns = 2\nw=1.5\nmethods=LOCF\nsim.n_subjects=30\nadjust_arm=yes\n")
    values = read_config_file(cfg)
    rc = resolve_config("simulate", values, {"s": 2.5, "w": None})
    assert rc.s == 2.5 and rc.w == 1.5 and rc.adjust_arm is True
    assert rc.sim_config().n_subjects == 30


def test_unknown_config_key(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        resolve_config("simulate", {"bogus": "1"}, {})


def test_simulation_settings_validated(tmp_path, capsys):
    code = main(["simulate", "--out", str(tmp_path), "--set", "n_subjects=0", "--set", "p_treated=3"])
    assert code == 2
    assert len(json.loads(capsys.readouterr().err)["violations"]) == 2


def test_data_error_is_structured(tmp_path, capsys):
    (tmp_path / "l.csv").write_text("id,time,value\n")
    (tmp_path / "s.csv").write_text("id,survtime,status,arm\np1,4,7,0\n")
    code = main(["km", "--data-long", str(tmp_path / "l.csv"), "--data-surv", str(tmp_path / "s.csv"),
                 "--out", str(tmp_path)])
    assert code == 1
    assert json.loads(capsys.readouterr().err)["error"] == "DataError"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "landmarking", "simulate", "--out", str(tmp_path),
                           "--set", "n_subjects=3"], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "survival.csv").exists()
