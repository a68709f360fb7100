import csv
import json
import subprocess
import sys

import pytest

from waffle.cli import EXIT_GATE, EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main

TINY = {
    "seed": 1,
    "dataset": {"synthetic": {"samples_per_class": 90, "height": 16, "width": 16}},
    "federation": {"n_clients": 8, "participants": 4, "rounds": 3, "batch_size": 16, "malicious_fraction": 0.25},
    "attacks": {"beta_max": 15},
    "detector": {"epochs": 2, "n_fictitious": 6, "hidden": [8, 4]},
    "spectral": {"J": 2, "L": 4},
    "pca": {"n_components": 3},
    "theory": {"trials": 20000},
}


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def _cfg_variant(tmp_path, name, detector=None, **spectral):
    d = json.loads(json.dumps(TINY))
    d["spectral"].update(spectral)
    d["detector"].update(detector or {})
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return p


def test_verify_theory_default_scenario(tmp_path, capsys):
    assert main(["verify-theory", "--out-dir", str(tmp_path)]) == EXIT_OK
    doc = json.loads((tmp_path / "theory.json").read_text())
    assert doc["bias"]["predicted_bias"] == pytest.approx(0.4)
    assert doc["passed"] and doc["schema_version"] == 1
    assert "predicted 0.4000" in capsys.readouterr().out


def test_train_then_detect_and_fingerprint_mismatch(tmp_path, tiny, capsys):
    out = tmp_path / "run"
    assert main(["train-detector", "--config", str(tiny), "--out-dir", str(out)]) == EXIT_OK
    assert (out / "detector.json").exists() and (out / "config.yaml").exists()
    assert main(["detect", "--config", str(tiny), "--out-dir", str(out)]) == EXIT_OK
    report = json.loads((out / "detection.json").read_text())
    m = report["metrics"]
    assert m["tp"] + m["tn"] + m["fp"] + m["fn"] == 8

    other = _cfg_variant(tmp_path, "other.json", L=6)
    capsys.readouterr()
    code = main(["detect", "--config", str(other), "--out-dir", str(tmp_path / "o"),
                 "--checkpoint", str(out / "detector.json")])
    assert code != EXIT_OK
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["type"] == "FingerprintMismatchError"


def test_detect_gate_failure(tmp_path, tiny):
    out = tmp_path / "g"
    main(["train-detector", "--config", str(tiny), "--out-dir", str(out)])
    assert main(["detect", "--config", str(tiny), "--out-dir", str(out), "--min-f1", "1.01"]) == EXIT_GATE


def test_fl_run_byte_identical(tmp_path, tiny):
    for name in ("a", "b"):
        assert main(["fl-run", "--config", str(tiny), "--out-dir", str(tmp_path / name),
                     "--detector", "oracle"]) == EXIT_OK
    for f in ("rounds.jsonl", "summary.csv", "fl_report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_fl_run_waffle_trains_detector(tmp_path):
    cfg = _cfg_variant(tmp_path, "trained.json",
                       detector={"epochs": 40, "learning_rate": 0.01, "n_fictitious": 10, "batch_size": 4})
    out = tmp_path / "w"
    assert main(["fl-run", "--config", str(cfg), "--out-dir", str(out), "--detector", "waffle_wst"]) == EXIT_OK
    assert (out / "detector_wst.json").exists()
    report = json.loads((out / "fl_report.json").read_text())
    assert report["detector"] == "waffle_wst" and report["detection"] is not None
    # reuse the checkpoint instead of retraining
    out2 = tmp_path / "w2"
    assert main(["fl-run", "--config", str(cfg), "--out-dir", str(out2), "--detector", "waffle_wst",
                 "--checkpoint", str(out / "detector_wst.json")]) == EXIT_OK
    assert (out / "rounds.jsonl").read_bytes() == (out2 / "rounds.jsonl").read_bytes()


def test_fl_run_untrained_detector_empties_federation(tmp_path, tiny, capsys):
    assert main(["fl-run", "--config", str(tiny), "--out-dir", str(tmp_path), "--detector", "waffle_wst"]) == EXIT_RUNTIME
    assert "EmptyFederationError" in capsys.readouterr().err


def test_seed_override_changes_output(tmp_path, tiny):
    main(["fl-run", "--config", str(tiny), "--out-dir", str(tmp_path / "s1")])
    main(["fl-run", "--config", str(tiny), "--out-dir", str(tmp_path / "s2"), "--seed", "7"])
    assert (tmp_path / "s1" / "rounds.jsonl").read_bytes() != (tmp_path / "s2" / "rounds.jsonl").read_bytes()


def test_spectral_dump(tmp_path, tiny):
    assert main(["spectral-dump", "--config", str(tiny), "--out-dir", str(tmp_path)]) == EXIT_OK
    rows = list(csv.reader((tmp_path / "embeddings.csv").open()))
    assert len(rows) == 9
    assert len(rows[0]) == 5 + 9


def test_report_and_schema_rejection(tmp_path, tiny, capsys):
    main(["verify-theory", "--config", str(tiny), "--out-dir", str(tmp_path)])
    main(["fl-run", "--config", str(tiny), "--out-dir", str(tmp_path)])
    assert main(["report", "--out-dir", str(tmp_path)]) == EXIT_OK
    rows = list(csv.reader((tmp_path / "report.csv").open()))
    assert {r[1] for r in rows[1:]} == {"theory", "federation"}
    doc = json.loads((tmp_path / "theory.json").read_text())
    doc["schema_version"] = 42
    (tmp_path / "theory.json").write_text(json.dumps(doc))
    assert main(["report", "--out-dir", str(tmp_path)]) == EXIT_RUNTIME


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("federation:\n  trim: 0.6\n")
    assert main(["verify-theory", "--config", str(p), "--out-dir", str(tmp_path)]) == EXIT_USAGE
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "config" and "federation.trim" in err["message"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "waffle", "verify-theory", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
