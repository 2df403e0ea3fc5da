import json
import os

import numpy as np
import pytest

from mfgstop.cli import main

BASE_CONFIG = {
    "problem": "sosmfg",
    "method": "continuation",
    "grid": {"dim": 1, "bounds": [[0.0, 1.0]], "n_interior": [31]},
    "cost": {"kind": "local_power", "a": 1.0, "p": 1.0,
             "f0": {"kind": "constant", "value": -0.5}},
    "rho": {"kind": "raised_cosine", "peak": 1.0},
    "eps_schedule": {"start": 0.1, "factor": 4.0, "stages": 8},
    "tolerances": {
        "outer": 1e-9, "pde": 1e-8,
        "acceptance": {"r_obstacle": 1e-6, "r_continuation": 1e-6,
                       "r_subsolution": 1e-6, "r_contact": 1e-6, "r_duality": 1e-6},
    },
    "seed": 0,
}


def write_config(tmp_path, overrides=None, name="cfg.json"):
    cfg = json.loads(json.dumps(BASE_CONFIG))
    for key, value in (overrides or {}).items():
        if value is None:
            cfg.pop(key, None)
        else:
            cfg[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def test_run_monotone_1d_succeeds(tmp_path):
    cfg = write_config(tmp_path, {"output_dir": str(tmp_path / "out")})
    assert main(["run", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    for name in ("u.csv", "m.csv", "report.json", "convergence.csv", "manifest.json"):
        assert (out / name).exists()
    report = json.loads((out / "report.json").read_text())
    assert report["r_duality"] <= 1e-6
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["version"]
    assert len(manifest["config_sha256"]) == 64


def test_run_is_bitwise_deterministic(tmp_path):
    cfg1 = write_config(tmp_path, {"output_dir": str(tmp_path / "a")}, "c1.json")
    cfg2 = write_config(tmp_path, {"output_dir": str(tmp_path / "b")}, "c2.json")
    assert main(["run", "--config", str(cfg1)]) == 0
    assert main(["run", "--config", str(cfg2)]) == 0
    for name in ("u.csv", "m.csv", "report.json", "convergence.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_incompatible_method_rejected(tmp_path):
    cfg = write_config(tmp_path, {
        "problem": "osmfg", "method": "variational",
        "timegrid": {"horizon": 1.0, "n_steps": 10},
        "m0": {"kind": "gaussian"}, "rho": None,
    })
    assert main(["run", "--config", str(cfg)]) == 2


def test_missing_file_rejected(tmp_path):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 2


def test_malformed_json_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"problem": "sosmfg",')
    assert main(["run", "--config", str(path)]) == 2


def test_missing_acceptance_thresholds_rejected(tmp_path):
    cfg = write_config(tmp_path, {"tolerances": {"outer": 1e-9, "pde": 1e-8}})
    assert main(["run", "--config", str(cfg)]) == 2


def test_verify_round_trip_and_corruption(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, {"output_dir": str(out)})
    assert main(["run", "--config", str(cfg)]) == 0
    assert main(["verify", "--u", str(out / "u.csv"), "--m", str(out / "m.csv"),
                 "--config", str(cfg)]) == 0
    # corrupt one density node: residuals jump, exit 1
    lines = (out / "m.csv").read_text().splitlines()
    cells = lines[16].split(",")
    cells[-1] = format(float(cells[-1]) + 1.0, ".17g")
    lines[16] = ",".join(cells)
    bad = tmp_path / "m_bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["verify", "--u", str(out / "u.csv"), "--m", str(bad),
                 "--config", str(cfg)]) == 1


def test_verify_empty_file_rejected(tmp_path):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, {"output_dir": str(out)})
    assert main(["run", "--config", str(cfg)]) == 0
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["verify", "--u", str(empty), "--m", str(out / "m.csv"),
                 "--config", str(cfg)]) == 2


def test_verify_reproduces_report(tmp_path, capsys):
    out = tmp_path / "out"
    cfg = write_config(tmp_path, {"output_dir": str(out)})
    assert main(["run", "--config", str(cfg)]) == 0
    stored = json.loads((out / "report.json").read_text())
    assert main(["verify", "--u", str(out / "u.csv"), "--m", str(out / "m.csv"),
                 "--config", str(cfg)]) == 0
    printed = json.loads(capsys.readouterr().out)
    for key in ("r_obstacle", "r_continuation", "r_subsolution", "r_contact", "r_duality"):
        assert abs(printed[key] - stored[key]) <= 1e-14


def test_scenario_counterexamples(tmp_path):
    assert main(["scenario", "nonuniqueness", "--out", str(tmp_path / "s1")]) == 0
    bundle = json.loads((tmp_path / "s1" / "scenario_nonuniqueness.json").read_text())
    assert bundle["confirmed"] is True
    assert main(["scenario", "nonexistence", "--out", str(tmp_path / "s2")]) == 0
    assert main(["scenario", "obstacle_nonuniqueness", "--out", str(tmp_path / "s3")]) == 0


def test_scenario_unknown_name(tmp_path):
    assert main(["scenario", "bogus", "--out", str(tmp_path)]) == 2


def test_output_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv("MFGSTOP_OUT", str(tmp_path / "env_out"))
    monkeypatch.chdir(tmp_path)
    cfg = write_config(tmp_path)  # no output_dir in config
    assert main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "env_out" / "report.json").exists()


def test_osmfg_run_and_verify(tmp_path):
    out = tmp_path / "osm"
    cfg = write_config(tmp_path, {
        "problem": "osmfg",
        "method": "continuation",
        "grid": {"dim": 1, "bounds": [[0.0, 1.0]], "n_interior": [15]},
        "timegrid": {"horizon": 0.5, "n_steps": 10},
        "m0": {"kind": "gaussian", "sigma": 0.1, "mass": 1.0},
        "rho": None,
        "obstacle": {"kind": "zero"},
        "eps_schedule": {"start": 0.1, "factor": 4.0, "stages": 5},
        "tolerances": {"outer": 1e-9, "pde": 1e-8,
                       "acceptance": {"r_duality": 1e-4, "r_terminal": 1e-10,
                                      "r_initial": 1e-10}},
        "output_dir": str(out),
    })
    assert main(["run", "--config", str(cfg)]) == 0
    assert (out / "u_manifest.json").exists()
    assert main(["verify", "--u", str(out / "u_manifest.json"),
                 "--m", str(out / "m_manifest.json"), "--config", str(cfg)]) == 0
