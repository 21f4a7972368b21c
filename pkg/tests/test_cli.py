import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from blipvar.cli import main
from blipvar.inference import REPORT_SCHEMA
from blipvar.simlab.dgp import DgpSpec, draw_dataset


def run(*args, env=None):
    return subprocess.run(
        [sys.executable, "-m", "blipvar", *args], capture_output=True, text=True, env=env, timeout=600
    )


def write_case1(path, n=400, seed=3):
    ds, _ = draw_dataset(DgpSpec("case1", n=n), seed)
    rows = ["W1,W2,W3,W4,A,Y"]
    rows += [",".join(f"{v:.6f}" for v in ds.w[i]) + f",{int(ds.a[i])},{int(ds.y[i])}" for i in range(n)]
    path.write_text("\n".join(rows) + "\n")
    return path


def test_demo_estimate_is_byte_identical():
    args = ["estimate", "--demo", "--estimator", "cv-tmle", "--seed", "7", "--format", "json", "--draws", "200000"]
    a, b = run(*args), run(*args)
    assert a.returncode == 0, a.stderr
    assert a.stdout == b.stdout
    report = json.loads(a.stdout)
    jsonschema.validate(report, REPORT_SCHEMA)
    assert report["estimator"] == "cv-tmle" and report["seed"] == 7


def test_seed_falls_back_to_environment(capsys, monkeypatch):
    monkeypatch.setenv("BLIPVAR_SEED", "11")
    assert main(["quantile", "--rho", "0.3", "--draws", "20000", "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 11


def test_known_constant_propensity(tmp_path, capsys):
    csv = write_case1(tmp_path / "d.csv", n=200)
    code = main(["estimate", str(csv), "--estimator", "tmle", "--known-g", "0.5", "--format", "json", "--draws", "10000"])
    assert code == 0
    jsonschema.validate(json.loads(capsys.readouterr().out), REPORT_SCHEMA)


def test_named_dgp_propensity(tmp_path, capsys):
    csv = write_case1(tmp_path / "d.csv", n=200)
    assert main(["estimate", str(csv), "--known-g", "case1", "--folds", "5", "--draws", "10000"]) == 0
    assert "VTE" in capsys.readouterr().out


def test_plugin_underestimates_case1_truth(tmp_path, capsys):
    csv = write_case1(tmp_path / "d.csv", n=1000, seed=8)
    assert main(["estimate", str(csv), "--estimator", "lr-plugin", "--format", "json", "--draws", "10000"]) == 0
    vte = json.loads(capsys.readouterr().out)["rows"][1]["est"]
    assert vte < 0.0458


def test_sqrt_row_and_table_output(capsys, tmp_path):
    out = tmp_path / "r.txt"
    assert main(["estimate", "--demo", "--estimator", "lr-plugin", "--sqrt-vte", "--out", str(out), "--draws", "10000"]) == 0
    text = out.read_text()
    assert "sqrt(VTE)" in text and "simultaneous quantile" in text


@pytest.mark.parametrize(
    "argv,code",
    [
        (["estimate", "missing.csv"], 2),
        (["estimate", "--demo", "--y", "nope"], 3),
        (["estimate", "--demo", "--known-g", "1.5"], 3),
        (["estimate", "--demo", "--known-g", "sometimes"], 3),
        (["estimate", "--demo", "--estimator", "lr-plugin", "--known-g", "0.5"], 3),
        (["estimate", "--demo", "--folds", "150"], 3),
        (["estimate"], 3),
        (["check-eic", "--cases", "0"], 3),
        (["quantile", "--rho", "2"], 3),
        (["quantile", "--rho", "0", "--alpha", "1.2"], 3),
        (["simulate", "missing.json"], 2),
    ],
)
def test_exit_codes(argv, code, capsys):
    try:
        got = main(argv)
    except SystemExit as exc:
        got = exc.code
    assert got == code


def test_numeric_failure_exit_code(tmp_path):
    p = tmp_path / "sep.csv"
    rows = ["W1,A,Y"] + [f"{x},{a},{int(x > 0)}" for x in range(-10, 11) if x != 0 for a in (0, 1)]
    p.write_text("\n".join(rows) + "\n")
    assert main(["estimate", str(p), "--estimator", "lr-plugin", "--draws", "1000"]) == 4


def test_quantile_values(capsys):
    assert main(["quantile", "--rho", "1", "--draws", "1000000"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(1.96, abs=0.005)
    assert main(["quantile", "--rho", "0", "--draws", "1000000"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(2.2365, abs=0.005)
    assert main(["quantile", "--rho", "0", "--alpha", "0.5", "--draws", "1000000"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(1.0518, abs=0.005)


def test_quantile_from_file(tmp_path, capsys):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"corr": np.eye(3).tolist()}))
    assert main(["quantile", "--corr-file", str(f), "--draws", "200000", "--format", "json"]) == 0
    q = json.loads(capsys.readouterr().out)["q"]
    assert q > 2.3


def test_check_eic_passes_and_mutation_fails(capsys):
    assert main(["check-eic"]) == 0
    assert "20/20" in capsys.readouterr().out
    assert main(["check-eic", "--cases", "5", "--mutate", "d2-sign", "--format", "json"]) == 1
    report = json.loads(capsys.readouterr().out)
    assert report["passed"] < 5 and report["failures"][0]["qbar1"]


def _smoke_config(tmp_path, **over):
    cfg = {
        "spec": {"kind": "case1"},
        "estimators": ["lr-plugin", "tmle-lr"],
        "reps": 1,
        "n_grid": [200],
        "alpha": 0.05,
        "seed": 5,
        "parallelism": 1,
        "truth_draws": 1000000,
    }
    cfg.update(over)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def test_simulate_smoke(tmp_path, capsys):
    cfg = _smoke_config(tmp_path, estimators=["lr-plugin"])
    assert main(["simulate", str(cfg), "--out", str(tmp_path / "o")]) == 0
    raw = (tmp_path / "o" / "raw_n200.csv").read_text().strip().splitlines()
    assert len(raw) == 2
    assert "lr-plugin" in capsys.readouterr().out


def test_simulate_schema_error_names_field(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"spec": {"kind": "case1"}, "estimators": ["lr-plugin"]}))
    assert main(["simulate", str(p)]) == 3
    assert "reps" in capsys.readouterr().err


def test_parallel_campaign_is_byte_identical(tmp_path):
    cfg = _smoke_config(tmp_path, reps=4, parallelism=2)
    outs = []
    for k in range(2):
        d = tmp_path / f"o{k}"
        r = run("simulate", str(cfg), "--out", str(d), "--format", "json")
        assert r.returncode == 0, r.stderr
        outs.append((r.stdout, (d / "metrics.csv").read_bytes(), (d / "raw_n200.csv").read_bytes()))
    serial = run("simulate", str(cfg), "--out", str(tmp_path / "s"), "--parallelism", "1", "--format", "json")
    assert outs[0] == outs[1]
    assert serial.stdout == outs[0][0]
