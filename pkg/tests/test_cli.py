import json
import os

import numpy as np
import pytest

from dynpanel.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ---------------------------------------------------------------------------
# ratings

def test_ratings_grade(capsys):
    code, out, _ = run_cli(capsys, "ratings", "--grade", "AAA")
    assert code == 0
    assert out.strip() == "97.50"


def test_ratings_value(capsys):
    code, out, _ = run_cli(capsys, "ratings", "--value", "96.3")
    assert code == 0
    assert out.strip() == "AAA"


def test_ratings_unknown_grade_exit_2(capsys):
    code, _, err = run_cli(capsys, "ratings", "--grade", "ZZZ")
    assert code == 2
    assert "unknown grade" in err


def test_ratings_export(tmp_path, capsys):
    path = tmp_path / "scale.csv"
    code, _, _ = run_cli(capsys, "ratings", "--export-csv", str(path))
    assert code == 0
    assert path.read_text().startswith("grade,description,value")


# ---------------------------------------------------------------------------
# describe

def test_describe_table1(table1_path, capsys, tmp_path):
    code, out, _ = run_cli(
        capsys, "describe", "--data", table1_path, "--wide", "pp",
        "--vars", "pp", "--out", "json", "--output-dir", str(tmp_path),
    )
    assert code == 0
    stats = json.loads(out)["pp"]
    assert stats["n"] > 250
    assert set(stats) == {"mean", "median", "max", "min", "sd",
                          "skewness", "kurtosis", "n"}


def test_describe_missing_file_exit_2(capsys):
    code, _, err = run_cli(capsys, "describe", "--data", "/no/such/file.csv")
    assert code == 2
    assert "/no/such/file.csv" in err


# ---------------------------------------------------------------------------
# estimate

def test_estimate_od_json_schema(brand_panel_csv, tmp_path, capsys):
    code, out, _ = run_cli(
        capsys, "estimate", "--data", brand_panel_csv, "--spec", "od",
        "--dep", "pp", "--ar", "1", "--exog", "bv", "--exog", "bt",
        "--instruments", "dyn(pp,2),dyn(bv,2),dyn(bt,2)",
        "--on-singular", "pinv", "--weighting", "two-step",
        "--out", "json", "--output-dir", str(tmp_path),
    )
    assert code == 0
    payload = json.loads(out)
    for key in ("coefficients", "se", "t", "r2", "j", "j_p"):
        assert key in payload
    assert set(payload["coefficients"]) == {"pp(-1)", "bv", "bt"}
    assert payload["n"] == 258
    manifest = json.loads((tmp_path / "estimate_manifest.json").read_text())
    assert manifest["command"] == "estimate"
    assert brand_panel_csv in manifest["inputs"]


def test_estimate_re_degenerate_annotated(tmp_path, capsys):
    # a panel with no between-entity variance: RE collapses to pooled
    rng = np.random.default_rng(2)
    rows = ["entity,period,y,x"]
    for a in range(40):
        y_prev = 0.0
        for t in range(1, 9):
            x = rng.standard_normal()
            y = 0.3 * y_prev + x + rng.standard_normal()
            rows.append(f"e{a},{t},{y!r},{x!r}")
            y_prev = y
    path = tmp_path / "nofx.csv"
    path.write_text("\n".join(rows) + "\n")
    code, out, _ = run_cli(
        capsys, "estimate", "--data", str(path), "--spec", "re", "--dep", "y",
        "--ar", "1", "--exog", "x", "--plain", "--output-dir", str(tmp_path),
    )
    assert code == 0
    assert "rho_u = 0; coefficients identical to pooled" in out


def test_estimate_missing_file_exit_2(tmp_path, capsys):
    code, _, err = run_cli(
        capsys, "estimate", "--data", str(tmp_path / "absent.csv"),
        "--spec", "od", "--dep", "pp", "--output-dir", str(tmp_path),
    )
    assert code == 2
    assert "absent.csv" in err


def test_estimate_failure_exit_1(brand_panel_csv, tmp_path, capsys):
    # singular weighting with on-singular=error is an estimation failure
    code, _, err = run_cli(
        capsys, "estimate", "--data", brand_panel_csv, "--spec", "od",
        "--dep", "pp", "--ar", "1", "--exog", "bv", "--exog", "bt",
        "--weighting", "two-step", "--output-dir", str(tmp_path),
    )
    assert code == 1
    assert "singular" in err.lower()


def test_estimate_fitted_out(brand_panel_csv, tmp_path, capsys):
    code, _, _ = run_cli(
        capsys, "estimate", "--data", brand_panel_csv, "--spec", "fd",
        "--dep", "pp", "--ar", "1", "--exog", "bv", "--exog", "bt",
        "--on-singular", "pinv", "--weighting", "one-step",
        "--fitted-out", "fit.csv", "--output-dir", str(tmp_path),
    )
    assert code == 0
    lines = (tmp_path / "fit.csv").read_text().strip().split("\n")
    assert lines[0] == ("entity,period,actual_transformed,fitted_transformed,"
                        "actual_level,fitted_level")
    assert len(lines) == 1 + 258


def test_estimate_plain_fe(brand_panel_csv, tmp_path, capsys):
    code, out, _ = run_cli(
        capsys, "estimate", "--data", brand_panel_csv, "--spec", "fe",
        "--dep", "pp", "--ar", "1", "--exog", "bv", "--exog", "bt",
        "--plain", "--out", "json", "--output-dir", str(tmp_path),
    )
    assert code == 0
    payload = json.loads(out)
    assert "pp(-1)" in payload["coefficients"]


# ---------------------------------------------------------------------------
# replicate

def test_replicate_five_columns_csv(brand_panel_csv, tmp_path, capsys):
    code, out, _ = run_cli(
        capsys, "replicate", "--data", brand_panel_csv,
        "--out", "csv", "--output-dir", str(tmp_path),
    )
    assert code == 0
    lines = out.strip().split("\n")
    assert lines[0] == "row,pooled,fe,re,od,fd"
    n_row = [l for l in lines if l.startswith("n,")][0]
    assert n_row.split(",")[4:6] == ["258", "258"]  # od and fd samples


def test_replicate_table_renders_258(brand_panel_csv, tmp_path, capsys):
    code, out, _ = run_cli(
        capsys, "replicate", "--data", brand_panel_csv,
        "--output-dir", str(tmp_path),
    )
    assert code == 0
    assert "258" in out
    for label in ("pp(-1)", "bv", "bt", "R-squared", "J-stat"):
        assert label in out


def test_replicate_requires_brand_series(tmp_path, capsys):
    rows = ["entity,period,pp"] + [f"e{a},{t},{a + t}.0" for a in range(5)
                                   for t in range(1, 6)]
    path = tmp_path / "pp_only.csv"
    path.write_text("\n".join(rows) + "\n")
    code, _, err = run_cli(
        capsys, "replicate", "--data", str(path), "--output-dir", str(tmp_path),
    )
    assert code == 2
    assert "bv" in err and "bt" in err


# ---------------------------------------------------------------------------
# simulate

def test_simulate_determinism(tmp_path, capsys):
    out_dir = tmp_path / "sim"
    args = ["simulate", "--entities", "40", "--periods", "8", "--rho", "0.5",
            "--reps", "5", "--seed", "7", "--estimators", "od,fd",
            "--weighting", "one-step", "--output-dir", str(out_dir)]
    code, _, _ = run_cli(capsys, *args)
    assert code == 0
    first = {
        name: (out_dir / name).read_bytes()
        for name in os.listdir(out_dir)
    }
    code, _, _ = run_cli(capsys, *args)
    assert code == 0
    second = {
        name: (out_dir / name).read_bytes()
        for name in os.listdir(out_dir)
    }
    assert first == second
    assert "mc_summary.csv" in first and "simulate_manifest.json" in first


def test_simulate_manifest_contents(tmp_path, capsys):
    out_dir = tmp_path / "sim2"
    code, _, _ = run_cli(
        capsys, "simulate", "--entities", "30", "--periods", "6",
        "--reps", "2", "--seed", "3", "--weighting", "one-step",
        "--output-dir", str(out_dir),
    )
    assert code == 0
    manifest = json.loads((out_dir / "simulate_manifest.json").read_text())
    assert manifest["seed"] == 3
    assert manifest["version"]
    assert sorted(manifest["outputs"]) == ["mc_summary.csv", "mc_summary.json"]


def test_simulate_unknown_estimator_exit_2(tmp_path, capsys):
    code, _, err = run_cli(
        capsys, "simulate", "--estimators", "bogus",
        "--reps", "1", "--output-dir", str(tmp_path),
    )
    assert code == 2
    assert "bogus" in err
