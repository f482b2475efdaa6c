"""Command-line interface: schemas, exit codes, artifacts, determinism."""

import csv
import json

import numpy as np
import pytest

from seqdml.cli import main


def run_cli(argv, capsys):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_ate_csv(path, n=400, seed=0, treated_only=False):
    rng = np.random.default_rng(seed)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "a", "x1"])
        for _ in range(n):
            x = rng.normal()
            a = 1 if treated_only else int(rng.uniform() < 0.5)
            y = 0.8 * a + x + 0.3 * rng.normal()
            writer.writerow([repr(float(y)), a, repr(float(x))])
    return path


def write_null_relevance_late_csv(path, n=600, seed=3):
    """Instrument unrelated to treatment: the moment Jacobian is near zero."""
    rng = np.random.default_rng(seed)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["y", "a", "z", "x1"])
        for _ in range(n):
            x = rng.normal()
            z = int(rng.uniform() < 0.4)
            a = int(x > 0)
            y = a + x + 0.3 * rng.normal()
            writer.writerow([repr(float(y)), a, z, repr(float(x))])
    return path


class TestSimulate:
    def test_late_row_count_contract(self, tmp_path, capsys):
        out = tmp_path / "out"
        code, _, _ = run_cli(
            ["simulate", "--dgp", "late", "--reps", "3", "--n-max", "1000",
             "--peek-every", "250", "--alpha", "0.05", "--seed", "7",
             "--out-dir", str(out)],
            capsys,
        )
        assert code == 0
        rows = (out / "results.csv").read_text().splitlines()
        # 3 reps x (1000/250) grid points per method, two methods, one header
        assert len(rows) == 1 + 2 * 3 * 4

    def test_band_csv_columns(self, tmp_path, capsys):
        out = tmp_path / "band"
        code, _, _ = run_cli(
            ["simulate", "--dgp", "partial-id", "--gamma", "1.8221", "--tau", "-0.5",
             "--n-max", "600", "--peek-every", "300", "--seed", "5",
             "--out-dir", str(out)],
            capsys,
        )
        assert code == 0
        rows = (out / "band.csv").read_text().splitlines()
        assert rows[0] == "n,lower_band,upper_band"
        assert len(rows) == 1 + 2

    def test_missing_dgp_is_usage_error(self, capsys):
        code, _, err = run_cli(["simulate", "--reps", "2"], capsys)
        assert code == 2
        assert "--dgp" in err

    def test_invalid_pairing(self, tmp_path, capsys):
        code, _, err = run_cli(
            ["simulate", "--dgp", "late", "--mode", "coverage", "--estimand", "ate",
             "--out-dir", str(tmp_path / "x")],
            capsys,
        )
        assert code == 2
        assert "paired" in err

    def test_deterministic_artifacts(self, tmp_path, capsys):
        args = ["simulate", "--dgp", "late", "--reps", "2", "--n-max", "600",
                "--peek-every", "300", "--seed", "9"]
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert run_cli(args + ["--out-dir", str(out1)], capsys)[0] == 0
        assert run_cli(args + ["--out-dir", str(out2)], capsys)[0] == 0
        for name in ("results.csv", "curves.csv"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_config_file_and_flag_precedence(self, tmp_path, capsys):
        config = tmp_path / "run.cfg"
        config.write_text("dgp = late\nreps = 2\nn_max = 600\npeek_every = 300\nseed = 3\n")
        out = tmp_path / "cfg_out"
        code, _, _ = run_cli(
            ["simulate", "--config", str(config), "--reps", "1", "--out-dir", str(out)],
            capsys,
        )
        assert code == 0
        rows = (out / "results.csv").read_text().splitlines()
        assert len(rows) == 1 + 2 * 1 * 2  # the flag's reps=1 wins over the file

    def test_unknown_config_key_rejected(self, tmp_path, capsys):
        config = tmp_path / "bad.cfg"
        config.write_text("dgp = late\nbogus_key = 1\n")
        code, _, err = run_cli(["simulate", "--config", str(config)], capsys)
        assert code == 2
        assert "bogus_key" in err

    def test_env_var_out_dir(self, tmp_path, capsys, monkeypatch):
        target = tmp_path / "from_env"
        monkeypatch.setenv("SEQDML_OUT_DIR", str(target))
        code, _, _ = run_cli(
            ["simulate", "--dgp", "late", "--reps", "1", "--n-max", "600",
             "--peek-every", "300", "--seed", "2"],
            capsys,
        )
        assert code == 0
        assert (target / "results.csv").is_file()


class TestMonitor:
    def test_ate_stream_emits_ndjson(self, tmp_path, capsys):
        data = write_ate_csv(tmp_path / "data.csv")
        code, out, _ = run_cli(
            ["monitor", "--input", str(data), "--estimand", "ate",
             "--burn-in", "100", "--peek-every", "100"],
            capsys,
        )
        assert code == 0
        lines = out.strip().splitlines()
        summary = json.loads(lines[-1])
        assert summary["decision"] == "continue"
        assert summary["peeks"] == len(lines) - 1 == 4
        for line in lines[:-1]:
            record = json.loads(line)
            assert list(record.keys()) == [
                "n", "estimate", "sigma", "lower", "upper",
                "lower_int", "upper_int", "stopped",
            ]
            assert record["lower"] <= record["upper"]

    def test_late_requires_z_column(self, tmp_path, capsys):
        data = write_ate_csv(tmp_path / "data.csv")
        code, _, err = run_cli(
            ["monitor", "--input", str(data), "--estimand", "late"], capsys
        )
        assert code == 2
        assert "z" in err

    def test_short_file_not_ready(self, tmp_path, capsys):
        data = write_ate_csv(tmp_path / "tiny.csv", n=30)
        code, out, _ = run_cli(
            ["monitor", "--input", str(data), "--estimand", "ate", "--burn-in", "100"],
            capsys,
        )
        assert code == 0
        lines = out.strip().splitlines()
        assert len(lines) == 1
        assert json.loads(lines[0])["decision"] == "not_ready"

    def test_malformed_row_names_line(self, tmp_path, capsys):
        data = tmp_path / "bad.csv"
        data.write_text("y,a,x1\n1.0,1,0.5\n2.0,oops,0.1\n")
        code, _, err = run_cli(
            ["monitor", "--input", str(data), "--estimand", "ate"], capsys
        )
        assert code == 1
        assert "line 3" in err

    def test_bad_header_rejected(self, tmp_path, capsys):
        data = tmp_path / "head.csv"
        data.write_text("y,a,w1\n1.0,1,0.5\n")
        code, _, err = run_cli(
            ["monitor", "--input", str(data), "--estimand", "ate"], capsys
        )
        assert code == 2

    def test_stop_rule_recorded(self, tmp_path, capsys):
        data = write_ate_csv(tmp_path / "data.csv", n=400, seed=4)
        code, out, _ = run_cli(
            ["monitor", "--input", str(data), "--estimand", "ate",
             "--burn-in", "100", "--peek-every", "100",
             "--stop-rule", "width_below", "--stop-width", "1000.0"],
            capsys,
        )
        assert code == 0
        summary = json.loads(out.strip().splitlines()[-1])
        assert summary["decision"] == "stop"
        assert summary["stopped_at"] == 100

    def test_out_dir_artifact_matches_stdout(self, tmp_path, capsys):
        data = write_ate_csv(tmp_path / "data.csv", seed=6)
        out_dir = tmp_path / "mon"
        code, out, _ = run_cli(
            ["monitor", "--input", str(data), "--estimand", "ate",
             "--burn-in", "200", "--peek-every", "100", "--out-dir", str(out_dir)],
            capsys,
        )
        assert code == 0
        assert (out_dir / "peeks.ndjson").read_text() == out


class TestDiagnose:
    def test_well_posed_ate_passes(self, tmp_path, capsys):
        data = write_ate_csv(tmp_path / "data.csv", n=500, seed=1)
        code, out, _ = run_cli(
            ["diagnose", "--input", str(data), "--estimand", "ate"], capsys
        )
        assert code == 0
        assert "identification: pass" in out
        assert "holdout rmse" in out
        assert "orthogonality derivative wrt g1" in out

    def test_constant_treatment_fails(self, tmp_path, capsys):
        data = write_ate_csv(tmp_path / "const.csv", n=200, seed=2, treated_only=True)
        code, out, _ = run_cli(
            ["diagnose", "--input", str(data), "--estimand", "ate"], capsys
        )
        assert code == 0
        assert "identification: FAIL" in out

    def test_null_relevance_instrument_fails(self, tmp_path, capsys):
        data = write_null_relevance_late_csv(tmp_path / "weak.csv")
        code, out, _ = run_cli(
            ["diagnose", "--input", str(data), "--estimand", "late"], capsys
        )
        assert code == 0
        assert "identification: FAIL" in out


class TestReport:
    def test_report_on_simulate_output(self, tmp_path, capsys):
        out = tmp_path / "res"
        run_cli(
            ["simulate", "--dgp", "late", "--reps", "2", "--n-max", "600",
             "--peek-every", "300", "--seed", "1", "--out-dir", str(out)],
            capsys,
        )
        code, text, _ = run_cli(["report", "--out-dir", str(out)], capsys)
        assert code == 0
        assert "asympcs" in text and "batch" in text

    def test_missing_directory(self, tmp_path, capsys):
        code, _, err = run_cli(["report", "--out-dir", str(tmp_path / "nope")], capsys)
        assert code == 2

    def test_empty_directory(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        code, _, err = run_cli(["report", "--out-dir", str(empty)], capsys)
        assert code == 1
