"""End-to-end tests of the command-line entry point."""

import csv
import json
import math

import pytest

from kdvlab.app import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, KdvLab, main
from kdvlab.services import read_snapshot


@pytest.fixture
def out_dir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv("KDVLAB_THREADS", raising=False)
    return tmp_path / "out"


def _run(out_dir, *argv):
    return main(["--out-dir", str(out_dir), "--threads", "2", *argv])


def _read_csv(path):
    with open(path, newline="") as handle:
        return list(csv.reader(handle))


def test_critical_lattice_enumeration(out_dir):
    assert _run(out_dir, "critical", "--set", "N", "--lmax", "10") == EXIT_OK
    rows = _read_csv(out_dir / "critical_lengths.csv")
    assert rows[0] == ["L", "set", "k", "l", "re_a", "im_a", "re_b", "im_b", "residual"]
    values = [float(r[0]) for r in rows[1:]]
    assert values == pytest.approx([2 * math.pi, 2 * math.pi * math.sqrt(7 / 3)], rel=1e-13)
    assert rows[1][1:4] == ["N", "1", "1"]
    echoed = json.loads((out_dir / "critical_config.json").read_text())
    assert echoed["schema_version"] == 1
    assert echoed["lmax"] == 10.0


def test_critical_membership_verdict(out_dir, capsys):
    assert _run(out_dir, "critical", "--set", "N", "--l", str(2 * math.pi)) == EXIT_OK
    verdict = json.loads((out_dir / "critical_verdict.json").read_text())
    assert verdict["member"] is True
    assert verdict["distance"] <= 1e-12
    assert json.loads(capsys.readouterr().out.strip().splitlines()[-1])["member"] is True


def test_spectrum_table(out_dir):
    assert _run(out_dir, "spectrum", "--L", str(math.pi), "--n-from", "1", "--n-to", "3") == EXIT_OK
    rows = _read_csv(out_dir / "spectrum.csv")
    assert rows[0][:2] == ["n", "lambda"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    lambdas = [float(r[1]) for r in rows[1:]]
    assert lambdas == sorted(lambdas)


def test_simulate_from_config_file(out_dir, tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"schema_version": 1, "mode": "feedback", "alpha": 1.0,
                                  "n": 32, "T": 0.05, "dt": 0.005}))
    assert _run(out_dir, "simulate", "--config", str(config)) == EXIT_OK
    energy = _read_csv(out_dir / "energy.csv")
    assert energy[0] == ["t", "norm", "etax_L", "vx_0", "diss", "morawetz", "kato", "duality"]
    assert len(energy) == 12
    header, frames = read_snapshot(out_dir / "trajectory.bin")
    assert header["n"] == 32
    assert len(frames) == 11
    summary = json.loads((out_dir / "simulate_summary.json").read_text())
    assert summary["final_norm"] < summary["initial_norm"]
    assert "decay" not in summary


def test_gramian_json(out_dir):
    assert _run(out_dir, "gramian", "--L", "5", "--T", "1", "--modes", "4") == EXIT_OK
    report = json.loads((out_dir / "gramian.json").read_text())
    assert len(report["matrix"]) == 8
    assert 0 < report["min_eig"] <= report["max_eig"]


def test_hum_with_coordinate_file(out_dir, tmp_path):
    init = tmp_path / "init.json"
    init.write_text(json.dumps({"coordinates": [1.0] + [0.0] * 7}))
    assert _run(out_dir, "hum", "--L", "5", "--modes", "4", "--init", str(init)) == EXIT_OK
    summary = json.loads((out_dir / "hum_summary.json").read_text())
    assert summary["modal_terminal_error"] <= 1e-6
    rows = _read_csv(out_dir / "control.csv")
    assert rows[0] == ["t", "g2"]
    assert len(rows) == 4098


def test_hum_coordinate_length_mismatch(out_dir, tmp_path):
    init = tmp_path / "init.json"
    init.write_text(json.dumps([1.0, 2.0]))
    assert _run(out_dir, "hum", "--modes", "4", "--init", str(init)) == EXIT_CONFIG


def test_missing_config_file(out_dir, capsys):
    code = main(["--json-errors", "--out-dir", str(out_dir), "simulate", "--config", "absent.json"])
    assert code == EXIT_CONFIG
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "FileNotFoundError"
    assert error["exit_code"] == EXIT_CONFIG


def test_unknown_config_key_reports_field(out_dir, tmp_path, capsys):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"L": 5.0, "modez": 8}))
    code = main(["--json-errors", "--out-dir", str(out_dir), "gramian", "--config", str(config)])
    assert code == EXIT_CONFIG
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["field"] == "modez"
    assert error["error"] == "ConfigError"


def test_flags_override_config_file(out_dir, tmp_path):
    config = tmp_path / "gramian.json"
    config.write_text(json.dumps({"L": 5.0, "T": 2.0, "modes": 6}))
    assert _run(out_dir, "gramian", "--config", str(config), "--modes", "4") == EXIT_OK
    echoed = json.loads((out_dir / "gramian_config.json").read_text())
    assert echoed["modes"] == 4
    assert echoed["T"] == 2.0


def test_verify_single_criterion(out_dir):
    assert _run(out_dir, "verify", "--only", "1", "--quick") == EXIT_OK
    report = json.loads((out_dir / "verify_report.json").read_text())
    assert report["passed"] is True
    assert [c["number"] for c in report["checks"]] == [1]


def test_transcendental_set_from_command_line(out_dir):
    assert _run(out_dir, "critical", "--set", "G", "--lmax", "11") == EXIT_OK
    rows = _read_csv(out_dir / "critical_lengths.csv")
    values = [float(r[0]) for r in rows[1:]]
    assert all(r[1] == "G" for r in rows[1:])
    assert any(abs(v - 10.274644) <= 1e-5 for v in values)
    assert max(values) <= 11.0


def test_arithmetic_failure_exits_numerical(out_dir, monkeypatch, capsys):
    def overflow(self, cfg):
        raise OverflowError("math range error")

    monkeypatch.setattr(KdvLab, "gramian", overflow)
    code = main(["--json-errors", "--out-dir", str(out_dir), "gramian"])
    assert code == EXIT_NUMERICAL
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["error"] == "OverflowError"


def test_obs_sweep_leaves_two_pi_row_blank(out_dir):
    start, stop = 2 * math.pi - 0.1, 2 * math.pi + 0.1
    assert _run(out_dir, "obs-sweep", "--from", repr(start), "--to", repr(stop), "--step", "0.1",
                "--case", "1", "--T", "1", "--modes", "4") == EXIT_OK
    rows = _read_csv(out_dir / "obs_sweep.csv")
    assert rows[0] == ["L", "min_eig", "max_eig", "cond", "dip_flag", "nearest_critical"]
    assert len(rows) == 4
    assert rows[2][1:4] == ["", "", ""]
    assert rows[2][4] == "1"
    assert float(rows[1][1]) > 0
