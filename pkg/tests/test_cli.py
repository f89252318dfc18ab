import csv

import pytest

from deepbias.cli import build_parser, main


def test_parser_rejects_unknown_method():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["run", "--methods", "ekf", "--out", "x"])


def test_simulate_writes_csvs(tmp_path, capsys):
    assert main(["simulate", "--scenario", "drone", "--duration", "3", "--seed", "2",
                 "--blackout", "1:0.5", "--out", str(tmp_path)]) == 0
    for name in ("imu.csv", "gt.csv", "obs.csv", "scenario.yaml"):
        assert (tmp_path / name).exists()
    assert "blackout" in (tmp_path / "scenario.yaml").read_text()


def test_calibrate_from_csv(tmp_path):
    sim = tmp_path / "sim"
    main(["simulate", "--scenario", "stationary", "--duration", "400", "--out", str(sim)])
    out = tmp_path / "cal.yaml"
    assert main(["calibrate", "--imu-csv", str(sim / "imu.csv"), "--out", str(out)]) == 0
    assert out.exists() and out.with_suffix(".curves.csv").exists()


def test_run_and_report(tmp_path, capsys):
    args = ["run", "--scenario", "handheld_walk", "--duration", "10", "--seed", "1", "--blackout", "5:1",
            "--methods", "baseline", "bias_lock", "--max-iterations", "2"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert "bias_lock: 5 m RPE change" in capsys.readouterr().out
    with open(tmp_path / "a" / "report.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    assert main(["report", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("1 runs") and "positive = reduction" in out


def test_learned_method_needs_model(tmp_path, capsys):
    assert main(["run", "--methods", "lstm", "--duration", "5", "--out", str(tmp_path)]) == 2
    assert "--model" in capsys.readouterr().err
