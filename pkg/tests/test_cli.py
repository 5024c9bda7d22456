import json
from pathlib import Path

from click.testing import CliRunner

from skybridge.cli import main

ASSETS = Path(__file__).parent.parent / "assets"
GOLDEN = Path(__file__).parent / "data" / "outage_windows_seed42_trace.csv"


def test_run_scenario_and_report(tmp_path):
    runner = CliRunner()
    out_dir = tmp_path / "run"
    result = runner.invoke(main, ["run-scenario", str(ASSETS / "scenario_outage_windows.json"),
                                  "--out", str(out_dir)])
    assert result.exit_code == 0, result.output
    aggregates = json.loads((out_dir / "aggregates.json").read_text())
    assert aggregates["count"] == 150
    assert aggregates["fraction_within_t_max"] >= 0.9

    report = runner.invoke(main, ["report", str(out_dir)])
    assert report.exit_code == 0, report.output
    assert "fraction_within_t_max" in report.output


def test_outage_trace_matches_golden(tmp_path):
    runner = CliRunner()
    out_dir = tmp_path / "run"
    result = runner.invoke(main, ["run-scenario", str(ASSETS / "scenario_outage_windows.json"),
                                  "--seed", "42", "--out", str(out_dir)])
    assert result.exit_code == 0, result.output
    assert (out_dir / "trace.csv").read_text() == GOLDEN.read_text()


def test_seed_override_changes_trace(tmp_path):
    runner = CliRunner()
    result = runner.invoke(main, ["run-scenario", str(ASSETS / "scenario_flat.json"),
                                  "--seed", "8", "--out", str(tmp_path / "a")])
    assert result.exit_code == 0, result.output
    other = runner.invoke(main, ["run-scenario", str(ASSETS / "scenario_flat.json"),
                                 "--seed", "9", "--out", str(tmp_path / "b")])
    assert other.exit_code == 0
    a = (tmp_path / "a" / "trace.csv").read_text()
    b = (tmp_path / "b" / "trace.csv").read_text()
    assert a != b  # jitter draws differ per seed
