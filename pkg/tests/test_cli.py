import json

import appdirs
import pandas as pd
import pytest

from cli.commands import EXIT_MISSING_ARTIFACT, EXIT_OK, EXIT_USAGE, parse_horizon, parse_horizons
from core.errors import ParameterError
from main import main


@pytest.fixture(autouse=True)
def isolated_dirs(monkeypatch, tmp_path):
    monkeypatch.setattr(appdirs, "user_data_dir", lambda *args, **kwargs: str(tmp_path / "data"))
    monkeypatch.setattr(appdirs, "user_log_dir", lambda *args, **kwargs: str(tmp_path / "logs"))


@pytest.mark.parametrize("token, seconds", [("10s", 10.0), ("3m", 180.0), ("5", 5.0), ("1h", 3600.0)])
def test_parse_horizon(token, seconds):
    assert parse_horizon(token) == seconds


@pytest.mark.parametrize("token", ["", "ten", "0s", "-3m", "5d"])
def test_parse_horizon_rejects(token):
    with pytest.raises(ParameterError):
        parse_horizon(token)


def test_parse_horizons():
    assert parse_horizons("10s,3m") == [10.0, 180.0]
    assert parse_horizons(["7m", "10m"]) == [420.0, 600.0]


def test_usage_errors():
    assert main([]) == EXIT_USAGE
    assert main(["predict"]) == EXIT_USAGE
    assert main(["mission", "--method", "fastest"]) == EXIT_USAGE


def test_missing_artifact(tmp_path):
    code = main(["--artifact-dir", str(tmp_path / "empty"), "mission"])
    assert code == EXIT_MISSING_ARTIFACT


def test_bad_horizon_is_usage_error(tmp_path):
    code = main(["--artifact-dir", str(tmp_path / "a"), "predict", "--soc", "1",
                 "--physics-only", "--method", "shortcut", "--h", "soon"])
    assert code == EXIT_USAGE


def test_predict_fresh_cell(tmp_path, capsys):
    code = main(["--artifact-dir", str(tmp_path / "a"), "predict", "--soc", "1",
                 "--physics-only", "--method", "shortcut", "--h", "10s"])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "current_bound" in out
    assert "H=10s [shortcut]" in out


def test_mission_writes_csv(tmp_path):
    config_path = tmp_path / "short.json"
    config_path.write_text(json.dumps({
        "mission": {"phases": [["takeoff", 5.0, 30.0]]},
        "horizons": ["10s"],
        "cadence_s": 10,
    }), encoding="utf-8")
    outdir = tmp_path / "out"
    code = main(["--config", str(config_path), "--artifact-dir", str(tmp_path / "a"),
                 "mission", "--physics-only", "--method", "shortcut", "--outdir", str(outdir),
                 "--chart"])
    assert code == EXIT_OK
    frame = pd.read_csv(outdir / "mission.csv")
    assert len(frame) == 30
    assert "i_max_10s" in frame.columns
    assert frame["searched"].sum() == 3
    assert (outdir / "mission.svg").exists()


def test_ablation_rejects_both(tmp_path):
    code = main(["--artifact-dir", str(tmp_path / "a"), "ablation", "--method", "both"])
    assert code == EXIT_USAGE


def test_ablation_writes_table_and_chart(tmp_path):
    config_path = tmp_path / "short.json"
    config_path.write_text(json.dumps({"mission": {"phases": [["takeoff", 5.0, 20.0]]}}),
                           encoding="utf-8")
    outdir = tmp_path / "out"
    code = main(["--config", str(config_path), "--artifact-dir", str(tmp_path / "a"),
                 "ablation", "--physics-only", "--method", "shortcut", "--h", "30s",
                 "--cadence", "10", "--outdir", str(outdir), "--chart"])
    assert code == EXIT_OK
    table = pd.read_csv(outdir / "ablation.csv")
    assert list(table["time"]) == [0.0, 10.0]
    assert {"p_max_full", "p_max_no_tmax", "p_max_no_emergency"} <= set(table.columns)
    assert (outdir / "ablation.svg").exists()
