import json
import subprocess
import sys

import pytest

from fedshot import cli
from test_pipeline import SMALL


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({**SMALL, "out_dir": str(tmp_path / "out")}))
    return path


def test_full_run(cfg_file, capsys):
    for stage in ("synth", "e1", "e2", "pca"):
        assert cli.main([stage, "--config", str(cfg_file)]) == cli.EXIT_OK
        json.loads(capsys.readouterr().out)
    assert cli.main(["report", "--config", str(cfg_file)]) == 0
    assert "E2 per-client" in capsys.readouterr().out


def test_config_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bogus": 1}))
    assert cli.main(["synth", "--config", str(bad)]) == cli.EXIT_CONFIG
    assert "config error: ConfigError" in capsys.readouterr().err


def test_alpha_out_of_range_exit(tmp_path, capsys):
    assert cli.main(["e2", "--alpha", "1.5", "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG
    assert "AlphaOutOfRange" in capsys.readouterr().err


def test_missing_data_exit(tmp_path, capsys):
    code = cli.main(["prep", "--out-dir", str(tmp_path), "--input", str(tmp_path / "x.fseg")])
    assert code == cli.EXIT_DATA
    assert "x.fseg" in capsys.readouterr().err


def test_missing_encoder_exit(cfg_file, capsys):
    assert cli.main(["synth", "--config", str(cfg_file)]) == 0
    capsys.readouterr()
    assert cli.main(["e2", "--config", str(cfg_file)]) == cli.EXIT_DATA
    assert "MissingEncoder" in capsys.readouterr().err


def test_unknown_subcommand():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train"])
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "fedshot", "report", "--out-dir",
                           str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == cli.EXIT_DATA
