import json
import subprocess
import sys
from pathlib import Path

import pytest

from tempdistill import autodiff as ad
from tempdistill.cli import EXIT_BAD_CONFIG, EXIT_OK, EXIT_VERIFY_FAILED, main

SMOKE = """\
seed: 0
t_tea: 3
t_stu: 2
num_queries: 4
channels: 3
height: 4
width: 4
epochs: 2
batch_size: 2
train_scenes: 3
test_scenes: 2
num_objects: 3
teacher_epochs: 2
name: smoke
"""


@pytest.fixture
def smoke_config(tmp_path):
    path = tmp_path / "smoke.yaml"
    path.write_text(SMOKE)
    return path


def run_dirs(root: Path):
    return sorted(p for p in root.iterdir() if p.is_dir())


class TestVerify:
    def test_pass(self, tmp_path, capsys):
        out = tmp_path / "verify.json"
        assert main(["verify", "--out", str(out)]) == EXIT_OK
        assert json.loads(out.read_text())["passed"]
        assert "PASSED" in capsys.readouterr().out

    def test_corrupted_conv_gradient(self, monkeypatch, capsys):
        original = ad._conv2d_backward
        monkeypatch.setattr(ad, "_conv2d_backward", lambda *a: (lambda r: (r[0], 2 * r[1], r[2]))(original(*a)))
        assert main(["verify"]) == EXIT_VERIFY_FAILED
        assert "conv2d" in capsys.readouterr().err


class TestTrain:
    def test_writes_run(self, smoke_config, tmp_path, capsys):
        out = tmp_path / "runs"
        assert main(["train", "--config", str(smoke_config), "--out", str(out)]) == EXIT_OK
        (run,) = run_dirs(out)
        assert {"metrics.json", "run.json", "config.yaml", "curves.csv", "summary.json"} <= {p.name for p in run.iterdir()}
        assert "alignment_mse" in capsys.readouterr().out

    def test_seed_override_and_env_root(self, smoke_config, tmp_path, monkeypatch):
        monkeypatch.setenv("TEMPDISTILL_OUTPUT_ROOT", str(tmp_path / "env"))
        assert main(["train", "--config", str(smoke_config), "--seed", "5"]) == EXIT_OK
        (run,) = run_dirs(tmp_path / "env")
        assert json.loads((run / "metrics.json").read_text())["config"]["seed"] == 5

    @pytest.mark.parametrize("text", ["epochs: 0\n", "t_stu: 4\nt_tea: 4\nalpha_rc_bev: 0.1\n", "colour: red\n", "[1, 2"])
    def test_invalid_config(self, tmp_path, text, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text(text)
        assert main(["train", "--config", str(path), "--out", str(tmp_path)]) == EXIT_BAD_CONFIG
        assert "invalid config" in capsys.readouterr().err

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "none.yaml")]) == EXIT_BAD_CONFIG


class TestAblateAndReport:
    def test_ablate(self, smoke_config, tmp_path, capsys):
        assert main(["ablate", "--kind", "mask-ratio", "--config", str(smoke_config), "--out", str(tmp_path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "table written to" in out
        for ratio in ("0.4", "0.5", "0.6", "0.75", "0.9"):
            assert ratio in out

    def test_ablate_incompatible(self, tmp_path):
        path = tmp_path / "full.yaml"
        path.write_text(SMOKE.replace("t_stu: 2", "t_stu: 3"))
        assert main(["ablate", "--kind", "loss-components", "--config", str(path), "--out", str(tmp_path)]) == EXIT_BAD_CONFIG

    def test_report(self, smoke_config, tmp_path, capsys):
        main(["train", "--config", str(smoke_config), "--out", str(tmp_path)])
        (run,) = run_dirs(tmp_path)
        (run / "curves.csv").unlink()
        assert main(["report", "--run", str(run)]) == EXIT_OK
        assert (run / "curves.csv").exists()

    def test_report_missing_run(self, tmp_path):
        assert main(["report", "--run", str(tmp_path)]) == EXIT_BAD_CONFIG


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tempdistill", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("verify", "train", "ablate", "report"):
        assert cmd in proc.stdout
