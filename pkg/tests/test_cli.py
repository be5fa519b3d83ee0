import json

import pytest
import yaml

from polyvis.harness import cli
from polyvis.harness.experiment import micro_config


def test_budget_default(capsys):
    assert cli.main(["budget", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "clip\t576\t72\t24x3" in out and "dinov2\t256\t16\t16x1" in out
    assert "share_by_row\t88\t5\t24\t93\t4608\tFalse\t17.6" in out


def test_budget_writes_file(tmp_path, capsys):
    assert cli.main(["budget", "--seed", "0", "--prompt-len", "8", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "budget.tsv").read_text() == capsys.readouterr().out


def test_missing_seed_is_config_error(capsys):
    assert cli.main(["budget"]) == 2
    assert "seed" in capsys.readouterr().err


def test_bad_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({"seed": 0, "fusion": {"m_per_expert": {"clip": 5, "dinov2": 16}}}))
    assert cli.main(["budget", "--config", str(p)]) == 2
    assert "fusion.m_per_expert.clip" in capsys.readouterr().err


@pytest.mark.parametrize("worst,code", [(1e-7, 0), (1e-3, 1)])
def test_gradcheck_exit_code(monkeypatch, capsys, worst, code):
    monkeypatch.setattr(cli, "micro_gradcheck", lambda m, s, seed=0: {"fusion": worst, "pe": 0.0})
    assert cli.main(["gradcheck"]) == code
    out = capsys.readouterr().out
    assert ("PASS" if code == 0 else "FAIL") in out
    assert out.count("\n") == 1 + 16 + 1


def test_run_micro(tmp_path, capsys):
    raw = micro_config(seed=0).to_dict()
    raw["phases"]["pretrain"]["steps"] = raw["phases"]["finetune"]["steps"] = 3
    p = tmp_path / "micro.yaml"
    p.write_text(yaml.safe_dump(raw))
    assert cli.main(["run", "--config", str(p), "--out", str(tmp_path / "run")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert set(res["accuracy"]) == {"color", "count", "all"}
    assert (tmp_path / "run" / "manifest.json").exists()


def test_module_entry_point():
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "polyvis", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "sweep-order" in r.stdout
