from __future__ import annotations

import json

import pytest

from conftest import tiny_arch
from orpo_distill.cli import main
from orpo_distill.tinylm import Checkpoint, init_params, load_checkpoint, save_checkpoint


def _json_line(text):
    return json.loads(text.strip().splitlines()[-1])


def test_eval_command(vocab, tmp_path, capsys):
    path = tmp_path / "m.ckpt"
    save_checkpoint(Checkpoint(init_params(tiny_arch(vocab, context_len=128), 0)), path)
    assert main(["eval", "--ckpt", str(path), "--task", "compare"]) == 0
    out = _json_line(capsys.readouterr().out)
    assert out["ok"] and 0 <= out["accuracy"] <= 100 and out["n_items"] == 256


def test_missing_checkpoint_reports_json(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "nope.ckpt"), "--task", "compare"]) == 1
    err = _json_line(capsys.readouterr().err)
    assert err == {"ok": False, "error": "IoError", "message": err["message"]}


def test_bad_arguments_report_json(capsys):
    assert main(["run", "--task", "compare"]) == 2
    err = _json_line(capsys.readouterr().err)
    assert err["ok"] is False and err["error"] == "CliError"


def test_bad_mode_phi_combination(tmp_path, capsys):
    code = main(["run", "--task", "compare", "--mode", "orpo_on", "--phi", "0.2", "--out", str(tmp_path)])
    assert code == 1
    assert "phi" in _json_line(capsys.readouterr().err)["message"]


def _tiny_config(path):
    path.write_text(
        json.dumps(
            {
                "tasks": [{"kind": "compare", "chain_len": 4, "operand_range": 6, "n_train": 6, "n_eval": 6, "n_teacher": 4, "n_student": 4}],
                "teacher_arch": {"family": "attn", "d_model": 16, "d_hidden": 32, "n_layers": 1},
                "student_archs": {"tiny": {"family": "conv-gated", "d_model": 8, "d_hidden": 16, "n_layers": 1}},
                "teacher_steps": {"default": 120},
                "teacher_eta": 1e-2,
                "student_steps": {"default": 2},
                "batch_size": 16,
                "max_new_tokens": 40,
            }
        )
    )


def test_run_command_writes_checkpoints(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    _tiny_config(cfg)
    args = ["run", "--task", "compare", "--mode", "orpo_mixed", "--k", "6", "--epochs", "2", "--seed", "3",
            "--out", str(tmp_path / "out"), "--config", str(cfg)]
    assert main(args) == 0
    out = _json_line(capsys.readouterr().out)
    run_dir = tmp_path / "out" / out["run_id"]
    assert (run_dir / "epoch-1.ckpt").exists() and (run_dir / "epoch-2.ckpt").exists()
    final = load_checkpoint(run_dir / "final.ckpt")
    assert final.params == load_checkpoint(run_dir / "epoch-2.ckpt").params
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["cell"]["mode"] == "orpo_mixed" and summary["cell"]["seed"] == 3
    run = json.loads((run_dir / "run.json").read_text())
    assert run["config"]["K"] == 6 and run["config"]["phi"] == 0.5
