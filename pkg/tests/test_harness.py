from __future__ import annotations

import json
import random

import numpy as np
import pytest

from stubs import RandomLabeler
from orpo_distill.harness import (
    ROW_LABELS,
    TEACHER_ROW,
    CellResult,
    ExperimentResult,
    MatrixConfig,
    configure_threads,
    evaluate,
    evaluate_generator,
    read_csv_table,
    render_table,
    run_matrix,
    table_rows,
)
from orpo_distill.taskgen import TaskSpec, build_corpus, render_prompt
from orpo_distill.tinylm import init_params
from conftest import tiny_arch


class GoldParrot:
    """Replies with the gold reasoning for every known prompt."""

    def __init__(self, items):
        self._cot = {render_prompt(it): it.gold_cot for it in items}

    def generate(self, prompts, seeds, tau, max_len):
        return [self._cot[p] for p in prompts]


def test_gold_parrot_scores_100(small_corpus):
    rep = evaluate_generator(GoldParrot(small_corpus.eval), small_corpus.eval)
    assert rep.accuracy == 100.0 and rep.n_unparseable == 0


def test_no_boxed_answers_scores_zero(vocab, small_corpus):
    params = init_params(tiny_arch(vocab, context_len=128), 0, zero_head=True)
    rep = evaluate(params, small_corpus.eval, vocab)
    assert rep.accuracy == 0.0 and rep.n_unparseable == rep.n_items == len(small_corpus.eval)


def test_accuracy_order_invariant(vocab, small_corpus):
    params = init_params(tiny_arch(vocab, context_len=128), 4)
    items = list(small_corpus.eval)
    shuffled = items[:]
    random.Random(0).shuffle(shuffled)
    a, b = evaluate(params, items, vocab), evaluate(params, shuffled, vocab)
    assert a.accuracy == b.accuracy
    assert sorted(map(str, a.records), key=str) == sorted(map(str, b.records), key=str)


def test_random_labels_calibrate_to_chance():
    items = build_corpus(TaskSpec("compare", chain_len=5, operand_range=10, n_train=1, n_eval=2000, n_teacher=0, n_student=0)).eval
    rep = evaluate_generator(RandomLabeler(0), items)
    assert abs(rep.accuracy - 25.0) <= 3.0
    correct = sum(r["correct"] for r in rep.records)
    assert rep.accuracy == 100.0 * correct / rep.n_items


def test_evaluate_rejects_empty(vocab, tiny_params):
    with pytest.raises(ValueError):
        evaluate(tiny_params, [], vocab)


def _fake_result():
    cells = []
    rng = np.random.default_rng(0)
    for task in ("modarith", "compare"):
        for mode in ROW_LABELS:
            for seed in range(3):
                cells.append(CellResult(task, "s", mode, seed, float(np.round(rng.uniform(20, 80), 3)), 100))
    return ExperimentResult(cells, {"modarith": {"accuracy": 70.0}, "compare": {"accuracy": 88.0}})


def test_table_rows_and_average():
    res = _fake_result()
    rows = table_rows(res)
    labels = [r["label"] for r in rows]
    for lab in ("Zero-shot CoT Eval", "Single CoT Fine Tuning", "Diverse CoT Fine Tuning", "Off Policy ORPO", "On Policy ORPO", "Mixed Policy ORPO"):
        assert lab in labels
    assert labels[-1] == TEACHER_ROW
    for r in rows:
        means = [c["mean"] for c in r["cells"].values()]
        assert r["avg"] == pytest.approx(sum(means) / len(means), abs=1e-12)
    zs = next(r for r in rows if r["mode"] == "zero_shot")
    vals = res.accuracies("compare", "s", "zero_shot")
    assert zs["cells"]["compare"]["mean"] == pytest.approx(np.mean(vals))
    assert zs["cells"]["compare"]["sd"] == pytest.approx(np.std(vals, ddof=1))


def test_csv_json_roundtrip():
    res = _fake_result()
    from_csv = read_csv_table(render_table(res, "csv"))
    from_json = json.loads(render_table(res, "json"))["rows"]
    assert from_csv == from_json


def test_text_table_layout():
    text = render_table(_fake_result(), "text")
    assert "Avg Acc%" in text and TEACHER_ROW in text
    assert "(p-CoT_Teacher, n-CoT_Student)" in text


def test_empty_matrix_is_header_only():
    res = ExperimentResult()
    assert render_table(res, "csv").strip().splitlines() == ["student,mode,label,avg"]
    assert render_table(res, "text").strip().splitlines()[0].startswith("Experiments")
    assert len(render_table(res, "text").strip().splitlines()) == 1
    with pytest.raises(ValueError):
        render_table(res, "xml")


def test_experiment_result_json_roundtrip():
    res = _fake_result()
    assert ExperimentResult.from_dict(json.loads(json.dumps(res.to_dict()))) == res


def tiny_matrix(**kw):
    d = dict(
        tasks=[TaskSpec("compare", chain_len=4, operand_range=6, n_train=6, n_eval=6, n_teacher=4, n_student=4)],
        seeds=[0],
        modes=["zero_shot", "diverse_cot_ft", "orpo_mixed", "orpo_teacher_neg"],
        # just enough teacher training to emit a few correct boxed answers
        teacher_arch={"family": "attn", "d_model": 16, "d_hidden": 32, "n_layers": 1},
        student_archs={"tiny": {"family": "conv-gated", "d_model": 8, "d_hidden": 16, "n_layers": 1}},
        train={"K": 6, "epochs": 1, "batch_size": 4, "max_new_tokens": 40},
        teacher_steps={"default": 120},
        teacher_eta=1e-2,
        student_steps={"default": 2},
    )
    d.update(kw)
    return MatrixConfig(**d)


def test_run_matrix_persists_and_is_deterministic(tmp_path):
    cfg = tiny_matrix()
    a = run_matrix(cfg, tmp_path / "a")
    b = run_matrix(cfg, tmp_path / "b")
    assert len(a.cells) == 4
    for name in ("table.txt", "table.csv", "table.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert [c.params_digest for c in a.cells] == [c.params_digest for c in b.cells]
    cell_dir = tmp_path / "a" / "compare" / "tiny" / "orpo_mixed" / "seed-0"
    assert (cell_dir / "final.ckpt").exists() and (cell_dir / "epoch-1.ckpt").exists()
    run = json.loads((cell_dir / "run.json").read_text())
    assert run["config"]["phi"] == 0.5


def test_run_matrix_records_failed_cells():
    cfg = tiny_matrix(student_archs={"broken": {"family": "conv-gated", "d_model": 9, "n_heads": 2}}, modes=["zero_shot"])
    res = run_matrix(cfg)
    assert len(res.cells) == 1 and res.cells[0].accuracy is None and "ValueError" in res.cells[0].error


def test_matrix_config_from_json(tmp_path):
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"tasks": ["compare", {"kind": "modarith", "chain_len": 1}], "seeds": [1], "K": 4, "train": {"epochs": 2}}))
    cfg = MatrixConfig.load(path)
    assert cfg.tasks[0].kind == "compare" and cfg.tasks[1].chain_len == 1
    assert cfg.train == {"epochs": 2, "K": 4}
    assert cfg.train_config("orpo_on", 1).K == 4
    with pytest.raises(ValueError):
        MatrixConfig.from_dict({"tasks": [], "bogus": 1})


def test_thread_env(monkeypatch):
    import torch

    before = torch.get_num_threads()
    monkeypatch.setenv("ORPO_DISTILL_THREADS", "1")
    assert configure_threads() == 1 and torch.get_num_threads() == 1
    monkeypatch.setenv("ORPO_DISTILL_THREADS", "0")
    with pytest.raises(ValueError):
        configure_threads()
    torch.set_num_threads(before)
