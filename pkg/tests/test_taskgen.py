from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import rouge_f1, solve_question
from orpo_distill.taskgen import (
    INSTRUCTION,
    LABELS,
    PRESETS,
    QaItem,
    SpecInfeasible,
    TaskSpec,
    build_corpus,
    cot_variants,
    generate_corpus,
    preset,
    read_jsonl,
    render_prompt,
    write_jsonl,
)
from orpo_distill.textcore import Vocab, parse_boxed_answer, tokenize

small = dict(n_train=20, n_eval=30, n_teacher=10, n_student=10)


@pytest.mark.parametrize("kind", sorted(PRESETS))
def test_gold_matches_independent_solver(kind):
    corpus = build_corpus(preset(kind, **small))
    for item in corpus.train + corpus.eval + corpus.teacher + corpus.student:
        assert item.option(item.gold_label) == str(solve_question(item.question))
        assert len(set(item.options)) == 4


@pytest.mark.parametrize("kind", sorted(PRESETS))
def test_preset_variants_survive_dedup(kind):
    # distinct phrasings must not count as near-duplicates at the 0.8 threshold
    vocab = Vocab.from_chars()
    for item in build_corpus(preset(kind, n_train=300)).train:
        ids = [tokenize(v, vocab).ids for v in cot_variants(item)]
        assert len(ids) >= 2
        assert all(rouge_f1(a, b) <= 0.8 for i, a in enumerate(ids) for b in ids[:i])


@pytest.mark.parametrize("kind", sorted(PRESETS))
def test_every_cot_variant_ends_in_gold(kind):
    corpus = build_corpus(preset(kind, **small))
    vocab = Vocab.from_chars()
    for item in corpus.train:
        variants = cot_variants(item)
        assert variants[0] == item.gold_cot
        assert len(set(variants)) == len(variants)
        for cot in variants:
            assert cot.endswith(f"boxed{{{item.gold_label}}}")
            assert parse_boxed_answer(cot) == item.gold_label
            tokenize(cot, vocab)
        tokenize(render_prompt(item), vocab)


@pytest.mark.parametrize("kind", sorted(PRESETS))
def test_splits_disjoint_and_deterministic(kind):
    spec = preset(kind, **small)
    a, b = build_corpus(spec), build_corpus(spec)
    assert a == b and a.digest() == b.digest()
    questions = [it.question for split in (a.train, a.eval, a.teacher, a.student) for it in split]
    assert len(questions) == len(set(questions))
    ids = [it.prompt_id for split in (a.train, a.eval, a.teacher, a.student) for it in split]
    assert len(ids) == len(set(ids))


def test_different_seed_changes_corpus():
    assert build_corpus(preset("compare", **small)).digest() != build_corpus(preset("compare", seed=1, **small)).digest()


@pytest.mark.parametrize("kind", sorted(PRESETS))
def test_gold_slot_roughly_uniform(kind):
    corpus = build_corpus(preset(kind, n_train=400, n_eval=400, n_teacher=0, n_student=0))
    counts = {lab: 0 for lab in LABELS}
    for it in corpus.train + corpus.eval:
        counts[it.gold_label] += 1
    # 800 draws, each slot expected 200; 4 sd is about 49
    assert all(abs(c - 200) < 50 for c in counts.values())


def test_render_prompt_layout():
    item = QaItem("x", "max of 1,2,3,4", ("4", "1", "2", "3"), "A", "")
    assert render_prompt(item) == f"max of 1,2,3,4\nA:4 B:1 C:2 D:3\n{INSTRUCTION}\n"


@pytest.mark.parametrize(
    "spec",
    [
        TaskSpec("nope"),
        TaskSpec("modarith", operand_range=3),
        TaskSpec("compare", chain_len=3),
        TaskSpec("compare", chain_len=8, operand_range=6),
        TaskSpec("modarith", chain_len=1, operand_range=4, n_train=10**6),
        TaskSpec("compare", n_train=0),
    ],
)
def test_infeasible_specs(spec):
    with pytest.raises(SpecInfeasible):
        build_corpus(spec)


def test_preset_unknown():
    with pytest.raises(SpecInfeasible):
        preset("nothing")


def test_jsonl_roundtrip(tmp_path):
    train, ev = generate_corpus(preset("modarith", **small))
    write_jsonl(train, tmp_path / "t.jsonl")
    assert read_jsonl(tmp_path / "t.jsonl") == train
    assert len(ev) == small["n_eval"]


@given(st.integers(1, 3), st.integers(4, 10), st.integers(0, 50))
@settings(max_examples=25, deadline=None)
def test_modarith_property(chain, rng, seed):
    corpus = build_corpus(TaskSpec("modarith", chain, rng, n_train=5, n_eval=5, n_teacher=0, n_student=0, seed=seed))
    for it in corpus.train + corpus.eval:
        assert it.option(it.gold_label) == str(solve_question(it.question))
        assert all(0 <= int(o) < rng for o in it.options)
