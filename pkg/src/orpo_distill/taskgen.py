"""Synthetic four-option QA tasks with gold chain-of-thought traces.

Two task kinds are provided:

``modarith``
    A left-associated arithmetic chain reduced modulo ``m``, e.g.
    ``((3+4)*2)-5 mod 7``. The answer is a residue in ``0..m-1``.
``compare``
    The largest or smallest of a list of distinct digits, e.g.
    ``max of 3,8,5,1,6``. Options are four of the listed values.

Each item carries one canonical gold CoT; :func:`cot_variants` lists every
equally valid phrasing, which is what makes sampled teacher traces diverse.
For the presets the phrasings are far enough apart (ROUGE-L at most 0.8)
that the near-duplicate filter does not collapse them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

LABELS = ("A", "B", "C", "D")
INSTRUCTION = "think stepwise, end boxed{}"
KINDS = ("modarith", "compare")
_OPS = "+-*"


class SpecInfeasible(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    chain_len: int = 3
    operand_range: int = 7
    n_train: int = 1024
    n_eval: int = 256
    n_teacher: int = 1024
    n_student: int = 768
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class QaItem:
    prompt_id: str
    question: str
    options: tuple[str, str, str, str]
    gold_label: str
    gold_cot: str

    def option(self, label: str) -> str:
        return self.options[LABELS.index(label)]

    def to_json(self) -> str:
        d = asdict(self)
        d["options"] = list(self.options)
        return json.dumps(d)

    @classmethod
    def from_json(cls, line: str) -> "QaItem":
        d = json.loads(line)
        d["options"] = tuple(d["options"])
        return cls(**d)


@dataclass(frozen=True)
class Corpus:
    """All splits of one task instance; splits are disjoint by question."""

    spec: TaskSpec
    train: tuple[QaItem, ...]
    eval: tuple[QaItem, ...]
    teacher: tuple[QaItem, ...]
    student: tuple[QaItem, ...]

    def digest(self) -> str:
        h = hashlib.sha256()
        for split in (self.train, self.eval, self.teacher, self.student):
            for item in split:
                h.update(item.to_json().encode())
                h.update(b"\n")
        return h.hexdigest()[:16]


def render_prompt(item: QaItem) -> str:
    opts = " ".join(f"{lab}:{opt}" for lab, opt in zip(LABELS, item.options))
    return f"{item.question}\n{opts}\n{INSTRUCTION}\n"


# --- modarith ---------------------------------------------------------------


def _modarith_steps(operands: Sequence[int], ops: str, m: int) -> list[tuple[int, str, int, int, int]]:
    """(lhs, op, rhs, raw, reduced) per step with reduction after every step."""
    acc = operands[0]
    steps = []
    for op, rhs in zip(ops, operands[1:]):
        raw = acc + rhs if op == "+" else acc - rhs if op == "-" else acc * rhs
        steps.append((acc, op, rhs, raw, raw % m))
        acc = raw % m
    return steps


def _modarith_question(operands: Sequence[int], ops: str, m: int) -> str:
    expr = str(operands[0])
    for i, (op, rhs) in enumerate(zip(ops, operands[1:])):
        expr = f"{expr}{op}{rhs}"
        if i < len(ops) - 1:
            expr = f"({expr})"
    return f"{expr} mod {m}"


def _modarith_cots(operands, ops, m, answer_label) -> list[str]:
    steps = _modarith_steps(operands, ops, m)
    final = steps[-1][4]
    tail = f"so {final} is {answer_label}. boxed{{{answer_label}}}"
    stepwise = ",".join(f"{a}{op}{b}={r}" for a, op, b, _, r in steps)
    running = "first " + ", then ".join(str(r) for *_, r in steps)
    return [f"{stepwise}. {tail}", f"{running}. {tail}"]


# --- compare ----------------------------------------------------------------


def _compare_question(values: Sequence[int], which: str) -> str:
    return f"{which} of " + ",".join(str(v) for v in values)


def _compare_cots(values, which, answer_label) -> list[str]:
    better = max if which == "max" else min
    best = better(values)
    tail = f"so {best} is {answer_label}. boxed{{{answer_label}}}"

    def scan(seq):
        cur, cmps = seq[0], []
        for v in seq[1:]:
            sym = "<" if cur < v else ">"
            cmps.append(f"{cur}{sym}{v}")
            cur = better(cur, v)
        return ",".join(cmps)

    ranked = ("<" if which == "min" else ">").join(str(v) for v in sorted(values, reverse=which == "max"))
    return [f"{scan(list(values))}. {tail}", f"from right {scan(list(values)[::-1])}. {tail}", f"sorted {ranked}. {tail}"]


# --- corpus -----------------------------------------------------------------


def _question_space(spec: TaskSpec) -> int:
    n, r = spec.chain_len, spec.operand_range
    if spec.kind == "modarith":
        return r ** (n + 1) * len(_OPS) ** n
    if spec.kind == "compare":
        return 2 * math.perm(r, n)
    raise SpecInfeasible(f"unknown task kind {spec.kind!r}")


def _decode(spec: TaskSpec, index: int):
    """Mixed-radix decode of a question index into its parameters."""
    n, r = spec.chain_len, spec.operand_range
    if spec.kind == "modarith":
        operands = []
        for _ in range(n + 1):
            index, d = divmod(index, r)
            operands.append(d)
        ops = []
        for _ in range(n):
            index, d = divmod(index, len(_OPS))
            ops.append(_OPS[d])
        return operands, "".join(ops)
    index, w = divmod(index, 2)
    pool = list(range(r))
    values = []
    for i in range(n):
        index, d = divmod(index, r - i)
        values.append(pool.pop(d))
    return values, ("max", "min")[w]


def _make_item(spec: TaskSpec, index: int, prompt_id: str, rng: np.random.Generator) -> QaItem:
    params = _decode(spec, index)
    if spec.kind == "modarith":
        operands, ops = params
        m = spec.operand_range
        answer = _modarith_steps(operands, ops, m)[-1][4]
        distractors = rng.choice([v for v in range(m) if v != answer], size=3, replace=False)
        question = _modarith_question(operands, ops, m)
    else:
        values, which = params
        answer = max(values) if which == "max" else min(values)
        distractors = rng.choice([v for v in values if v != answer], size=3, replace=False)
        question = _compare_question(values, which)
    slot = int(rng.integers(4))
    opts = [str(int(d)) for d in distractors]
    opts.insert(slot, str(answer))
    label = LABELS[slot]
    cots = _variants_from_params(spec.kind, params, spec.operand_range, label)
    return QaItem(prompt_id, question, tuple(opts), label, cots[0])


def _variants_from_params(kind, params, operand_range, label) -> list[str]:
    if kind == "modarith":
        operands, ops = params
        return _modarith_cots(operands, ops, operand_range, label)
    values, which = params
    return _compare_cots(values, which, label)


def cot_variants(item: QaItem) -> list[str]:
    """Every valid reasoning phrasing for ``item``; the first is ``gold_cot``."""
    q = item.question
    if q.startswith(("max of ", "min of ")):
        which, rest = q.split(" of ", 1)
        values = [int(v) for v in rest.split(",")]
        return _compare_cots(values, which, item.gold_label)
    expr, m = q.rsplit(" mod ", 1)
    digits = [int(c) for c in expr if c.isdigit()]
    ops = "".join(c for c in expr if c in _OPS)
    return _modarith_cots(digits, ops, int(m), item.gold_label)


def _split_sizes(spec: TaskSpec) -> list[tuple[str, int]]:
    # train comes last so that resizing it leaves the other splits unchanged
    return [("teacher", spec.n_teacher), ("student", spec.n_student), ("eval", spec.n_eval), ("train", spec.n_train)]


def build_corpus(spec: TaskSpec) -> Corpus:
    """Generate every split of a task. Identical specs give identical corpora.

    Questions come from one seeded permutation of the question space, cut
    into consecutive splits; each item's options are drawn from a generator
    keyed by its question index. Growing one split therefore never changes
    the splits drawn before it.
    """
    if spec.kind not in KINDS:
        raise SpecInfeasible(f"unknown task kind {spec.kind!r}")
    if spec.n_train < 1 or spec.n_eval < 1 or spec.n_teacher < 0 or spec.n_student < 0:
        raise SpecInfeasible("train and eval splits need at least one item")
    if spec.chain_len < 1:
        raise SpecInfeasible("chain_len must be >= 1")
    if spec.kind == "modarith" and not 4 <= spec.operand_range <= 10:
        raise SpecInfeasible("modarith needs a modulus in 4..10 for four single-digit options")
    if spec.kind == "compare" and not (spec.chain_len >= 4 and spec.operand_range <= 10):
        raise SpecInfeasible("compare needs >= 4 listed digits")
    if spec.kind == "compare" and spec.chain_len > spec.operand_range:
        raise SpecInfeasible("compare lists distinct digits; chain_len exceeds operand_range")
    sizes = _split_sizes(spec)
    needed = sum(n for _, n in sizes)
    space = _question_space(spec)
    if needed > space:
        raise SpecInfeasible(f"{needed} distinct questions requested, only {space} exist")
    key = [spec.seed, KINDS.index(spec.kind), spec.chain_len, spec.operand_range]
    order = np.random.default_rng(key).permutation(space)
    splits: dict[str, list[QaItem]] = {}
    pos = 0
    for name, n in sizes:
        items = []
        for i in range(n):
            index = int(order[pos])
            pid = f"{spec.kind}-{name}-{i:05d}"
            items.append(_make_item(spec, index, pid, np.random.default_rng(key + [index])))
            pos += 1
        splits[name] = items
    return Corpus(
        spec,
        tuple(splits["train"]),
        tuple(splits["eval"]),
        tuple(splits["teacher"]),
        tuple(splits["student"]),
    )


def generate_corpus(spec: TaskSpec) -> tuple[list[QaItem], list[QaItem]]:
    corpus = build_corpus(spec)
    return list(corpus.train), list(corpus.eval)


PRESETS = {
    "modarith": TaskSpec(kind="modarith", chain_len=2, operand_range=7),
    "compare": TaskSpec(kind="compare", chain_len=6, operand_range=10),
}


def preset(name: str, **overrides) -> TaskSpec:
    try:
        base = PRESETS[name]
    except KeyError:
        raise SpecInfeasible(f"no preset named {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def write_jsonl(items: Iterable[QaItem], path: str | Path) -> None:
    with open(path, "w") as fh:
        for item in items:
            fh.write(item.to_json() + "\n")


def read_jsonl(path: str | Path) -> list[QaItem]:
    with open(path) as fh:
        return [QaItem.from_json(line) for line in fh if line.strip()]
