"""Evaluation, the experiment matrix and result tables."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import statistics
import time
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .prefdata import LmGenerator, NEGATIVE, POSITIVE, TEACHER, TracePool, pool_from_samples, sample_and_classify
from .taskgen import Corpus, QaItem, TaskSpec, build_corpus, preset, render_prompt
from .textcore import Vocab, frame_prompt, parse_boxed_answer
from .tinylm import ArchDescriptor, LmParams, generate, save_checkpoint, Checkpoint
from .trainer import (
    MODES,
    DistillResult,
    TrainConfig,
    distill,
    pretrain_on_gold,
    sample_student_pool,
    sft_finetune,
)

log = logging.getLogger(__name__)

TRAIN_FIELDS = tuple(f.name for f in fields(TrainConfig) if f.name not in ("mode", "phi", "seed"))

ROW_LABELS = {
    "zero_shot": "Zero-shot CoT Eval",
    "single_cot_ft": "Single CoT Fine Tuning",
    "diverse_cot_ft": "Diverse CoT Fine Tuning",
    "orpo_off": "Off Policy ORPO",
    "orpo_on": "On Policy ORPO",
    "orpo_mixed": "Mixed Policy ORPO",
    "orpo_teacher_neg": "Off Policy ORPO (teacher negatives)",
}
TEACHER_ROW = "Zero-shot CoT Eval Teacher"
TABLE1_ROWS = {
    "orpo_teacher_neg": "(p-CoT_Teacher, n-CoT_Teacher)",
    "orpo_off": "(p-CoT_Teacher, n-CoT_Student)",
}


@dataclass
class EvalReport:
    model_id: str
    dataset_id: str
    accuracy: float
    n_items: int
    n_unparseable: int
    records: list[dict] = field(default_factory=list)


def evaluate(
    model: LmParams,
    eval_items: Sequence[QaItem],
    vocab: Vocab,
    model_id: str = "",
    dataset_id: str = "",
    max_len: int = 62,
) -> EvalReport:
    """Greedy-decode every rendered prompt and score the boxed answer."""
    if not eval_items:
        raise ValueError("eval_items must be nonempty")
    prompts = [frame_prompt(render_prompt(it), vocab).ids for it in eval_items]
    outs = generate(model, prompts, max_len, vocab.eos)
    preds = []
    for out in outs:
        pred = None
        if out is not None and not any(i in vocab.special_ids for i in out.ids):
            pred = parse_boxed_answer("".join(vocab.symbols[i] for i in out.ids))
        preds.append(pred)
    return score_labels(eval_items, preds, model_id, dataset_id)


def configure_threads() -> int:
    """Apply ORPO_DISTILL_THREADS to torch's intra-op pool; returns the count."""
    raw = os.environ.get("ORPO_DISTILL_THREADS")
    if raw is None:
        return torch.get_num_threads()
    n = int(raw)
    if n < 1:
        raise ValueError("ORPO_DISTILL_THREADS must be >= 1")
    torch.set_num_threads(n)
    return n


def score_labels(eval_items: Sequence[QaItem], predicted: Sequence[Optional[str]], model_id="", dataset_id="") -> EvalReport:
    """Score already-extracted labels; None counts as unparseable."""
    if not eval_items:
        raise ValueError("eval_items must be nonempty")
    if len(predicted) != len(eval_items):
        raise ValueError("one prediction per item required")
    records = [
        {"prompt_id": it.prompt_id, "predicted": p, "gold": it.gold_label, "correct": p == it.gold_label}
        for it, p in zip(eval_items, predicted)
    ]
    correct = sum(r["correct"] for r in records)
    unparseable = sum(p is None for p in predicted)
    return EvalReport(model_id, dataset_id, 100.0 * correct / len(eval_items), len(eval_items), unparseable, records)


def evaluate_generator(generator, eval_items: Sequence[QaItem], model_id="", dataset_id="", max_len: int = 62) -> EvalReport:
    """Evaluate any text generator, e.g. a stub emitting random labels.
    Greedy decoding is requested as temperature 0."""
    texts = generator.generate([render_prompt(it) for it in eval_items], [0] * len(eval_items), 0.0, max_len)
    preds = [None if t is None else parse_boxed_answer(t) for t in texts]
    return score_labels(eval_items, preds, model_id, dataset_id)


# --- matrix configuration ---------------------------------------------------


@dataclass
class MatrixConfig:
    tasks: list[TaskSpec]
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    modes: list[str] = field(default_factory=lambda: list(MODES))
    teacher_arch: dict = field(default_factory=lambda: {"family": "attn", "d_model": 48, "d_hidden": 96, "n_layers": 3})
    student_archs: dict = field(
        default_factory=lambda: {
            "conv-s": {"family": "conv-gated", "d_model": 32, "d_hidden": 64, "n_layers": 2},
            "conv-xs": {"family": "conv-gated", "d_model": 24, "d_hidden": 48, "n_layers": 2},
        }
    )
    train: dict = field(default_factory=dict)
    # step counts are per task kind; "default" covers kinds not listed
    teacher_steps: dict = field(default_factory=lambda: {"modarith": 3000, "compare": 500})
    teacher_eta: float = 3e-3
    teacher_seed: int = 1234
    student_steps: dict = field(default_factory=lambda: {"modarith": 1100, "compare": 250})
    student_eta: float = 5e-3
    context_len: int = 128

    def steps_for(self, table: dict | int, kind: str) -> int:
        if isinstance(table, int):
            return table
        return int(table.get(kind, table.get("default", 0)))

    def train_config(self, mode: str, seed: int) -> TrainConfig:
        return TrainConfig.for_mode(mode, seed=seed, **self.train)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = [t.to_dict() for t in self.tasks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MatrixConfig":
        """Build from JSON. Tasks may be preset names or full specs, and
        TrainConfig fields may sit at the top level or under "train"."""
        d = dict(d)
        if "tasks" not in d:
            raise ValueError("matrix config needs a 'tasks' list")
        d["tasks"] = [preset(t) if isinstance(t, str) else TaskSpec(**t) for t in d["tasks"]]
        train = dict(d.pop("train", {}))
        for name in TRAIN_FIELDS:
            if name in d:
                train[name] = d.pop(name)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown matrix config keys: {sorted(unknown)}")
        return cls(train=train, **d)

    @classmethod
    def load(cls, path: str | Path) -> "MatrixConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def arch(self, spec: dict, vocab: Vocab) -> ArchDescriptor:
        return ArchDescriptor(vocab_size=len(vocab), context_len=self.context_len, **spec)


@dataclass
class CellResult:
    task: str
    student: str
    mode: str
    seed: int
    accuracy: Optional[float]
    n_items: int = 0
    n_unparseable: int = 0
    config_hash: str = ""
    params_digest: str = ""
    seconds: float = 0.0
    diversity: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)
    error: Optional[str] = None


@dataclass
class ExperimentResult:
    cells: list[CellResult] = field(default_factory=list)
    teacher: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def accuracies(self, task: str, student: str, mode: str) -> list[float]:
        return [
            c.accuracy
            for c in sorted(self.cells, key=lambda c: c.seed)
            if c.task == task and c.student == student and c.mode == mode and c.accuracy is not None
        ]

    def tasks(self) -> list[str]:
        return list(dict.fromkeys(c.task for c in self.cells))

    def students(self) -> list[str]:
        return list(dict.fromkeys(c.student for c in self.cells))

    def modes(self) -> list[str]:
        present = {c.mode for c in self.cells}
        return [m for m in MODES if m in present]

    def to_dict(self) -> dict:
        return {"cells": [asdict(c) for c in self.cells], "teacher": self.teacher, "metadata": self.metadata}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        return cls([CellResult(**c) for c in d["cells"]], d.get("teacher", {}), d.get("metadata", {}))


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    if not values:
        return float("nan"), float("nan")
    sd = statistics.stdev(values) if len(values) > 1 else 0.0
    return statistics.fmean(values), sd


# --- running ----------------------------------------------------------------


@dataclass
class TaskContext:
    spec: TaskSpec
    corpus: Corpus
    teacher: LmParams
    teacher_report: EvalReport


def prepare_task(cfg: MatrixConfig, spec: TaskSpec, vocab: Vocab) -> TaskContext:
    corpus = build_corpus(spec)
    arch = cfg.arch(cfg.teacher_arch, vocab)
    steps = cfg.steps_for(cfg.teacher_steps, spec.kind)
    teacher = pretrain_on_gold(arch, corpus.teacher, vocab, steps, cfg.teacher_seed, eta=cfg.teacher_eta)
    report = evaluate(teacher, corpus.eval, vocab, "teacher", spec.kind)
    return TaskContext(spec, corpus, teacher, report)


def teacher_pools(
    teacher: LmParams, items: Sequence[QaItem], config: TrainConfig, vocab: Vocab
) -> tuple[TracePool, TracePool]:
    """Positive and negative teacher pools from one sampling pass."""
    gen = LmGenerator(teacher, vocab, name="teacher")
    samples = sample_and_classify(gen, items, config.K, config.tau, vocab, config.seed, TEACHER, 0, config.max_new_tokens)
    pos = pool_from_samples(samples, "teacher_pos", POSITIVE, config.rouge_threshold, config.K)
    neg = pool_from_samples(samples, "teacher_neg", NEGATIVE, config.rouge_threshold, config.K)
    return pos, neg


def run_cell(
    cfg: MatrixConfig,
    ctx: TaskContext,
    student_name: str,
    mode: str,
    seed: int,
    vocab: Vocab,
    shared: Optional[dict] = None,
    out_dir: Optional[Path] = None,
) -> tuple[CellResult, Optional[DistillResult]]:
    """Train and evaluate one (task, student, mode, seed) cell.

    ``shared`` caches the student's initial weights and the sampled pools so
    sibling cells reuse them; everything in it is a pure function of
    (config, task, student, seed). ``out_dir`` is this cell's own directory.
    """
    shared = shared if shared is not None else {}
    tic = time.perf_counter()
    config = cfg.train_config(mode, seed)
    items = ctx.corpus.train
    key = (ctx.spec.kind, student_name, seed)
    if ("student0",) + key not in shared:
        arch = cfg.arch(cfg.student_archs[student_name], vocab)
        shared[("student0",) + key] = pretrain_on_gold(
            arch, ctx.corpus.student, vocab, cfg.steps_for(cfg.student_steps, ctx.spec.kind), seed, eta=cfg.student_eta
        )
    student0 = shared[("student0",) + key]
    tkey = ("teacher_pools", ctx.spec.kind, seed)
    if tkey not in shared:
        shared[tkey] = teacher_pools(ctx.teacher, items, config, vocab)
    pos, teacher_neg = shared[tkey]
    teacher = LmGenerator(ctx.teacher, vocab, name="teacher")

    def eval_fn(p):
        return evaluate(p, ctx.corpus.eval, vocab).accuracy

    result = None
    if mode == "zero_shot":
        final = student0
    elif mode in ("single_cot_ft", "diverse_cot_ft"):
        n = 1 if mode == "single_cot_ft" else config.K
        result = sft_finetune(config, teacher, student0, items, vocab, n, teacher_pos=pos)
        final = result.student
    else:
        if mode == "orpo_teacher_neg":
            base = teacher_neg
        else:
            bkey = ("base_pool",) + key
            if bkey not in shared:
                shared[bkey] = sample_student_pool(student0, "base_student", items, config, vocab, 0)
            base = shared[bkey]
        result = distill(config, teacher, student0, items, vocab, teacher_pos=pos, base_pool=base, out_dir=out_dir)
        final = result.student
    report = evaluate(final, ctx.corpus.eval, vocab, f"{student_name}/{mode}/{seed}", ctx.spec.kind)
    cell = CellResult(
        ctx.spec.kind,
        student_name,
        mode,
        seed,
        report.accuracy,
        report.n_items,
        report.n_unparseable,
        config.digest(),
        final.digest(),
        time.perf_counter() - tic,
    )
    if result is not None:
        cell.diversity = [r.latest_diversity for r in result.log.epochs]
        cell.epoch_accuracy = [r.eval_accuracy for r in result.log.epochs]
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(Checkpoint(final, config.epochs, None, {"config": config.digest()}), d / "final.ckpt")
        (d / "run.json").write_text(
            json.dumps(
                {"config": config.to_dict(), "corpus": ctx.corpus.digest(), "task": ctx.spec.to_dict()},
                indent=2,
                sort_keys=True,
            )
        )
        if result is not None:
            result.log.write_jsonl(d / "trainlog.jsonl")
    return cell, result


def run_matrix(
    cfg: MatrixConfig,
    out_dir: Optional[str | Path] = None,
    progress: Optional[Callable[[CellResult], None]] = None,
) -> ExperimentResult:
    """Run every (task, student, mode, seed) cell. Failing cells are recorded
    with their error and the matrix carries on."""
    configure_threads()
    vocab = Vocab.from_chars()
    out = Path(out_dir) if out_dir is not None else None
    res = ExperimentResult(metadata={"config": cfg.to_dict(), "config_hash": cfg.digest()})
    for spec in cfg.tasks:
        tic = time.perf_counter()
        ctx = prepare_task(cfg, spec, vocab)
        res.teacher[spec.kind] = {
            "accuracy": ctx.teacher_report.accuracy,
            "params_digest": ctx.teacher.digest(),
            "corpus": ctx.corpus.digest(),
            "seconds": time.perf_counter() - tic,
        }
        for seed in cfg.seeds:
            shared: dict = {}
            for student in cfg.student_archs:
                for mode in cfg.modes:
                    try:
                        cell_dir = None if out is None else out / spec.kind / student / mode / f"seed-{seed}"
                        cell, _ = run_cell(cfg, ctx, student, mode, seed, vocab, shared, cell_dir)
                    except Exception as exc:  # recorded, matrix continues
                        log.error("cell %s/%s/%s/%d failed: %s", spec.kind, student, mode, seed, exc)
                        cell = CellResult(spec.kind, student, mode, seed, None, error=traceback.format_exc())
                    res.cells.append(cell)
                    if progress is not None:
                        progress(cell)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.json").write_text(json.dumps(res.to_dict(), indent=2, sort_keys=True))
        for fmt, ext in (("text", "txt"), ("csv", "csv"), ("json", "json")):
            (out / f"table.{ext}").write_text(render_table(res, fmt))
    return res


# --- tables -----------------------------------------------------------------


def table_rows(result: ExperimentResult) -> list[dict]:
    """One row per (student, mode) plus one teacher row; cells are mean and
    stddev over seeds per task, and the row average of the task means."""
    rows = []
    tasks = result.tasks() or list(result.teacher)
    for student in result.students():
        for mode in result.modes():
            row = {"student": student, "mode": mode, "label": ROW_LABELS[mode], "cells": {}}
            means = []
            for task in tasks:
                m, sd = mean_sd(result.accuracies(task, student, mode))
                row["cells"][task] = {"mean": m, "sd": sd, "n": len(result.accuracies(task, student, mode))}
                means.append(m)
            row["avg"] = float(np.mean(means)) if means else float("nan")
            rows.append(row)
    if result.teacher:
        row = {"student": "teacher", "mode": "zero_shot", "label": TEACHER_ROW, "cells": {}}
        for task in tasks:
            acc = result.teacher.get(task, {}).get("accuracy", float("nan"))
            row["cells"][task] = {"mean": acc, "sd": 0.0, "n": 1}
        row["avg"] = float(np.mean([c["mean"] for c in row["cells"].values()])) if tasks else float("nan")
        rows.append(row)
    return rows


def render_table(result: ExperimentResult, fmt: str = "text") -> str:
    rows = table_rows(result)
    tasks = result.tasks() or list(result.teacher)
    if fmt == "json":
        return json.dumps({"tasks": tasks, "rows": rows}, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["student", "mode", "label"]
        for t in tasks:
            header += [f"{t}_mean", f"{t}_sd", f"{t}_n"]
        w.writerow(header + ["avg"])
        for r in rows:
            line = [r["student"], r["mode"], r["label"]]
            for t in tasks:
                c = r["cells"][t]
                line += [repr(c["mean"]), repr(c["sd"]), c["n"]]
            w.writerow(line + [repr(r["avg"])])
        return buf.getvalue()
    if fmt != "text":
        raise ValueError(f"unknown table format {fmt!r}")
    width = max([len(r["label"]) for r in rows] + [len("Experiments")]) + 2
    lines = ["Experiments".ljust(width) + "".join(t.rjust(16) for t in tasks) + "Avg Acc%".rjust(10)]
    current = None
    for r in rows:
        if r["student"] != current:
            current = r["student"]
            lines.append(f"[{current}]")
        cells = "".join(f"{c['mean']:7.2f} ± {c['sd']:5.2f}".rjust(16) for c in (r["cells"][t] for t in tasks))
        lines.append(("  " + r["label"]).ljust(width) + cells + f"{r['avg']:10.2f}")
    t1 = table1_rows(result)
    if t1:
        lines.append("")
        lines.append("Negative source ablation (Off-Policy ORPO)".ljust(width) + "".join(t.rjust(16) for t in tasks))
        for r in t1:
            cells = "".join(f"{c['mean']:7.2f} ± {c['sd']:5.2f}".rjust(16) for c in (r["cells"][t] for t in tasks))
            lines.append(f"  [{r['student']}] {r['label']}".ljust(width) + cells)
    return "\n".join(lines) + "\n"


def table1_rows(result: ExperimentResult) -> list[dict]:
    rows = []
    for student in result.students():
        for mode in ("orpo_teacher_neg", "orpo_off"):
            if mode not in result.modes():
                continue
            cells = {}
            for task in result.tasks():
                m, sd = mean_sd(result.accuracies(task, student, mode))
                cells[task] = {"mean": m, "sd": sd}
            rows.append({"student": student, "mode": mode, "label": TABLE1_ROWS[mode], "cells": cells})
    return rows


def read_csv_table(text: str) -> list[dict]:
    """Parse :func:`render_table` CSV output back into row dicts."""
    reader = csv.DictReader(io.StringIO(text))
    out = []
    for rec in reader:
        tasks = [k[: -len("_mean")] for k in rec if k.endswith("_mean")]
        out.append(
            {
                "student": rec["student"],
                "mode": rec["mode"],
                "label": rec["label"],
                "cells": {
                    t: {"mean": float(rec[f"{t}_mean"]), "sd": float(rec[f"{t}_sd"]), "n": int(rec[f"{t}_n"])}
                    for t in tasks
                },
                "avg": float(rec["avg"]),
            }
        )
    return out
