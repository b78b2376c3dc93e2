"""Command-line entry point: ``orpo-distill {run,matrix,eval}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import harness
from .taskgen import build_corpus, preset
from .textcore import Vocab
from .tinylm import Checkpoint, load_checkpoint, save_checkpoint
from .trainer import MODES, TrainConfig


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="orpo-distill", description="Black-box reasoning distillation with ORPO")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate one student")
    run.add_argument("--task", required=True, help="task preset name, or the kind of a task listed in --config")
    run.add_argument("--mode", required=True, choices=MODES)
    run.add_argument("--phi", type=float, default=None, help="policy fraction (defaults to the mode's value)")
    run.add_argument("--k", type=int, default=TrainConfig.K)
    run.add_argument("--lambda", dest="lam", type=float, default=TrainConfig.lam)
    run.add_argument("--temp", type=float, default=TrainConfig.tau)
    run.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    run.add_argument("--eta", type=float, default=TrainConfig.eta)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--out", required=True)
    run.add_argument("--config", help="matrix-style JSON for model sizes and pretraining steps")
    run.add_argument("--teacher-ckpt", help="reuse a saved teacher instead of training one")
    run.add_argument("--student", help="student architecture name from the config")

    mx = sub.add_parser("matrix", help="run the full experiment matrix")
    mx.add_argument("--config", required=True)
    mx.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a task's eval split")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--task", required=True)
    ev.add_argument("--records", action="store_true", help="include per-item records")
    return ap


def _cmd_run(args) -> dict:
    cfg = harness.MatrixConfig.load(args.config) if args.config else harness.MatrixConfig(tasks=[])
    # a task spelled out in the config wins over the preset of the same name
    spec = next((t for t in cfg.tasks if t.kind == args.task), None) or preset(args.task)
    train = dict(cfg.train, K=args.k, lam=args.lam, tau=args.temp, epochs=args.epochs, eta=args.eta)
    if args.phi is not None:
        train["phi"] = args.phi
    cfg = harness.MatrixConfig(**{**cfg.__dict__, "tasks": [spec], "train": train, "modes": [args.mode]})
    cfg.train_config(args.mode, args.seed)  # validate before any training
    student = args.student or next(iter(cfg.student_archs))
    if student not in cfg.student_archs:
        raise CliError(f"unknown student {student!r}; config has {sorted(cfg.student_archs)}")
    harness.configure_threads()
    vocab = Vocab.from_chars()
    out = Path(args.out)
    run_id = f"{spec.kind}-{student}-{args.mode}-seed{args.seed}-{cfg.digest()[:8]}"
    if args.teacher_ckpt:
        teacher = load_checkpoint(args.teacher_ckpt).params
        corpus = build_corpus(spec)
        ctx = harness.TaskContext(spec, corpus, teacher, harness.evaluate(teacher, corpus.eval, vocab, "teacher"))
    else:
        ctx = harness.prepare_task(cfg, spec, vocab)
    run_dir = out / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(Checkpoint(ctx.teacher, 0, None, {"role": "teacher"}), run_dir / "teacher.ckpt")
    cell, _ = harness.run_cell(cfg, ctx, student, args.mode, args.seed, vocab, out_dir=run_dir)
    summary = {
        "run_id": run_id,
        "cell": asdict(cell),
        "teacher_accuracy": ctx.teacher_report.accuracy,
        "matrix_config": cfg.to_dict(),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return {"run_id": run_id, "accuracy": cell.accuracy, "out": str(run_dir)}


def _cmd_matrix(args) -> dict:
    cfg = harness.MatrixConfig.load(args.config)
    if not cfg.seeds:
        raise CliError("matrix needs at least one seed")
    res = harness.run_matrix(cfg, args.out, progress=lambda c: logging.info("%s %s %s seed=%d acc=%s", c.task, c.student, c.mode, c.seed, c.accuracy))
    print(harness.render_table(res, "text"), file=sys.stderr)
    failed = [c for c in res.cells if c.error]
    return {"out": args.out, "cells": len(res.cells), "failed": len(failed), "config_hash": cfg.digest()}


def _cmd_eval(args) -> dict:
    harness.configure_threads()
    vocab = Vocab.from_chars()
    ckpt = load_checkpoint(args.ckpt)
    corpus = build_corpus(preset(args.task))
    rep = harness.evaluate(ckpt.params, corpus.eval, vocab, str(args.ckpt), args.task)
    d = asdict(rep)
    if not args.records:
        d.pop("records")
    return d


def _fail(exc: BaseException, code: int) -> int:
    print(json.dumps({"ok": False, "error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except CliError as exc:
        return _fail(exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": _cmd_run, "matrix": _cmd_matrix, "eval": _cmd_eval}
    try:
        result = handlers[args.command](args)
    except Exception as exc:
        return _fail(exc, 1)
    print(json.dumps({"ok": True, **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
