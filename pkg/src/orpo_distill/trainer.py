"""ORPO distillation loop with policy-fraction gating, plus SFT baselines.

Negatives come from two pools. The base pool is sampled once from the
initial student. The latest pool is resampled at every epoch boundary from
the checkpoint that ended the previous epoch; in epoch 1 that checkpoint is
the initial student, so both pools coincide. Every iteration draws
``u ~ U(0, 1)`` and takes the batch's rejected traces from the latest pool
when ``u <= phi``, otherwise from the base pool.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import orpo
from .prefdata import (
    NEGATIVE,
    STUDENT,
    EmptyPool,
    LmGenerator,
    PreferenceTriple,
    TextGenerator,
    Trace,
    TracePool,
    assemble_triples,
    build_positive_pool,
    pool_from_samples,
    sample_and_classify,
)
from .taskgen import QaItem, cot_variants, render_prompt
from .textcore import Vocab, frame_prompt, rouge_matrix, tokenize
from .tinylm import (
    AdamState,
    ArchDescriptor,
    Checkpoint,
    LmParams,
    NonFiniteLoss,
    init_params,
    optimizer_step,
    save_checkpoint,
    value_and_grad,
)

log = logging.getLogger(__name__)

MODES = ("zero_shot", "single_cot_ft", "diverse_cot_ft", "orpo_off", "orpo_on", "orpo_mixed", "orpo_teacher_neg")
MODE_PHI = {"orpo_off": 0.0, "orpo_on": 1.0, "orpo_mixed": 0.5, "orpo_teacher_neg": 0.0}
LATEST, BASE = "latest", "base"


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "orpo_mixed"
    phi: float = 0.5
    K: int = 8
    lam: float = 1.0
    tau: float = 0.8
    eta: float = 1e-3
    epochs: int = 5
    batch_size: int = 8
    rouge_threshold: float = 0.80
    seed: int = 0
    max_new_tokens: int = 62

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError("phi must lie in [0, 1]")
        if self.mode in ("orpo_off", "orpo_teacher_neg") and self.phi != 0.0:
            raise ValueError(f"{self.mode} requires phi == 0")
        if self.mode == "orpo_on" and self.phi != 1.0:
            raise ValueError("orpo_on requires phi == 1")
        if self.K < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("K and batch_size must be >= 1, epochs >= 0")
        if self.lam < 0 or self.tau <= 0 or self.eta <= 0:
            raise ValueError("need lambda >= 0, tau > 0, eta > 0")
        if not 0 < self.rouge_threshold <= 1:
            raise ValueError("rouge_threshold must lie in (0, 1]")

    @classmethod
    def for_mode(cls, mode: str, **kw) -> "TrainConfig":
        if mode in MODE_PHI and "phi" not in kw:
            kw["phi"] = MODE_PHI[mode]
        return cls(mode=mode, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class IterRecord:
    epoch: int
    t: int
    u: Optional[float]
    pool: Optional[str]
    pool_epoch: Optional[int]
    sft: float
    or_loss: float
    total: float
    n_contrastive: int
    seconds: float


@dataclass
class EpochRecord:
    epoch: int
    eval_accuracy: Optional[float]
    latest_pool: Optional[dict]
    base_diversity: Optional[float]
    latest_diversity: Optional[float]
    latest_raw_diversity: Optional[float]
    mean_total: float
    # raw diversity restricted to prompts with two or more negatives, where
    # the singleton convention (1.0) cannot mask a narrowing distribution
    latest_multi_diversity: Optional[float] = None


@dataclass
class TrainLog:
    iterations: list[IterRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for r in self.iterations:
                fh.write(json.dumps({"kind": "iter", **asdict(r)}) + "\n")
            for r in self.epochs:
                fh.write(json.dumps({"kind": "epoch", **asdict(r)}) + "\n")

    def pool_usage(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.iterations:
            if r.pool is not None:
                out[r.pool] = out.get(r.pool, 0) + 1
        return out


@dataclass
class DistillResult:
    student: LmParams
    log: TrainLog
    checkpoints: list[Checkpoint]


def gate(u: float, phi: float) -> str:
    if not (0.0 <= u <= 1.0 and 0.0 <= phi <= 1.0):
        raise ValueError("u and phi must lie in [0, 1]")
    return LATEST if u <= phi else BASE


def negative_diversity(pool: TracePool | dict[str, Sequence[Trace]]) -> float:
    """Mean over prompts of ``1 - mean pairwise ROUGE-L``; singletons score 1."""
    lists = pool.traces if isinstance(pool, TracePool) else pool
    lists = {k: v for k, v in lists.items() if v}
    if not lists:
        raise ValueError("pool is empty")
    per_prompt = []
    for pid in sorted(lists):
        traces = lists[pid]
        if len(traces) == 1:
            per_prompt.append(1.0)
            continue
        m = rouge_matrix([t.tokens for t in traces])
        pairs = [m[i, j] for i, j in combinations(range(len(traces)), 2)]
        per_prompt.append(1.0 - float(np.mean(pairs)))
    return float(np.mean(per_prompt))


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in key])


def prompt_token_map(items: Sequence[QaItem], vocab: Vocab) -> dict[str, tuple[int, ...]]:
    return {it.prompt_id: frame_prompt(render_prompt(it), vocab).ids for it in items}


def check_context(ptoks: dict, config: TrainConfig, params: LmParams) -> None:
    """Fail before any sampling if a full-length response plus EOS could
    overflow the student's context."""
    need = max(map(len, ptoks.values()), default=0) + config.max_new_tokens + 1
    if need > params.arch.context_len:
        raise ValueError(
            f"longest prompt plus max_new_tokens + 1 is {need} tokens, over the context of {params.arch.context_len}"
        )


def _sgd_epochs(
    params: LmParams,
    records_for_epoch: Callable[[int], list],
    config: TrainConfig,
    eos: int,
    log_: TrainLog,
    on_epoch_end: Optional[Callable[[int, LmParams, list[IterRecord]], None]] = None,
    on_epoch_start: Optional[Callable[[int, LmParams], None]] = None,
    gate_rng: Optional[np.random.Generator] = None,
    pick_batch: Optional[Callable[[int, str, list], list]] = None,
) -> LmParams:
    """Shared optimisation loop over shuffled records in fixed-size batches."""
    state = AdamState.fresh(params.theta.size)
    arch = params.arch
    for epoch in range(1, config.epochs + 1):
        if on_epoch_start is not None:
            on_epoch_start(epoch, params)
        records = records_for_epoch(epoch)
        order = _rng(config.seed, epoch, "shuffle").permutation(len(records))
        its: list[IterRecord] = []
        for t, start in enumerate(range(0, len(records), config.batch_size)):
            tic = time.perf_counter()
            batch_keys = [records[i] for i in order[start : start + config.batch_size]]
            u = pool = None
            if gate_rng is not None:
                u = float(gate_rng.random())
                pool = gate(u, config.phi)
            batch: list[PreferenceTriple] = pick_batch(epoch, pool, batch_keys) if pick_batch else batch_keys
            prompts = [b.prompt_tokens for b in batch]
            chosen = [tuple(b.chosen.tokens.ids) + (eos,) for b in batch]
            rejected = [None if b.rejected is None else tuple(b.rejected.tokens.ids) + (eos,) for b in batch]
            lam = config.lam

            def loss(theta):
                return orpo.batch_objective(arch, theta, prompts, chosen, rejected, lam)

            try:
                total, g, terms = value_and_grad(loss, params)
            except NonFiniteLoss:
                log.error("non-finite loss at epoch %d iteration %d", epoch, t)
                raise
            params, state = optimizer_step(params, g, state, config.eta)
            n_con = sum(r is not None for r in rejected) if lam > 0 else 0
            pool_epoch = None
            if pool is not None:
                eps = {b.rejected.source_epoch for b in batch if b.rejected is not None}
                pool_epoch = max(eps) if eps else None
            rec = IterRecord(
                epoch, t, u, pool, pool_epoch,
                float(terms["sft"].detach().mean()),
                float(terms["or"].detach().sum()) / max(n_con, 1),
                total, n_con, time.perf_counter() - tic,
            )
            its.append(rec)
            log_.iterations.append(rec)
        if on_epoch_end is not None:
            on_epoch_end(epoch, params, its)
    return params


def _positive_records(pos: TracePool, ptoks: dict) -> list[PreferenceTriple]:
    return [PreferenceTriple(pid, ptoks[pid], t, None) for pid in sorted(pos.traces) for t in pos.traces[pid]]


def distill(
    config: TrainConfig,
    teacher: TextGenerator,
    student0: LmParams,
    items: Sequence[QaItem],
    vocab: Vocab,
    eval_fn: Optional[Callable[[LmParams], float]] = None,
    teacher_pos: Optional[TracePool] = None,
    base_pool: Optional[TracePool] = None,
    out_dir: Optional[str | Path] = None,
) -> DistillResult:
    """Run ORPO distillation of ``student0`` against ``teacher``'s traces.

    ``teacher`` is used only as a text generator. Precomputed teacher/base
    pools may be passed in so that several runs share them; they must have
    been built with the same config and seed. For ``orpo_teacher_neg`` the
    base pool must be the teacher's negative pool.
    """
    ptoks = prompt_token_map(items, vocab)
    check_context(ptoks, config, student0)
    if teacher_pos is None:
        teacher_pos = build_positive_pool(
            teacher, items, config.K, config.tau, config.rouge_threshold, vocab, config.seed, config.max_new_tokens
        )
    if not teacher_pos.traces:
        raise EmptyPool("the teacher produced no positive trace for any prompt")
    if base_pool is None:
        if config.mode == "orpo_teacher_neg":
            raise ValueError("orpo_teacher_neg needs the teacher negative pool as base_pool")
        base_pool = sample_student_pool(student0, "base_student", items, config, vocab, 0)
    log_ = TrainLog()
    checkpoints = [Checkpoint(student0, 0, None, {"mode": config.mode, "config": config.digest()})]
    if config.epochs == 0:
        return DistillResult(student0, log_, checkpoints)

    positives = _positive_records(teacher_pos, ptoks)
    pools: dict[str, TracePool] = {BASE: base_pool, LATEST: base_pool}
    pairings: dict[str, dict] = {}
    diversity = {}
    gate_rng = _rng(config.seed, "gate")

    def on_epoch_start(epoch: int, params: LmParams):
        # Epoch 1 samples from the initial student, which is the base pool's
        # source, so the pools coincide; later epochs resample the latest one.
        if config.phi > 0 and epoch > 1:
            pools[LATEST] = sample_student_pool(params, "latest_student", items, config, vocab, epoch - 1)
        elif epoch == 1:
            pools[LATEST] = base_pool
        for name in (BASE, LATEST):
            if name == LATEST and config.phi == 0:
                continue
            triples = assemble_triples(teacher_pos, pools[name], _rng(config.seed, epoch, "pair"), ptoks)
            pairings[name] = {(t.prompt_id, t.chosen.sample_index): t for t in triples}
        diversity[epoch] = _pool_diversity(pools[LATEST]) if config.phi > 0 else (None, None, None)

    def pick_batch(epoch, pool, keys):
        table = pairings[pool]
        return [table[(k.prompt_id, k.chosen.sample_index)] for k in keys]

    def on_epoch_end(epoch: int, params: LmParams, its):
        path = None
        if out_dir is not None:
            path = Path(out_dir) / f"epoch-{epoch}.ckpt"
        ck = Checkpoint(params, epoch, None, {"mode": config.mode, "config": config.digest()})
        checkpoints.append(ck)
        if path is not None:
            save_checkpoint(ck, path)
        lat = pools[LATEST] if config.phi > 0 else None
        div, raw_div, multi_div = diversity[epoch]
        log_.epochs.append(
            EpochRecord(
                epoch,
                eval_fn(params) if eval_fn else None,
                None if lat is None else {k: v for k, v in lat.stats().items() if k != "per_prompt"},
                _pool_diversity(pools[BASE])[0],
                div,
                raw_div,
                float(np.mean([r.total for r in its])) if its else float("nan"),
                multi_div,
            )
        )

    student = _sgd_epochs(
        student0,
        lambda epoch: positives,
        config,
        vocab.eos,
        log_,
        on_epoch_end=on_epoch_end,
        on_epoch_start=on_epoch_start,
        gate_rng=gate_rng,
        pick_batch=pick_batch,
    )
    return DistillResult(student, log_, checkpoints)


def _pool_diversity(pool: TracePool) -> tuple[Optional[float], Optional[float], Optional[float]]:
    """Diversity of the deduplicated pool, of the raw negatives, and of the
    raw negatives of prompts with at least two of them."""
    div = negative_diversity(pool) if pool.traces else None
    raw = {k: v for k, v in pool.raw.items() if v}
    raw_div = negative_diversity(raw) if raw else None
    multi = {k: v for k, v in raw.items() if len(v) > 1}
    multi_div = negative_diversity(multi) if multi else None
    return div, raw_div, multi_div


def sample_student_pool(
    params: LmParams, pool_tag: str, items: Sequence[QaItem], config: TrainConfig, vocab: Vocab, source_epoch: int
) -> TracePool:
    gen = LmGenerator(params, vocab, name=f"student@{source_epoch}")
    samples = sample_and_classify(
        gen, items, config.K, config.tau, vocab, config.seed, STUDENT, source_epoch, config.max_new_tokens
    )
    return pool_from_samples(samples, pool_tag, NEGATIVE, config.rouge_threshold, config.K)


def sft_finetune(
    config: TrainConfig,
    teacher: TextGenerator,
    student0: LmParams,
    items: Sequence[QaItem],
    vocab: Vocab,
    traces_per_prompt: int,
    teacher_pos: Optional[TracePool] = None,
    eval_fn: Optional[Callable[[LmParams], float]] = None,
) -> DistillResult:
    """NLL-only training on teacher positives: one per prompt (the surviving
    trace with the lowest sample index) or the whole deduplicated pool."""
    if traces_per_prompt not in (1, config.K):
        raise ValueError("traces_per_prompt must be 1 or K")
    if teacher_pos is None:
        teacher_pos = build_positive_pool(
            teacher, items, config.K, config.tau, config.rouge_threshold, vocab, config.seed, config.max_new_tokens
        )
    ptoks = prompt_token_map(items, vocab)
    check_context(ptoks, config, student0)
    records = _positive_records(teacher_pos, ptoks)
    if traces_per_prompt == 1:
        first: dict[str, PreferenceTriple] = {}
        for r in records:
            first.setdefault(r.prompt_id, r)
        records = [first[pid] for pid in sorted(first)]
    sft_config = replace(config, lam=0.0)
    log_ = TrainLog()
    checkpoints = [Checkpoint(student0, 0)]

    def on_epoch_end(epoch, params, its):
        checkpoints.append(Checkpoint(params, epoch))
        log_.epochs.append(
            EpochRecord(epoch, eval_fn(params) if eval_fn else None, None, None, None, None,
                        float(np.mean([r.total for r in its])) if its else float("nan"))
        )

    student = _sgd_epochs(student0, lambda e: records, sft_config, vocab.eos, log_, on_epoch_end=on_epoch_end)
    return DistillResult(student, log_, checkpoints)


def pretrain_on_gold(
    arch: ArchDescriptor,
    items: Sequence[QaItem],
    vocab: Vocab,
    steps: int,
    seed: int,
    batch_size: int = 32,
    eta: float = 5e-3,
    init: Optional[LmParams] = None,
) -> LmParams:
    """Supervised pretraining on every CoT phrasing of ``items``.

    Used to build the teacher and to give the base student its answer format.
    """
    params = init if init is not None else init_params(arch, seed)
    data = []
    for it in items:
        prompt = frame_prompt(render_prompt(it), vocab).ids
        for cot in cot_variants(it):
            data.append((prompt, tokenize(cot, vocab).ids + (vocab.eos,)))
    if not data or steps <= 0:
        return params
    rng = _rng(seed, "pretrain")
    state = AdamState.fresh(params.theta.size)
    for _ in range(steps):
        idx = rng.integers(len(data), size=batch_size)
        prompts = [data[i][0] for i in idx]
        targets = [data[i][1] for i in idx]

        def loss(theta):
            return orpo.batch_objective(arch, theta, prompts, targets, [None] * len(idx), 0.0)

        _, g, _ = value_and_grad(loss, params)
        params, state = optimizer_step(params, g, state, eta)
    return params
