"""Preference-pool construction from sampled reasoning traces.

Models are consumed only through :class:`TextGenerator`, a string-in,
string-out sampling interface. Nothing here reads logits or parameters, so a
teacher can be any text generator, including one with an unrelated
architecture or no weights at all.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import numpy as np

from .taskgen import QaItem, render_prompt
from .textcore import TokenSeq, UnknownSymbol, Vocab, dedup_by_rouge, frame_prompt, parse_boxed_answer, tokenize
from .tinylm import LmParams, generate

POSITIVE, NEGATIVE = "positive", "negative"
TEACHER, STUDENT = "teacher", "student"
POOL_TAGS = ("base_student", "latest_student", "teacher_pos", "teacher_neg")


class EmptyPool(RuntimeError):
    pass


class TextGenerator(Protocol):
    """Black-box sampler: one completion per (prompt, seed) request.
    ``tau == 0`` asks for greedy decoding."""

    def generate(self, prompts: Sequence[str], seeds: Sequence[int], tau: float, max_len: int) -> list[Optional[str]]:
        ...


class LmGenerator:
    """Adapts a tiny LM to :class:`TextGenerator`.

    Completions that run past the context, or contain special tokens, come
    back as None.
    """

    def __init__(self, params: LmParams, vocab: Vocab, name: str = "lm"):
        self._params = params
        self._vocab = vocab
        self.name = name

    def generate(self, prompts, seeds, tau, max_len):
        v = self._vocab
        ids = [frame_prompt(p, v).ids for p in prompts]
        if tau == 0:
            outs = generate(self._params, ids, max_len, v.eos)
        else:
            rngs = [np.random.default_rng(s) for s in seeds]
            outs = generate(self._params, ids, max_len, v.eos, tau=tau, rngs=rngs)
        texts: list[Optional[str]] = []
        for out in outs:
            if out is None or any(i in v.special_ids for i in out.ids):
                texts.append(None)
            else:
                texts.append("".join(v.symbols[i] for i in out.ids))
        return texts


def trace_seed(run_seed: int, source: str, source_epoch: int, prompt_id: str, sample_index: int) -> int:
    """Seed of one sampled trace; independent of batching and sampling order."""
    ss = np.random.SeedSequence(
        [run_seed, zlib.crc32(source.encode()), source_epoch, zlib.crc32(prompt_id.encode()), sample_index]
    )
    return int(ss.generate_state(2, dtype=np.uint64)[0])


@dataclass(frozen=True)
class Trace:
    prompt_id: str
    tokens: TokenSeq
    text: str
    parsed: Optional[str]
    polarity: str
    source: str
    source_epoch: int
    sample_index: int

    def to_dict(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "tokens": list(self.tokens.ids),
            "vocab_tag": self.tokens.vocab_tag,
            "text": self.text,
            "parsed": self.parsed,
            "polarity": self.polarity,
            "source": self.source,
            "source_epoch": self.source_epoch,
            "sample_index": self.sample_index,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Trace":
        return cls(
            d["prompt_id"], TokenSeq(tuple(d["tokens"]), d.get("vocab_tag", "")), d["text"], d["parsed"], d["polarity"],
            d["source"], d["source_epoch"], d["sample_index"],
        )


@dataclass(frozen=True)
class PreferenceTriple:
    """Prompt, chosen trace and rejected trace. ``rejected`` is None for an
    SFT-only record (the prompt had no negative to contrast with)."""

    prompt_id: str
    prompt_tokens: tuple[int, ...]
    chosen: Trace
    rejected: Optional[Trace]

    def to_dict(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "prompt_tokens": list(self.prompt_tokens),
            "chosen": self.chosen.to_dict(),
            "rejected": None if self.rejected is None else self.rejected.to_dict(),
        }


@dataclass
class SampleStats:
    requested: int = 0
    dropped: int = 0
    positives: int = 0
    negatives: int = 0
    unparseable: int = 0


@dataclass
class TracePool:
    pool_tag: str
    traces: dict[str, list[Trace]]
    source_epoch: int = 0
    raw: dict[str, list[Trace]] = field(default_factory=dict, repr=False)
    discarded: int = 0
    empty_prompts: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.pool_tag not in POOL_TAGS:
            raise ValueError(f"unknown pool tag {self.pool_tag!r}")

    def __len__(self) -> int:
        return sum(len(v) for v in self.traces.values())

    def counts(self) -> dict[str, int]:
        return {pid: len(v) for pid, v in self.traces.items()}

    def stats(self) -> dict:
        return {
            "pool_tag": self.pool_tag,
            "source_epoch": self.source_epoch,
            "prompts": len(self.traces),
            "traces": len(self),
            "dedup_discarded": self.discarded,
            "empty_prompts": list(self.empty_prompts),
            "per_prompt": self.counts(),
        }

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for pid in sorted(self.traces):
                for t in self.traces[pid]:
                    fh.write(json.dumps(t.to_dict()) + "\n")


def sample_and_classify(
    generator: TextGenerator,
    items: Sequence[QaItem],
    K: int,
    tau: float,
    vocab: Vocab,
    run_seed: int,
    source: str,
    source_epoch: int = 0,
    max_len: int = 64,
    stats: Optional[SampleStats] = None,
) -> dict[str, list[Trace]]:
    """Draw K traces per item and label each against the gold answer.

    Traces whose generation overflowed, or whose text falls outside the
    vocabulary, are dropped and counted in ``stats``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    stats = stats if stats is not None else SampleStats()
    prompts, seeds, keys = [], [], []
    for item in items:
        text = render_prompt(item)
        for k in range(K):
            prompts.append(text)
            seeds.append(trace_seed(run_seed, source, source_epoch, item.prompt_id, k))
            keys.append((item, k))
    texts = generator.generate(prompts, seeds, tau, max_len)
    out: dict[str, list[Trace]] = {item.prompt_id: [] for item in items}
    stats.requested += len(keys)
    for (item, k), text in zip(keys, texts):
        if text is None:
            stats.dropped += 1
            continue
        try:
            tokens = tokenize(text, vocab)
        except UnknownSymbol:
            stats.dropped += 1
            continue
        parsed = parse_boxed_answer(text)
        polarity = POSITIVE if parsed == item.gold_label else NEGATIVE
        stats.positives += polarity == POSITIVE
        stats.negatives += polarity == NEGATIVE
        stats.unparseable += parsed is None
        out[item.prompt_id].append(Trace(item.prompt_id, tokens, text, parsed, polarity, source, source_epoch, k))
    return out


def pool_from_samples(
    samples: Mapping[str, Sequence[Trace]],
    pool_tag: str,
    polarity: str,
    rouge_threshold: float,
    K: int,
) -> TracePool:
    """Keep one polarity, dedup each prompt's list by ROUGE-L, cap at K."""
    traces: dict[str, list[Trace]] = {}
    raw: dict[str, list[Trace]] = {}
    discarded = 0
    empty = []
    epochs = set()
    for pid in sorted(samples):
        keep = sorted((t for t in samples[pid] if t.polarity == polarity), key=lambda t: t.sample_index)
        raw[pid] = keep
        epochs.update(t.source_epoch for t in keep)
        kept_idx = dedup_by_rouge([t.tokens for t in keep], rouge_threshold) if keep else []
        discarded += len(keep) - len(kept_idx)
        lst = [keep[i] for i in kept_idx][:K]
        if lst:
            traces[pid] = lst
        else:
            empty.append(pid)
    source_epoch = max(epochs) if epochs else 0
    return TracePool(pool_tag, traces, source_epoch, raw, discarded, empty)


def build_positive_pool(
    teacher: TextGenerator,
    items: Sequence[QaItem],
    K: int,
    tau: float,
    rouge_threshold: float,
    vocab: Vocab,
    run_seed: int,
    max_len: int = 64,
) -> TracePool:
    samples = sample_and_classify(teacher, items, K, tau, vocab, run_seed, TEACHER, 0, max_len)
    pool = pool_from_samples(samples, "teacher_pos", POSITIVE, rouge_threshold, K)
    if not pool.traces:
        raise EmptyPool("the teacher produced no positive trace for any prompt")
    return pool


def build_negative_pool(
    model: TextGenerator,
    pool_tag: str,
    items: Sequence[QaItem],
    K: int,
    tau: float,
    rouge_threshold: float,
    vocab: Vocab,
    run_seed: int,
    source_epoch: int = 0,
    max_len: int = 64,
) -> TracePool:
    """Negatives sampled from ``model``. Prompts without any negative are
    listed in ``empty_prompts`` and trained SFT-only downstream."""
    source = TEACHER if pool_tag == "teacher_neg" else STUDENT
    if source == TEACHER and source_epoch != 0:
        raise ValueError("teacher traces always come from epoch 0")
    samples = sample_and_classify(model, items, K, tau, vocab, run_seed, source, source_epoch, max_len)
    return pool_from_samples(samples, pool_tag, NEGATIVE, rouge_threshold, K)


def assemble_triples(
    pos: TracePool, neg: TracePool, rng: np.random.Generator, prompt_tokens: Mapping[str, Sequence[int]]
) -> list[PreferenceTriple]:
    """Pair every positive with a negative of the same prompt.

    Negatives are drawn uniformly without replacement while they last and with
    replacement when a prompt has fewer negatives than positives. Prompts
    with no negatives yield SFT-only records; prompts with no positives yield
    nothing.
    """
    out: list[PreferenceTriple] = []
    for pid in sorted(pos.traces):
        positives = pos.traces[pid]
        negatives = neg.traces.get(pid, [])
        ptoks = tuple(prompt_tokens[pid])
        if not negatives:
            out.extend(PreferenceTriple(pid, ptoks, c, None) for c in positives)
            continue
        replace = len(negatives) < len(positives)
        picks = rng.choice(len(negatives), size=len(positives), replace=replace)
        out.extend(PreferenceTriple(pid, ptoks, c, negatives[int(j)]) for c, j in zip(positives, picks))
    return out


def write_triples_jsonl(triples: Iterable[PreferenceTriple], path: str | Path) -> None:
    with open(path, "w") as fh:
        for t in triples:
            fh.write(json.dumps(t.to_dict()) + "\n")
