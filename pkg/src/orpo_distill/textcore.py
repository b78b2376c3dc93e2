"""Character vocabulary, tokenization, boxed-answer parsing and ROUGE-L."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from . import kernels

BOS, EOS, PAD = "<bos>", "<eos>", "<pad>"

# Every character the prompt templates and reasoning traces can contain.
DEFAULT_CHARS = (
    "0123456789"
    "ABCD"
    "abcdefghijklmnopqrstuvwxyz"
    " +-*%()=<>,.:;?{}\n"
)


class UnknownSymbol(ValueError):
    def __init__(self, position: int, char: str):
        super().__init__(f"unknown symbol {char!r} at position {position}")
        self.position = position
        self.char = char


@dataclass(frozen=True)
class Vocab:
    """Bijective symbol/id map. Special atoms sit after the plain characters."""

    symbols: tuple[str, ...]
    bos: int
    eos: int
    pad: int
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("vocabulary symbols must be distinct")
        specials = {self.bos, self.eos, self.pad}
        if len(specials) != 3 or not all(0 <= i < len(self.symbols) for i in specials):
            raise ValueError("bos/eos/pad must be distinct in-range ids")
        object.__setattr__(self, "_index", {s: i for i, s in enumerate(self.symbols)})

    @classmethod
    def from_chars(cls, chars: str = DEFAULT_CHARS) -> "Vocab":
        symbols = tuple(dict.fromkeys(chars)) + (BOS, EOS, PAD)
        n = len(symbols)
        return cls(symbols, bos=n - 3, eos=n - 2, pad=n - 1)

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def tag(self) -> str:
        return hashlib.sha1("\x00".join(self.symbols).encode()).hexdigest()[:12]

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.bos, self.eos, self.pad))

    def id_of(self, symbol: str) -> int:
        return self._index[symbol]

    def to_json(self) -> str:
        return json.dumps(
            {"symbols": list(self.symbols), "bos": self.bos, "eos": self.eos, "pad": self.pad}
        )

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        d = json.loads(text)
        return cls(tuple(d["symbols"]), bos=d["bos"], eos=d["eos"], pad=d["pad"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple[int, ...]
    vocab_tag: str = ""

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __add__(self, other: "TokenSeq") -> "TokenSeq":
        return TokenSeq(self.ids + tuple(other.ids), self.vocab_tag or other.vocab_tag)


def tokenize(text: str, vocab: Vocab) -> TokenSeq:
    """Map each character to its id. No BOS/EOS framing is added."""
    ids = []
    specials = vocab.special_ids
    for pos, ch in enumerate(text):
        i = vocab._index.get(ch)
        if i is None or i in specials:
            raise UnknownSymbol(pos, ch)
        ids.append(i)
    return TokenSeq(tuple(ids), vocab.tag)


def detokenize(seq: TokenSeq | Sequence[int], vocab: Vocab) -> str:
    ids = seq.ids if isinstance(seq, TokenSeq) else seq
    out = []
    for i in ids:
        if i in vocab.special_ids:
            raise ValueError(f"special id {i} has no text form")
        out.append(vocab.symbols[i])
    return "".join(out)


def frame_prompt(text: str, vocab: Vocab) -> TokenSeq:
    """Tokenized prompt with a leading BOS, as fed to the language models."""
    seq = tokenize(text, vocab)
    return TokenSeq((vocab.bos,) + seq.ids, seq.vocab_tag)


_BOXED = re.compile(r"boxed\{([^{}]*)\}")


def parse_boxed_answer(text: str) -> Optional[str]:
    """Label inside the last well-formed ``boxed{...}`` group, or None."""
    label = None
    for m in _BOXED.finditer(text):
        inner = m.group(1).strip()
        if inner:
            label = inner
    return label


def rouge_l(a: TokenSeq | Sequence[int], b: TokenSeq | Sequence[int]) -> float:
    """Token-level ROUGE-L F1 between two sequences."""
    a = a.ids if isinstance(a, TokenSeq) else a
    b = b.ids if isinstance(b, TokenSeq) else b
    if not a or not b:
        return 0.0
    lcs = kernels.lcs_length(a, b)
    if lcs == 0:
        return 0.0
    prec, rec = lcs / len(a), lcs / len(b)
    return 2.0 * prec * rec / (prec + rec)


def rouge_matrix(seqs: Iterable[TokenSeq | Sequence[int]]):
    return kernels.rouge_matrix([s.ids if isinstance(s, TokenSeq) else s for s in seqs])


def dedup_by_rouge(traces: Sequence[TokenSeq | Sequence[int]], threshold: float) -> list[int]:
    """Greedy keep-first dedup: trace i survives iff its ROUGE-L to every
    previously kept trace is at most ``threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    if not traces:
        return []
    scores = rouge_matrix(traces)
    kept: list[int] = []
    for i in range(len(traces)):
        if all(scores[i, j] <= threshold for j in kept):
            kept.append(i)
    return kept
