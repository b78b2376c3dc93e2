"""Tiny autoregressive language models over a flat float64 parameter vector.

Two structurally different families share one interface:

``attn``
    Pre-LayerNorm causal multi-head self-attention with MLP blocks.
``conv-gated``
    Attention-free. A short causal convolution produces query, gated key
    and value streams; each head keeps an exponentially decaying sum of
    key-value outer products that the query reads out. The decay rate is one
    learned scalar per head, so decoding carries a fixed-size state rather
    than a cache that grows with the sequence.

Parameters live in one contiguous ``theta`` vector; ``layout`` maps names to
slices. Gradients come from torch autograd on that vector and are checked
against central finite differences in :func:`finite_diff_check`.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .textcore import TokenSeq

FAMILIES = ("attn", "conv-gated")
DTYPE = torch.float64


class ContextOverflow(ValueError):
    pass


class EmptyResponse(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


class ShapeMismatch(ValueError):
    pass


class CheckpointError(Exception):
    pass


class IoError(CheckpointError, OSError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptFile(CheckpointError):
    pass


@dataclass(frozen=True)
class ArchDescriptor:
    family: str
    vocab_size: int
    d_model: int = 32
    d_hidden: int = 64
    n_layers: int = 2
    context_len: int = 128
    n_heads: int = 2
    kernel: int = 3

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if min(self.vocab_size, self.d_model, self.d_hidden, self.n_layers, self.context_len, self.n_heads, self.kernel) < 1:
            raise ValueError("architecture sizes must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)


def layout(arch: ArchDescriptor) -> dict[str, tuple[int, tuple[int, ...]]]:
    d, h, V, C = arch.d_model, arch.d_hidden, arch.vocab_size, arch.context_len
    shapes: list[tuple[str, tuple[int, ...]]] = [("tok", (V, d)), ("pos", (C, d))]
    for l in range(arch.n_layers):
        p = f"l{l}."
        shapes += [(p + "ln1.g", (d,)), (p + "ln1.b", (d,))]
        if arch.family == "attn":
            shapes += [(p + "wqkv", (d, 3 * d)), (p + "bqkv", (3 * d,))]
        else:
            shapes += [
                (p + "wconv", (arch.kernel * d, 3 * d)),
                (p + "bconv", (3 * d,)),
                (p + "decay", (arch.n_heads,)),
            ]
        shapes += [
            (p + "wo", (d, d)),
            (p + "bo", (d,)),
            (p + "ln2.g", (d,)),
            (p + "ln2.b", (d,)),
            (p + "w1", (d, h)),
            (p + "b1", (h,)),
            (p + "w2", (h, d)),
            (p + "b2", (d,)),
        ]
    shapes += [("lnf.g", (d,)), ("lnf.b", (d,)), ("head", (d, V)), ("head.b", (V,))]
    out, off = {}, 0
    for name, shape in shapes:
        out[name] = (off, shape)
        off += math.prod(shape)
    return out


def n_params(arch: ArchDescriptor) -> int:
    return sum(math.prod(s) for _, s in layout(arch).values())


@dataclass(frozen=True, eq=False)
class LmParams:
    arch: ArchDescriptor
    theta: np.ndarray

    def __post_init__(self):
        theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if theta.ndim != 1 or theta.size != n_params(self.arch):
            raise ShapeMismatch(f"theta has {theta.size} entries, layout needs {n_params(self.arch)}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("theta contains non-finite values")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def layout(self):
        return layout(self.arch)

    def with_theta(self, theta: np.ndarray) -> "LmParams":
        return LmParams(self.arch, theta)

    def digest(self) -> str:
        return hashlib.sha256(self.theta.tobytes()).hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, LmParams):
            return NotImplemented
        return self.arch == other.arch and self.theta.tobytes() == other.theta.tobytes()


def init_params(arch: ArchDescriptor, seed: int, zero_head: bool = False) -> LmParams:
    rng = np.random.default_rng([seed, 0x1A])
    theta = np.zeros(n_params(arch))
    depth_scale = 1.0 / math.sqrt(2 * arch.n_layers)
    for name, (off, shape) in layout(arch).items():
        n = math.prod(shape)
        leaf = name.split(".", 1)[-1] if name.startswith("l") and name[1].isdigit() else name
        if leaf in ("ln1.g", "ln2.g", "lnf.g"):
            vals = np.ones(n)
        elif leaf in ("tok", "pos"):
            vals = rng.normal(0.0, 0.3, n)
        elif leaf == "decay":
            # per-head time constants spread from ~8 to ~256 steps
            lam = np.exp(-1.0 / np.geomspace(8, 256, n))
            vals = np.log(lam / (1.0 - lam))
        elif len(shape) == 2:
            std = 1.0 / math.sqrt(shape[0])
            if leaf in ("wo", "w2"):
                std *= depth_scale
            if name == "head" and zero_head:
                std = 0.0
            vals = rng.normal(0.0, std, n)
        else:
            vals = np.zeros(n)
        theta[off : off + n] = vals
    return LmParams(arch, theta)


def _unpack(arch: ArchDescriptor, theta: torch.Tensor) -> dict[str, torch.Tensor]:
    return {name: theta[off : off + math.prod(shape)].view(shape) for name, (off, shape) in layout(arch).items()}


def _causal_mask(T: int) -> torch.Tensor:
    return torch.ones(T, T, dtype=torch.bool).tril()


def _attn_block(p, pre, x, arch, cache=None):
    B, T, d = x.shape
    H = arch.n_heads
    h = F.layer_norm(x, (d,), p[pre + "ln1.g"], p[pre + "ln1.b"])
    q, k, v = (h @ p[pre + "wqkv"] + p[pre + "bqkv"]).split(d, dim=-1)
    q = q.view(B, T, H, d // H).transpose(1, 2)
    k = k.view(B, T, H, d // H).transpose(1, 2)
    v = v.view(B, T, H, d // H).transpose(1, 2)
    if cache is not None:
        cache[pre] = (k, v)
    att = (q @ k.transpose(-1, -2)) / math.sqrt(d // H)
    att = att.masked_fill(~_causal_mask(T), float("-inf")).softmax(-1)
    o = (att @ v).transpose(1, 2).reshape(B, T, d)
    return x + o @ p[pre + "wo"] + p[pre + "bo"]


def _attn_step(p, pre, x, arch, cache):
    B, d = x.shape
    H = arch.n_heads
    h = F.layer_norm(x, (d,), p[pre + "ln1.g"], p[pre + "ln1.b"])
    q, k, v = (h @ p[pre + "wqkv"] + p[pre + "bqkv"]).split(d, dim=-1)
    k_all, v_all = cache[pre]
    k_all = torch.cat([k_all, k.view(B, H, 1, d // H)], dim=2)
    v_all = torch.cat([v_all, v.view(B, H, 1, d // H)], dim=2)
    cache[pre] = (k_all, v_all)
    att = (q.view(B, H, 1, d // H) @ k_all.transpose(-1, -2)) / math.sqrt(d // H)
    o = (att.softmax(-1) @ v_all).reshape(B, d)
    return x + o @ p[pre + "wo"] + p[pre + "bo"]


def _conv_qkv(p, pre, taps, arch):
    q, k, v = (torch.cat(taps, -1) @ p[pre + "wconv"] + p[pre + "bconv"]).split(arch.d_model, dim=-1)
    return q, torch.sigmoid(k), v


def _conv_block(p, pre, x, arch, cache=None):
    B, T, d = x.shape
    H, dh = arch.n_heads, d // arch.n_heads
    h = F.layer_norm(x, (d,), p[pre + "ln1.g"], p[pre + "ln1.b"])
    taps = [h] + [F.pad(h, (0, 0, s, 0))[:, :T] for s in range(1, arch.kernel)]
    q, k, v = _conv_qkv(p, pre, taps, arch)
    q = q.view(B, T, H, dh).transpose(1, 2)
    k = k.view(B, T, H, dh).transpose(1, 2)
    v = v.view(B, T, H, dh).transpose(1, 2)
    log_lam = F.logsigmoid(p[pre + "decay"])  # (H,)
    t = torch.arange(T, dtype=DTYPE)
    lag = t[:, None] - t[None, :]
    kern = torch.exp(log_lam[:, None, None] * lag.clamp(min=0)) * (lag >= 0)  # (H,T,T)
    # sum_s lam^(t-s) (q_t . k_s) v_s, i.e. a decayed outer-product state read by q
    y = ((q @ k.transpose(-1, -2)) * kern) @ v / dh
    if cache is not None:
        w = torch.exp(log_lam[:, None] * (T - 1 - t)[None, :])  # (H,T)
        state = torch.einsum("bhsk,bhsv,hs->bhkv", k, v, w)
        hist = F.pad(h, (0, 0, arch.kernel - 1, 0))[:, T:] if arch.kernel > 1 else h[:, :0]
        cache[pre] = (hist, state)
    y = y.transpose(1, 2).reshape(B, T, d)
    return x + y @ p[pre + "wo"] + p[pre + "bo"]


def _conv_step(p, pre, x, arch, cache):
    B, d = x.shape
    H, dh = arch.n_heads, d // arch.n_heads
    h = F.layer_norm(x, (d,), p[pre + "ln1.g"], p[pre + "ln1.b"])
    hist, state = cache[pre]
    taps = [h] + [hist[:, -s] for s in range(1, arch.kernel)]
    q, k, v = _conv_qkv(p, pre, taps, arch)
    lam = torch.exp(F.logsigmoid(p[pre + "decay"]))
    state = lam[None, :, None, None] * state + k.view(B, H, dh, 1) * v.view(B, H, 1, dh)
    if arch.kernel > 1:
        hist = torch.cat([hist[:, 1:], h[:, None]], dim=1)
    cache[pre] = (hist, state)
    y = (q.view(B, H, 1, dh) @ state).reshape(B, d) / dh
    return x + y @ p[pre + "wo"] + p[pre + "bo"]


def _mlp(p, pre, x, d):
    h = F.layer_norm(x, (d,), p[pre + "ln2.g"], p[pre + "ln2.b"])
    return x + F.gelu(h @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]


def logits_batch(
    arch: ArchDescriptor, theta: torch.Tensor, ids: torch.Tensor, cache: Optional[dict] = None
) -> torch.Tensor:
    """Next-token logits ``[B, T, V]`` for a right-padded id matrix ``[B, T]``.

    Passing a ``cache`` dict fills it with the per-layer decoding state needed
    by :func:`_decode_step` to continue after the last position.
    """
    B, T = ids.shape
    if T > arch.context_len:
        raise ContextOverflow(f"sequence length {T} exceeds context {arch.context_len}")
    p = _unpack(arch, theta)
    x = p["tok"][ids] + p["pos"][:T]
    block = _attn_block if arch.family == "attn" else _conv_block
    for l in range(arch.n_layers):
        pre = f"l{l}."
        x = _mlp(p, pre, block(p, pre, x, arch, cache), arch.d_model)
    x = F.layer_norm(x, (arch.d_model,), p["lnf.g"], p["lnf.b"])
    return x @ p["head"] + p["head.b"]


def _decode_step(arch, p, tokens: torch.Tensor, pos: int, cache: dict) -> torch.Tensor:
    x = p["tok"][tokens] + p["pos"][pos]
    step = _attn_step if arch.family == "attn" else _conv_step
    for l in range(arch.n_layers):
        pre = f"l{l}."
        x = _mlp(p, pre, step(p, pre, x, arch, cache), arch.d_model)
    x = F.layer_norm(x, (arch.d_model,), p["lnf.g"], p["lnf.b"])
    return x @ p["head"] + p["head.b"]


def _select_cache(cache: dict, keep: torch.Tensor) -> dict:
    return {k: tuple(t[keep] for t in v) for k, v in cache.items()}


def _theta_tensor(params: LmParams) -> torch.Tensor:
    return torch.from_numpy(params.theta.copy())


def forward_logits(params: LmParams, context: TokenSeq | Sequence[int]) -> np.ndarray:
    ids = list(context)
    if not ids:
        raise ValueError("context must be nonempty")
    if len(ids) > params.arch.context_len:
        raise ContextOverflow(f"context length {len(ids)} exceeds {params.arch.context_len}")
    with torch.no_grad():
        out = logits_batch(params.arch, _theta_tensor(params), torch.tensor([ids]))
    return out[0, -1].numpy().copy()


def _pack(seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    T = max(len(s) for s in seqs)
    # right padding with id 0; causal models never look rightwards
    out = torch.zeros(len(seqs), T, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
    return out


def batch_response_logps(
    arch: ArchDescriptor,
    theta: torch.Tensor,
    prompts: Sequence[Sequence[int]],
    responses: Sequence[Sequence[int]],
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Teacher-forced log-probs of each response given its prompt.

    Returns ``(sum_lp[B], mean_lp[B], per_token[B, T], mask[B, T])``; only
    response positions contribute.
    """
    seqs, starts, ends = [], [], []
    for pr, rs in zip(prompts, responses):
        pr, rs = list(pr), list(rs)
        if not rs:
            raise EmptyResponse("response must be nonempty")
        if not pr:
            raise ValueError("prompt must be nonempty")
        if len(pr) + len(rs) > arch.context_len:
            raise ContextOverflow(f"prompt+response length {len(pr) + len(rs)} exceeds {arch.context_len}")
        seqs.append(pr + rs)
        starts.append(len(pr) - 1)
        ends.append(len(pr) + len(rs) - 1)
    ids = _pack(seqs)
    inputs, targets = ids[:, :-1], ids[:, 1:]
    logp = logits_batch(arch, theta, inputs).log_softmax(-1)
    tok_lp = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    pos = torch.arange(inputs.shape[1])
    mask = (pos[None, :] >= torch.tensor(starts)[:, None]) & (pos[None, :] < torch.tensor(ends)[:, None])
    tok_lp = tok_lp * mask
    sum_lp = tok_lp.sum(-1)
    mean_lp = sum_lp / mask.sum(-1)
    return sum_lp, mean_lp, tok_lp, mask


def response_log_probs(
    params: LmParams, prompt: TokenSeq | Sequence[int], response: TokenSeq | Sequence[int]
) -> tuple[float, float, list[float]]:
    with torch.no_grad():
        s, m, tok, mask = batch_response_logps(params.arch, _theta_tensor(params), [list(prompt)], [list(response)])
    per_token = tok[0][mask[0]].tolist()
    return float(s[0]), float(m[0]), per_token


# --- decoding ---------------------------------------------------------------


def generate(
    params: LmParams,
    prompts: Sequence[Sequence[int]],
    max_len: int,
    eos: int,
    tau: Optional[float] = None,
    rngs: Optional[Sequence[np.random.Generator]] = None,
) -> list[Optional[TokenSeq]]:
    """Batched incremental decoding. ``tau=None`` means greedy, ties going to
    the lowest id.

    Each sequence draws one uniform from its own generator per step, so its
    output does not depend on what else is in the batch. Returned sequences
    exclude the EOS; an entry is None when decoding ran past the context.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if tau is not None and tau <= 0:
        raise ValueError("tau must be > 0")
    if tau is not None and (rngs is None or len(rngs) != len(prompts)):
        raise ValueError("sampling needs one rng per prompt")
    results: list[Optional[TokenSeq]] = [None] * len(prompts)
    buckets: dict[int, list[int]] = {}
    for i, pr in enumerate(prompts):
        if not len(pr):
            raise ValueError("prompt must be nonempty")
        if len(pr) <= params.arch.context_len:
            buckets.setdefault(len(pr), []).append(i)
    theta = _theta_tensor(params)
    with torch.no_grad():
        for length in sorted(buckets):
            idx = buckets[length]
            outs = _generate_bucket(
                params.arch, theta, [list(prompts[i]) for i in idx], max_len, eos, tau,
                None if rngs is None else [rngs[i] for i in idx],
            )
            for i, out in zip(idx, outs):
                results[i] = out
    return results


def _pick(step: np.ndarray, tau, rngs, rows) -> list[int]:
    if tau is None:
        return [int(t) for t in step.argmax(-1)]
    z = step / tau
    z = z - z.max(-1, keepdims=True)
    cdf = np.cumsum(np.exp(z), -1)
    picks = []
    for r, i in enumerate(rows):
        u = rngs[i].random() * cdf[r, -1]
        picks.append(min(int(np.searchsorted(cdf[r], u, side="right")), step.shape[-1] - 1))
    return picks


def _generate_bucket(arch, theta, prompts, max_len, eos, tau, rngs):
    p = _unpack(arch, theta)
    T = len(prompts[0])
    cache: dict = {}
    logits = logits_batch(arch, theta, torch.tensor(prompts), cache)[:, -1]
    rows = list(range(len(prompts)))
    outs: list[list[int]] = [[] for _ in prompts]
    finished: list[Optional[bool]] = [None] * len(prompts)  # True ok, False overflow
    pos = T
    while True:
        picks = _pick(logits.numpy(), tau, rngs, rows)
        keep, keep_tokens = [], []
        for r, (i, tok) in enumerate(zip(rows, picks)):
            if tok == eos:
                finished[i] = True
                continue
            outs[i].append(tok)
            if len(outs[i]) >= max_len:
                finished[i] = True
            elif pos + 1 >= arch.context_len:
                finished[i] = False
            else:
                keep.append(r)
                keep_tokens.append(tok)
        if not keep:
            break
        if len(keep) < len(rows):
            cache = _select_cache(cache, torch.tensor(keep))
            rows = [rows[r] for r in keep]
        logits = _decode_step(arch, p, torch.tensor(keep_tokens), pos, cache)
        pos += 1
    return [TokenSeq(tuple(o)) if finished[i] else None for i, o in enumerate(outs)]


def sample(
    params: LmParams,
    prompt: TokenSeq | Sequence[int],
    tau: float,
    max_len: int,
    rng: np.random.Generator,
    eos: int,
) -> TokenSeq:
    (out,) = generate(params, [list(prompt)], max_len, eos, tau=tau, rngs=[rng])
    if out is None:
        raise ContextOverflow("generation ran past the context length")
    return out


def greedy_decode(params: LmParams, prompt: TokenSeq | Sequence[int], max_len: int, eos: int) -> TokenSeq:
    (out,) = generate(params, [list(prompt)], max_len, eos)
    if out is None:
        raise ContextOverflow("generation ran past the context length")
    return out


# --- gradients and optimisation ---------------------------------------------

LossFn = Callable[[torch.Tensor], torch.Tensor]


def grad(loss: LossFn, params: LmParams) -> np.ndarray:
    """dLoss/dtheta by reverse-mode autodiff. ``loss`` maps theta to a scalar."""
    theta = _theta_tensor(params).requires_grad_(True)
    value = loss(theta)
    if not torch.isfinite(value):
        raise NonFiniteLoss(f"loss evaluated to {float(value.detach())}")
    if not value.requires_grad:
        return np.zeros_like(params.theta)
    (g,) = torch.autograd.grad(value, theta, allow_unused=True)
    if g is None:
        return np.zeros_like(params.theta)
    g = g.numpy().copy()
    if not np.all(np.isfinite(g)):
        raise NonFiniteLoss("gradient has non-finite entries")
    return g


def value_and_grad(loss: Callable[[torch.Tensor], tuple[torch.Tensor, dict]], params: LmParams):
    theta = _theta_tensor(params).requires_grad_(True)
    value, aux = loss(theta)
    if not torch.isfinite(value):
        raise NonFiniteLoss(f"loss evaluated to {float(value.detach())}")
    (g,) = torch.autograd.grad(value, theta)
    return float(value.detach()), g.numpy().copy(), aux


def finite_diff_check(
    loss: LossFn,
    params: LmParams,
    eps: float,
    coords: Sequence[int],
    analytic: Optional[np.ndarray] = None,
) -> float:
    """Max relative error between ``grad`` and central differences on ``coords``."""
    if eps <= 0:
        raise ValueError("eps must be > 0")
    if analytic is None:
        analytic = grad(loss, params)
    base = params.theta.copy()
    worst = 0.0
    with torch.no_grad():
        for i in coords:
            plus, minus = base.copy(), base.copy()
            plus[i] += eps
            minus[i] -= eps
            fd = (float(loss(torch.from_numpy(plus))) - float(loss(torch.from_numpy(minus)))) / (2 * eps)
            a = float(analytic[i])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **kw)


def optimizer_step(
    params: LmParams, grads: np.ndarray, state: AdamState, eta: float
) -> tuple[LmParams, AdamState]:
    """One bias-corrected adaptive-moment step. Returns new params and state."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.theta.shape or state.m.shape != params.theta.shape:
        raise ShapeMismatch("gradient/state shape does not match theta")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grads
    v = state.beta2 * state.v + (1 - state.beta2) * grads * grads
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    theta = params.theta - eta * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.beta1, state.beta2, state.eps)
    return params.with_theta(theta), new_state


# --- checkpoints ------------------------------------------------------------

MAGIC = b"ODLM"
FORMAT_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    params: LmParams
    epoch: int = 0
    rng_state: Optional[dict] = None
    metadata: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.params == other.params
            and self.epoch == other.epoch
            and self.rng_state == other.rng_state
            and self.metadata == other.metadata
        )


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def checkpoint_bytes(ckpt: Checkpoint, version: int = FORMAT_VERSION) -> bytes:
    header = json.dumps(
        {
            "arch": ckpt.params.arch.to_dict(),
            "epoch": ckpt.epoch,
            "layout": {k: [off, list(shape)] for k, (off, shape) in ckpt.params.layout.items()},
            "rng_state": ckpt.rng_state,
            "metadata": ckpt.metadata,
        },
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", version))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(ckpt.params.theta.astype("<f8").tobytes())
    body = buf.getvalue()
    return body + _checksum(body)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    data = checkpoint_bytes(ckpt)
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoError(str(exc)) from exc


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return parse_checkpoint(data)


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 20 or data[:4] != MAGIC:
        raise CorruptFile("missing ODLM magic")
    body, tail = data[:-8], data[-8:]
    if _checksum(body) != tail:
        raise CorruptFile("checksum mismatch")
    (version,) = struct.unpack("<I", body[4:8])
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"file format {version}, reader supports {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<I", body[8:12])
    header = json.loads(body[12 : 12 + hlen])
    arch = ArchDescriptor(**header["arch"])
    theta = np.frombuffer(body[12 + hlen :], dtype="<f8").astype(np.float64)
    return Checkpoint(LmParams(arch, theta), header["epoch"], header["rng_state"], header["metadata"])
