"""Odds-ratio preference objective.

For a chosen response ``y_p`` and a rejected response ``y_n``::

    sft   = -log q(y_p | x)
    odds  = q / (1 - q)
    or    = -log sigmoid(log odds(y_p) - log odds(y_n))
    total = sft + lam * or

``q`` is the length-normalised likelihood ``exp(mean token log-prob)``; a raw
sequence probability underflows for anything but the shortest responses and
would make the odds indistinguishable from ``q`` itself.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .tinylm import LmParams, batch_response_logps

MEAN_LP_CEILING = -1e-12
_LN2 = math.log(2.0)


class DegenerateProbability(ValueError):
    """A response with probability exactly one has infinite odds."""


@dataclass(frozen=True)
class OrpoTerms:
    sft_loss: float
    or_loss: float
    total: float
    log_odds_chosen: float
    log_odds_rejected: float
    lam: float

    def to_dict(self) -> dict:
        return asdict(self)


def log1mexp(x: float) -> float:
    """log(1 - exp(x)) for x < 0 without cancellation."""
    if x > -_LN2:
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


def log_odds(mean_lp: float) -> float:
    if mean_lp > 0:
        raise ValueError(f"mean_lp must be a log-probability, got {mean_lp}")
    if mean_lp == 0:
        raise DegenerateProbability("probability 1 has infinite odds; clamp mean_lp first")
    return mean_lp - log1mexp(mean_lp)


def softplus(z: float) -> float:
    return max(z, 0.0) + math.log1p(math.exp(-abs(z)))


def or_loss(log_odds_chosen: float, log_odds_rejected: float) -> float:
    return softplus(-(log_odds_chosen - log_odds_rejected))


def sft_loss(mean_lp_chosen: float) -> float:
    if mean_lp_chosen > 0:
        raise ValueError("mean_lp_chosen must be <= 0")
    return -mean_lp_chosen


def orpo_terms(mean_lp_chosen: float, mean_lp_rejected: float, lam: float) -> OrpoTerms:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    lc = log_odds(min(mean_lp_chosen, MEAN_LP_CEILING))
    lr = log_odds(min(mean_lp_rejected, MEAN_LP_CEILING))
    sft = sft_loss(mean_lp_chosen)
    orl = or_loss(lc, lr)
    return OrpoTerms(sft, orl, sft + lam * orl, lc, lr, lam)


# --- differentiable counterparts --------------------------------------------


def log_odds_t(mean_lp: torch.Tensor) -> torch.Tensor:
    x = mean_lp.clamp(max=MEAN_LP_CEILING)
    # both branches are finite for x < 0, so torch.where leaves no NaN gradients
    near_zero = torch.log(-torch.expm1(x))
    far = torch.log1p(-torch.exp(x))
    return x - torch.where(x > -_LN2, near_zero, far)


def batch_terms(
    mean_lp_chosen: torch.Tensor,
    mean_lp_rejected: Optional[torch.Tensor],
    has_rejected: Optional[torch.Tensor],
    lam: float,
) -> dict[str, torch.Tensor]:
    """Per-record loss tensors. Records without a rejected response (or with
    ``lam == 0``) contribute the SFT term only."""
    sft = -mean_lp_chosen
    if lam == 0 or mean_lp_rejected is None:
        zero = torch.zeros_like(sft)
        return {"sft": sft, "or": zero, "total": sft, "log_odds_chosen": zero, "log_odds_rejected": zero}
    lc = log_odds_t(mean_lp_chosen)
    lr = log_odds_t(mean_lp_rejected)
    orl = F.softplus(-(lc - lr)) * has_rejected
    return {"sft": sft, "or": orl, "total": sft + lam * orl, "log_odds_chosen": lc, "log_odds_rejected": lr}


def batch_objective(
    arch,
    theta: torch.Tensor,
    prompts: Sequence[Sequence[int]],
    chosen: Sequence[Sequence[int]],
    rejected: Sequence[Optional[Sequence[int]]],
    lam: float,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Mean ORPO total over a batch, plus per-record terms.

    ``rejected[i] is None`` marks an SFT-only record. With ``lam == 0`` the
    rejected responses are never evaluated.
    """
    _, mean_c, _, _ = batch_response_logps(arch, theta, prompts, chosen)
    idx = [i for i, r in enumerate(rejected) if r is not None]
    if lam == 0 or not idx:
        terms = batch_terms(mean_c, None, None, lam)
        return terms["total"].mean(), terms
    _, mean_r_some, _, _ = batch_response_logps(arch, theta, [prompts[i] for i in idx], [rejected[i] for i in idx])
    # SFT-only rows get a placeholder log-prob; their odds term is masked out
    mean_r = torch.full_like(mean_c, math.log(0.5))
    mean_r = mean_r.index_put((torch.tensor(idx),), mean_r_some)
    has = torch.zeros_like(mean_c)
    has[idx] = 1.0
    terms = batch_terms(mean_c, mean_r, has, lam)
    return terms["total"].mean(), terms


def orpo_loss(triple, params: LmParams, lam: float, eos: Optional[int] = None) -> OrpoTerms:
    """ORPO terms of one preference triple under ``params``.

    When ``eos`` is given it is appended to both responses, which is how the
    trainer scores traces.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if triple.rejected is None:
        raise ValueError("triple has no rejected trace")
    tail = () if eos is None else (eos,)
    prompt = list(triple.prompt_tokens)
    chosen = list(triple.chosen.tokens.ids) + list(tail)
    rejected = list(triple.rejected.tokens.ids) + list(tail)
    theta = torch.from_numpy(params.theta.copy())
    with torch.no_grad():
        _, m, _, _ = batch_response_logps(params.arch, theta, [prompt, prompt], [chosen, rejected])
    return orpo_terms(float(m[0]), float(m[1]), lam)
