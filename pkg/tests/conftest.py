from __future__ import annotations

import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from orpo_distill.taskgen import TaskSpec, build_corpus  # noqa: E402
from orpo_distill.textcore import Vocab  # noqa: E402
from orpo_distill.tinylm import ArchDescriptor, init_params  # noqa: E402


@pytest.fixture(scope="session")
def vocab():
    return Vocab.from_chars()


@pytest.fixture(scope="session")
def small_corpus():
    return build_corpus(TaskSpec("compare", chain_len=4, operand_range=6, n_train=12, n_eval=16, n_teacher=8, n_student=8))


def tiny_arch(vocab, family="attn", **kw):
    kw = {"d_model": 8, "d_hidden": 16, "n_layers": 1, "context_len": 96, "n_heads": 2, **kw}
    return ArchDescriptor(family, len(vocab), **kw)


@pytest.fixture(params=["attn", "conv-gated"])
def family(request):
    return request.param


@pytest.fixture
def tiny_params(vocab, family):
    return init_params(tiny_arch(vocab, family), seed=3)
