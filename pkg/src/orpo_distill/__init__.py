"""Black-box reasoning distillation with an odds-ratio preference objective.

Tiny character-level teacher and student LMs of different architecture
families, synthetic multiple-choice reasoning tasks, diverse trace sampling
with ROUGE-L deduplication, and a mixed-policy refresh of student negatives.
"""

from .harness import EvalReport, ExperimentResult, MatrixConfig, evaluate, render_table, run_matrix
from .orpo import OrpoTerms, orpo_loss, orpo_terms
from .prefdata import PreferenceTriple, TextGenerator, Trace, TracePool
from .taskgen import QaItem, TaskSpec, build_corpus, preset
from .textcore import TokenSeq, Vocab, dedup_by_rouge, parse_boxed_answer, rouge_l
from .tinylm import ArchDescriptor, Checkpoint, LmParams, init_params, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, distill, negative_diversity, sft_finetune

__version__ = "0.1.0"

__all__ = [
    "ArchDescriptor",
    "Checkpoint",
    "EvalReport",
    "ExperimentResult",
    "LmParams",
    "MatrixConfig",
    "OrpoTerms",
    "PreferenceTriple",
    "QaItem",
    "TaskSpec",
    "TextGenerator",
    "TokenSeq",
    "Trace",
    "TracePool",
    "TrainConfig",
    "Vocab",
    "build_corpus",
    "dedup_by_rouge",
    "distill",
    "evaluate",
    "init_params",
    "load_checkpoint",
    "negative_diversity",
    "orpo_loss",
    "orpo_terms",
    "parse_boxed_answer",
    "preset",
    "render_table",
    "rouge_l",
    "run_matrix",
    "save_checkpoint",
    "sft_finetune",
]
