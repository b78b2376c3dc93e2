"""Backend selection for the LCS hot loops.

The compiled extension is used when it was built; otherwise the pure-Python
fallback is used. Setting ``ORPO_DISTILL_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import os

from . import _lcs_py

BACKEND = "python"
lcs_length = _lcs_py.lcs_length
rouge_matrix = _lcs_py.rouge_matrix

if os.environ.get("ORPO_DISTILL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _lcs  # type: ignore[attr-defined]
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        lcs_length = _lcs.lcs_length
        rouge_matrix = _lcs.rouge_matrix

__all__ = ["BACKEND", "lcs_length", "rouge_matrix"]
