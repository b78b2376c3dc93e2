"""Pure-Python fallback for the compiled LCS kernels in ``_lcs.pyx``."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def lcs_length(a: Sequence[int], b: Sequence[int]) -> int:
    a = [int(x) for x in a]
    b = [int(x) for x in b]
    row = [0] * (len(b) + 1)
    for ai in a:
        prev = 0
        for j, bj in enumerate(b):
            tmp = row[j + 1]
            if ai == bj:
                row[j + 1] = prev + 1
            elif row[j] > row[j + 1]:
                row[j + 1] = row[j]
            prev = tmp
    return row[-1]


def rouge_matrix(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    n = len(seqs)
    out = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        la = len(seqs[i])
        if la:
            out[i, i] = 1.0
        for j in range(i + 1, n):
            lb = len(seqs[j])
            if not la or not lb:
                continue
            L = lcs_length(seqs[i], seqs[j])
            if L:
                prec, rec = L / la, L / lb
                out[i, j] = out[j, i] = 2.0 * prec * rec / (prec + rec)
    return out
