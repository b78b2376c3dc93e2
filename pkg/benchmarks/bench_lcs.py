"""Compare the compiled and pure-Python LCS/ROUGE-L backends.

    python3 benchmarks/bench_lcs.py --pairs 2000 --max-len 60
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from orpo_distill import _lcs_py

try:
    from orpo_distill import _lcs
except ImportError:
    _lcs = None


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--max-len", type=int, default=60)
    ap.add_argument("--pool", type=int, default=16, help="traces per rouge_matrix call")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    pairs = [
        (tuple(rng.integers(0, 20, rng.integers(0, args.max_len + 1))), tuple(rng.integers(0, 20, rng.integers(0, args.max_len + 1))))
        for _ in range(args.pairs)
    ]
    pool = [tuple(rng.integers(0, 20, args.max_len)) for _ in range(args.pool)]

    backends = {"python": _lcs_py}
    if _lcs is not None:
        backends["cython"] = _lcs
    else:
        print("compiled extension not built; timing the fallback only")

    ref = [_lcs_py.lcs_length(a, b) for a, b in pairs]
    times = {}
    for name, mod in backends.items():
        assert [mod.lcs_length(a, b) for a, b in pairs] == ref, f"{name} disagrees with the fallback"
        t_pairs = min(timeit.repeat(lambda: [mod.lcs_length(a, b) for a, b in pairs], number=1, repeat=args.repeat))
        t_mat = min(timeit.repeat(lambda: mod.rouge_matrix(pool), number=1, repeat=args.repeat))
        times[name] = (t_pairs, t_mat)
        print(f"{name:7s} lcs_length x{args.pairs}: {t_pairs * 1e3:9.2f} ms   rouge_matrix {args.pool}x{args.pool}: {t_mat * 1e3:8.2f} ms")
    if len(times) == 2:
        sp = times["python"][0] / times["cython"][0]
        sm = times["python"][1] / times["cython"][1]
        print(f"speedup: lcs_length {sp:.1f}x, rouge_matrix {sm:.1f}x")


if __name__ == "__main__":
    main()
