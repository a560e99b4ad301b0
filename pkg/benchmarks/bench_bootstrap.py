"""Time the compiled bootstrap kernel against the numpy fallback.

    python3 benchmarks/bench_bootstrap.py [--n 500] [--B 10000] [--repeat 3] [--unit image]

Both kernels see identical inputs; the script checks their outputs agree
bit-for-bit before reporting timings.
"""

import argparse
import json
import time

import numpy as np

from fundusfusion.evaluation import _kernels_py

try:
    from fundusfusion.evaluation import _kernels as compiled
except ImportError:  # extension not built
    compiled = None


def make_inputs(n: int, unit: str, seed: int = 0):
    rng = np.random.default_rng(seed)
    label = rng.integers(0, 2, n).astype(np.int64)
    score = np.round(np.clip(0.3 + 0.4 * label + rng.normal(0, 0.25, n), 0, 1), 3)
    pred = (score >= 0.5).astype(np.int64)
    uniq, group = np.unique(score, return_inverse=True)
    if unit == "patient":  # two images per patient
        rows = np.arange(n, dtype=np.int64)
        ptr = np.arange(0, n + 1, 2, dtype=np.int64)
        if ptr[-1] != n:
            ptr = np.append(ptr, n)
    else:
        rows = np.arange(n, dtype=np.int64)
        ptr = np.arange(n + 1, dtype=np.int64)
    return ptr, rows, label, pred, group.astype(np.int64), len(uniq)


def time_kernel(mod, B, args, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = mod.bootstrap_counts(0, 0, B, *args, True, 1000)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=500, help="prediction rows")
    ap.add_argument("--B", type=int, default=10_000, help="bootstrap iterations")
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--unit", choices=["image", "patient"], default="image")
    ap.add_argument("--json", action="store_true", help="print a JSON line instead of text")
    args = ap.parse_args(argv)

    inputs = make_inputs(args.n, args.unit)
    py_t, py_out = time_kernel(_kernels_py, args.B, inputs, args.repeat)
    result = {"n": args.n, "B": args.B, "unit": args.unit, "python_seconds": round(py_t, 4)}
    if compiled is not None:
        c_t, c_out = time_kernel(compiled, args.B, inputs, args.repeat)
        identical = all(np.array_equal(a, b) for a, b in zip(py_out, c_out))
        result.update(compiled_seconds=round(c_t, 4), speedup=round(py_t / c_t, 1),
                      identical=identical)
    else:
        result["compiled_seconds"] = None

    if args.json:
        print(json.dumps(result))
    else:
        print(f"n={args.n} B={args.B} unit={args.unit}")
        print(f"  numpy fallback : {py_t:8.3f} s")
        if compiled is None:
            print("  compiled kernel: not built")
        else:
            print(f"  compiled kernel: {result['compiled_seconds']:8.3f} s  "
                  f"({result['speedup']}x, outputs identical: {result['identical']})")
    return 0 if result.get("identical", True) else 1


if __name__ == "__main__":
    raise SystemExit(main())
