"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on identical inputs under both backends; the table reports
the best-of-repeat wall time and the max abs difference between outputs.
"""
import argparse
import json
import timeit

import numpy as np

from intglab import _pykernels

try:
    from intglab import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def cases(rng):
    x = rng.standard_normal((64, 128, 128))
    y = _pykernels.causal_softmax(x)
    gy = rng.standard_normal(y.shape)
    mats = [np.ascontiguousarray(rng.standard_normal((48, 48))) for _ in range(20)]
    return {
        "causal_softmax 64x128x128": lambda k: k.causal_softmax(x),
        "causal_softmax_backward 64x128x128": lambda k: k.causal_softmax_backward(y, gy),
        "jacobi_singular_values 20x(48x48)": lambda k: np.stack([k.jacobi_singular_values(m) for m in mats]),
    }


def bench(repeat: int, seed: int = 0) -> list[dict]:
    rng = np.random.Generator(np.random.Philox(seed))
    rows = []
    for name, fn in cases(rng).items():
        row = {"kernel": name,
               "python_s": min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=repeat))}
        if _ckernels is not None:
            row["cython_s"] = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=repeat))
            row["speedup"] = row["python_s"] / row["cython_s"]
            row["max_abs_diff"] = float(np.abs(np.asarray(fn(_ckernels)) - np.asarray(fn(_pykernels))).max())
        rows.append(row)
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the results to this file")
    args = ap.parse_args()
    rows = bench(args.repeat)
    if _ckernels is None:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'kernel':<38}{'python s':>10}{'cython s':>10}{'speedup':>9}{'max diff':>11}")
    for r in rows:
        if "cython_s" in r:
            print(f"{r['kernel']:<38}{r['python_s']:>10.4f}{r['cython_s']:>10.4f}"
                  f"{r['speedup']:>8.1f}x{r['max_abs_diff']:>11.1e}")
        else:
            print(f"{r['kernel']:<38}{r['python_s']:>10.4f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
