"""Compare the compiled GRU recurrence kernels with the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeats 5] [--csv out.csv]

Each case times one forward and one backward pass over a time-major
sequence of ``T`` steps for ``N`` independent sequences of width ``d``, and
checks that both backends agree.
"""

import argparse
import csv
import sys
import time

import numpy as np

from gnmr import _gru_ref

try:
    from gnmr import _gru_kernels
except ImportError:
    _gru_kernels = None

# (label, N sequences, T steps, d hidden)
CASES = [
    ("tiny", 8, 20, 4),
    ("batch 32, 8 nodes, d=30", 256, 100, 30),
    ("batch 32, 8 nodes, d=60", 256, 100, 60),
    ("batch 32, 21 nodes, d=30", 672, 100, 30),
    ("flat baseline, d=60", 32, 100, 60),
]


def best_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def run_case(n, steps, d, repeats, rng):
    xw = rng.normal(scale=0.5, size=(steps, n, 3 * d))
    u = rng.normal(scale=1 / np.sqrt(d), size=(d, 3 * d))
    dh = rng.normal(size=(steps, n, d))
    h_ref, g_ref = _gru_ref.gru_forward(xw, u)
    da_ref = _gru_ref.gru_backward(dh, h_ref, g_ref, u)
    row = {
        "python_fwd": best_time(lambda: _gru_ref.gru_forward(xw, u), repeats),
        "python_bwd": best_time(lambda: _gru_ref.gru_backward(dh, h_ref, g_ref, u), repeats),
    }
    if _gru_kernels is not None:
        h, g = _gru_kernels.gru_forward(xw, u)
        da = _gru_kernels.gru_backward(dh, h, g, u)
        row["max_abs_diff"] = float(max(np.abs(h - h_ref).max(), np.abs(da - da_ref).max()))
        row["cython_fwd"] = best_time(lambda: _gru_kernels.gru_forward(xw, u), repeats)
        row["cython_bwd"] = best_time(lambda: _gru_kernels.gru_backward(dh, h, g, u), repeats)
    return row


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--csv", help="also write results to this CSV file")
    args = parser.parse_args(argv)
    if _gru_kernels is None:
        print("compiled kernels not built; timing the numpy fallback only", file=sys.stderr)

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'case':28s} {'N':>5s} {'T':>4s} {'d':>3s} {'py fwd':>9s} {'py bwd':>9s} {'cy fwd':>9s} {'cy bwd':>9s} {'speedup':>8s} {'max diff':>9s}")
    for label, n, steps, d in CASES:
        r = run_case(n, steps, d, args.repeats, rng)
        r.update(case=label, N=n, T=steps, d=d)
        rows.append(r)
        if "cython_fwd" in r:
            speedup = (r["python_fwd"] + r["python_bwd"]) / (r["cython_fwd"] + r["cython_bwd"])
            r["speedup"] = speedup
            tail = f"{r['cython_fwd'] * 1e3:8.2f}m {r['cython_bwd'] * 1e3:8.2f}m {speedup:7.2f}x {r['max_abs_diff']:9.1e}"
        else:
            tail = f"{'-':>9s} {'-':>9s} {'-':>8s} {'-':>9s}"
        print(f"{label:28s} {n:5d} {steps:4d} {d:3d} {r['python_fwd'] * 1e3:8.2f}m {r['python_bwd'] * 1e3:8.2f}m {tail}")

    if args.csv:
        keys = ["case", "N", "T", "d", "python_fwd", "python_bwd", "cython_fwd", "cython_bwd", "speedup", "max_abs_diff"]
        with open(args.csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore", lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)


if __name__ == "__main__":
    main()
