"""Time each hot kernel under the numba and numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

JIT compilation is excluded: every kernel runs once per backend before timing.
Reports the best-of-``repeat`` wall time and the max abs difference between
backends, which should sit at rounding level.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from dplab import _kernels
from dplab.data import default_synthetic_spec, population_second_moments
from dplab.models import balanced_init


def _cases(rng):
    G = rng.standard_normal((1024, 2000))
    delta = rng.standard_normal((512, 64))
    a = rng.standard_normal((512, 100))
    spec = default_synthetic_spec()
    Sigma, c = population_second_moments(spec)
    W1, W2 = balanced_init(16, spec.d, 0.1, 0)
    return {
        "row_norms (1024x2000)": lambda: _kernels.row_norms(G),
        "clip_rows (1024x2000)": lambda: _kernels.clip_rows(G, 1.0)[0],
        "ratio_terms (1024x2000)": lambda: np.array(_kernels.ratio_terms(G)),
        "outer_rows (512, 64x100)": lambda: _kernels.outer_rows(delta, a),
        "flow_run (default spec, 2000 steps)": lambda: _kernels.flow_run(
            W1, W2, Sigma, c, 1.0, spec.d_s, 1e-2, 2000, 0.0)[0],
    }


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results to this file")
    args = ap.parse_args(argv)

    cases = _cases(np.random.default_rng(0))
    results = []
    previous = _kernels.get_backend()
    try:
        for name, fn in cases.items():
            row = {"kernel": name}
            outputs = {}
            for backend in _kernels.BACKENDS:
                _kernels.set_backend(backend)
                outputs[backend] = np.asarray(fn())  # warm-up / compile
                row[backend] = _best(fn, args.repeat)
            if len(outputs) == 2:
                row["max_abs_diff"] = float(np.max(np.abs(outputs["numba"] - outputs["numpy"])))
                row["speedup"] = row["numpy"] / row["numba"]
            results.append(row)
    finally:
        _kernels.set_backend(previous)

    print(f"{'kernel':40s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for r in results:
        nb = r.get("numba", float("nan")) * 1e3
        print(f"{r['kernel']:40s} {nb:10.3f} {r['numpy'] * 1e3:10.3f} "
              f"{r.get('speedup', float('nan')):8.2f} {r.get('max_abs_diff', float('nan')):10.2e}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
