"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each case is run once per backend to warm up (numba compiles on first
call), then timed ``--repeat`` times; the best time is reported.  Outputs of
the two backends are compared so a speedup never hides a wrong answer.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from lqrformer import kernels, lti
from lqrformer.lqr import solve_dare


def cases(rng: np.random.Generator):
    sys = lti.get_entry("Six DOF Manipulator").build()
    K = solve_dare(sys).K
    X0 = rng.uniform(-1, 1, (50, sys.n_x))
    X, U = kernels.closed_loop_rollout(sys.A, sys.B, K, X0, 1250)
    H = rng.normal(size=(4096 * 13, 64))
    g, b = rng.normal(size=64), rng.normal(size=64)
    y, xhat, inv = kernels.layer_norm_forward(H, g, b, 1e-5)
    L = rng.normal(size=(4096 * 16, 13))
    Z = rng.normal(size=(4096, 256))
    return {
        "riccati (12x6 system)": lambda: kernels.riccati_iterate(sys.A, sys.B, sys.Q, sys.R, 1e-12, 100000)[0],
        "rollout 50 x 1250 steps": lambda: kernels.closed_loop_rollout(sys.A, sys.B, K, X0, 1250)[0],
        "quadratic cost": lambda: kernels.quadratic_cost(X, U, sys.Q, sys.R),
        "layer norm forward": lambda: kernels.layer_norm_forward(H, g, b, 1e-5)[0],
        "layer norm backward": lambda: kernels.layer_norm_backward(y, xhat, inv, g)[0],
        "softmax rows": lambda: kernels.softmax_rows(L),
        "gelu forward": lambda: kernels.gelu_forward(Z),
    }


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    backends = [b for b in kernels.BACKENDS if b != "numba" or kernels.numba_available()]
    if "numba" not in backends:
        print("numba unavailable; timing the numpy backend only")
    rows = []
    names = list(cases(np.random.default_rng(0)))
    for name in names:
        timing, outputs = {}, {}
        for backend in backends:
            with kernels.use_backend(backend):
                fn = cases(np.random.default_rng(0))[name]
                outputs[backend] = np.asarray(fn())
                timing[backend] = best_of(fn, args.repeat)
        row = {"kernel": name, **{f"{b}_ms": 1e3 * t for b, t in timing.items()}}
        if len(backends) == 2:
            a, b = outputs["numba"], outputs["numpy"]
            row["max_abs_diff"] = float(np.max(np.abs(a - b)))
            row["speedup"] = timing["numpy"] / timing["numba"]
        rows.append(row)

    print(f"{'kernel':28s}" + "".join(f"{b + ' ms':>12s}" for b in backends) + ("   speedup  max|diff|" if len(backends) == 2 else ""))
    for r in rows:
        line = f"{r['kernel']:28s}" + "".join(f"{r[b + '_ms']:12.3f}" for b in backends)
        if "speedup" in r:
            line += f"  {r['speedup']:7.2f}x  {r['max_abs_diff']:.1e}"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
