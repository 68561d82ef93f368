"""Timing comparison of the numba and plain-numpy solver kernels.

The kernel backend is fixed at import time (``MATCHVALUE_NO_NUMBA``), so the
script re-executes itself in two subprocesses -- one per backend -- and prints
a side-by-side table.  Usage, from a checkout with the package installed:

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --sizes 100 400 800 --repeats 7

If numba is not installed both columns fall back to numpy and the speedup
column is meaningless; the backend names in the header tell you.
"""

import argparse
import json
import math
import os
import subprocess
import sys
import time


def _measure(sizes, repeats, seed):
    import numpy as np

    import matchvalue.kernels as kernels
    from matchvalue import solve_potentials

    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        phi = rng.uniform(-3.0, 3.0, size=(n, n))
        w = np.full(n, 1.0 / n)
        pots = solve_potentials(phi, w, tol=1e-10)
        inner = max(1, 20_000 // n)

        def timed(fn):
            fn()  # warm-up: JIT compile / page in
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                for _ in range(inner):
                    fn()
                best = min(best, (time.perf_counter() - t0) / inner)
            return best

        rows.append({
            "n": n,
            "logsumexp_pass": timed(lambda: kernels.logsumexp_pass(phi, pots.b, pots.a, w)),
            "log_density": timed(lambda: kernels.log_density(phi, pots.a, pots.b)),
            "solve_potentials": timed(lambda: solve_potentials(phi, w, tol=1e-10)),
        })
    return {"backend": kernels.backend(), "rows": rows}


def _collect(force_numpy, args):
    env = dict(os.environ)
    if force_numpy:
        env["MATCHVALUE_NO_NUMBA"] = "1"
    else:
        env.pop("MATCHVALUE_NO_NUMBA", None)
    cmd = [
        sys.executable, os.path.abspath(__file__), "--json",
        "--repeats", str(args.repeats), "--seed", str(args.seed),
        "--sizes", *map(str, args.sizes),
    ]
    out = subprocess.run(cmd, env=env, check=True, capture_output=True, text=True)
    return json.loads(out.stdout)


def _fmt(seconds):
    if seconds < 1e-3:
        return f"{seconds * 1e6:8.1f} us"
    if seconds < 1.0:
        return f"{seconds * 1e3:8.2f} ms"
    return f"{seconds:8.3f} s "


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[100, 300, 600])
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--json", action="store_true",
                        help="measure in-process and print JSON (internal)")
    args = parser.parse_args(argv)

    if args.json:
        print(json.dumps(_measure(args.sizes, args.repeats, args.seed)))
        return 0

    fast = _collect(force_numpy=False, args=args)
    slow = _collect(force_numpy=True, args=args)
    print(f"kernel timings, best of {args.repeats} (columns: "
          f"{fast['backend']} | {slow['backend']})")
    header = f"{'kernel':<18} {'n':>5} {'fast':>11} {'fallback':>11} {'speedup':>8}"
    print(header)
    print("-" * len(header))
    for rf, rs in zip(fast["rows"], slow["rows"]):
        for op in ("logsumexp_pass", "log_density", "solve_potentials"):
            ratio = rs[op] / rf[op]
            print(f"{op:<18} {rf['n']:>5} {_fmt(rf[op])} {_fmt(rs[op])} {ratio:>7.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
