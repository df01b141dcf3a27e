"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--n 100000] [--m 1000000] [--repeat 3]

Each algorithm runs on an in-memory graph with each available backend; the
outputs must match byte for byte and the best wall time is reported.
"""
import argparse
import sys
import time

import numpy as np

from dpufam.graphbench import algorithms, csr, kernels
from dpufam.nodes import digest


def best_of(fn, repeat):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=100_000)
    ap.add_argument("--m", type=int, default=1_000_000)
    ap.add_argument("--generator", default="rmat", choices=("uniform", "rmat"))
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    g = csr.generate(args.generator, args.n, args.m, seed=1)
    backends = sorted(kernels.BACKENDS)
    # start traversals at the hub so they cover most of the graph
    source = int(np.argmax(np.diff(g.arrays()[0])))
    print(f"graph: {args.generator} n={g.n} m={g.m} source={source}; "
          f"backends: {', '.join(backends)}")
    if "compiled" not in backends:
        print("compiled extension not built; only the fallback is timed")
    header = f"{'algorithm':10s}" + "".join(f"{b:>12s}" for b in backends) + f"{'speedup':>10s}"
    print(header)
    mismatch = False
    for name in algorithms.ALGORITHMS:
        times, digests = {}, set()
        for b in backends:
            t, out = best_of(lambda: algorithms.run(name, g, source=source, threads=args.threads,
                                                    backend=b), args.repeat)
            times[b] = t
            digests.add(digest(out))
        mismatch |= len(digests) != 1
        speed = times["python"] / times["compiled"] if "compiled" in times else 1.0
        print(f"{name:10s}" + "".join(f"{times[b]:11.3f}s" for b in backends)
              + f"{speed:9.2f}x" + ("" if len(digests) == 1 else "  OUTPUT MISMATCH"))
    return 1 if mismatch else 0


if __name__ == "__main__":
    sys.exit(main())
