"""Compiled versus pure-Python QP kernel on random projection problems.

    python3 benchmarks/bench_qp.py --problems 2000 --na 3 --m 8
"""

import argparse
import time

import numpy as np

from pwa_shield import qp


def random_problems(n, na, m, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        G = np.ascontiguousarray(rng.normal(size=(m, na)))
        h = rng.normal(size=m)
        u = rng.normal(scale=2.0, size=na)
        out.append((G, h, u))
    return out


def time_kernel(kernel, problems, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        for G, h, u in problems:
            qp.solve_stacked(G, h, u, kernel=kernel)
        best = min(best, time.perf_counter() - t0)
    return best / len(problems) * 1e6


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--problems", type=int, default=2000)
    ap.add_argument("--na", type=int, default=3)
    ap.add_argument("--m", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    problems = random_problems(args.problems, args.na, args.m, args.seed)
    results = {name: time_kernel(k, problems, args.repeat) for name, k in sorted(qp.KERNELS.items())}
    if "compiled" in results:
        # Same answers from both kernels, or the timing is meaningless.
        for G, h, u in problems[:200]:
            a = qp.solve_stacked(G, h, u, kernel=qp.KERNELS["python"])
            b = qp.solve_stacked(G, h, u, kernel=qp.KERNELS["compiled"])
            assert a.status == b.status
            if a.optimal:
                assert np.allclose(a.u_star, b.u_star, atol=1e-9)
    print(f"{args.problems} problems, na={args.na}, m={args.m}; default backend: {qp.BACKEND}")
    for name, us in results.items():
        print(f"  {name:9s} {us:8.2f} us/solve")
    if "compiled" in results:
        print(f"  speedup   {results['python'] / results['compiled']:8.2f}x")
    else:
        print("  compiled extension not built")


if __name__ == "__main__":
    main()
