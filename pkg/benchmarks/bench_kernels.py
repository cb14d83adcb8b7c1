"""Compiled loop kernels vs their numpy twins, plus an end-to-end run.

    python benchmarks/bench_kernels.py [--sizes 1280,10240,100000] [--repeat 5]

Kernel timings call both implementations in one process (the ``*_loop``
functions are compiled on first call; that call is excluded).  The
end-to-end part runs case 1 in two subprocesses, one with
DRIFTFV_DISABLE_NUMBA=1.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from driftfv import USE_NUMBA, kernels

END_TO_END = """
import time
from driftfv.harness.cases import builtin_case
from driftfv.harness.study import make_params
from driftfv.scheme import run
case = builtin_case("case1")
mesh = case.mesh({cells})
data = case.problem(mesh)
params = make_params(case, {lam}, {dt})
run(mesh, data, make_params(case, {lam}, {dt}, t_final={dt}))   # warm-up / compile
t0 = time.perf_counter()
res = run(mesh, data, params)
print(time.perf_counter() - t0, res.fp_iters_avg)
"""


def _best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def kernel_cases(n, rng):
    x = rng.uniform(-40, 40, n)
    tau = rng.uniform(0.5, 2.0, n)
    ek = np.arange(n - 1)
    eo = ek + 1
    a, b, a2 = rng.random(n - 1), rng.random(n - 1), rng.random(n - 1)
    u = rng.random(n)
    lower, upper = -rng.random(n), -rng.random(n)
    diag = 2.5 + rng.random(n)
    rhs = rng.random(n)
    m = 2 * n
    rows = np.repeat(np.arange(m), 4)
    cols = np.clip(rows + np.tile([-2, -1, 0, 1], m), 0, m - 1)
    vals = rng.random(rows.size)

    def scatter(impl):
        d, r = np.zeros(n), np.zeros(n)
        impl(n, ek, eo, a, b, a2, u, d, r)

    def band(impl):
        ab = np.zeros((7, m))
        impl(ab, 3, rows, cols, vals)

    ab = np.zeros((7, m))
    kernels.band_scatter_numpy(ab, 3, rows, cols, vals)
    xv = rng.random(m)
    return {
        "bernoulli": (lambda f: f(x), "bernoulli"),
        "effective_diffusion": (lambda f: f(x), "effective_diffusion"),
        "sg_coefficients": (lambda f: f(tau, x), "sg_coefficients"),
        "scatter_two_point": (scatter, "scatter_two_point"),
        "thomas": (lambda f: f(lower, diag, upper, rhs), "thomas"),
        "band_scatter": (band, "band_scatter"),
        "band_matvec": (lambda f: f(ab, 3, 3, xv), "band_matvec"),
    }


def bench_kernels(sizes, repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':<20} {'n':>8} {'numba [us]':>12} {'numpy [us]':>12} {'speedup':>8}")
    for n in sizes:
        for name, (call, base) in kernel_cases(n, rng).items():
            loop = getattr(kernels, base + "_loop")
            ref = getattr(kernels, base + "_numpy")
            call(loop)                      # compile outside the timing
            number = max(1, 200000 // n)
            t_loop = _best(lambda: call(loop), repeat, number)
            t_np = _best(lambda: call(ref), repeat, number)
            print(f"{name:<20} {n:>8d} {1e6 * t_loop:>12.1f} {1e6 * t_np:>12.1f} {t_np / t_loop:>8.2f}")


def bench_run(cells, lam, dt):
    print(f"\nend-to-end: case1, {cells} cells, lambda2={lam:g}, dt={dt:g}, T=0.1")
    out = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, DRIFTFV_DISABLE_NUMBA=flag)
        proc = subprocess.run([sys.executable, "-c", END_TO_END.format(cells=cells, lam=lam, dt=dt)],
                              env=env, capture_output=True, text=True, check=True)
        secs, iters = (float(v) for v in proc.stdout.split())
        out[label] = secs
        print(f"  {label:<6} {secs:8.3f} s   ({iters:.1f} fixed-point iterations per step)")
    print(f"  speedup {out['numpy'] / out['numba']:.2f}x")


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--sizes", default="1280,10240,100000")
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--cells", type=int, default=1280)
    p.add_argument("--lambda2", type=float, default=1e-5)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--skip-run", action="store_true")
    args = p.parse_args(argv)
    if not USE_NUMBA:
        print("DRIFTFV_DISABLE_NUMBA is set: the loop kernels run as plain Python")
    bench_kernels([int(s) for s in args.sizes.split(",")], args.repeat)
    if not args.skip_run:
        bench_run(args.cells, args.lambda2, args.dt)


if __name__ == "__main__":
    main()
