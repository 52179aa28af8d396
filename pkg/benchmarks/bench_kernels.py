"""Compiled vs numpy kernels, per call and end to end.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--no-filter]

The kernel table times each backend in-process. The filter row runs a short
SIG filter in two subprocesses, one with ``SEQLAP_PURE_PYTHON=1``.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from seqlap import kernels
from seqlap.gaussmix import GaussianComponent, GaussianMixture

FILTER_SNIPPET = """
import time, numpy as np
from seqlap import kernels, models
from seqlap.seqfilter import CorrectionConfig, run_filter
m = models.example1()
sim = models.simulate(m, {n}, models.TRUE_PARAMS, np.random.default_rng(0))
t0 = time.perf_counter()
run_filter(m, sim.y, sim.z, CorrectionConfig(algo="sig"), np.random.default_rng(1))
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def _mixture(rng, d, m):
    comps = []
    for w in rng.dirichlet(np.ones(m)):
        Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        comps.append(GaussianComponent(rng.normal(size=d), (Q * rng.uniform(1, 10, d)) @ Q.T, np.log(w)))
    return GaussianMixture(comps)


def _predictive_args(rng, n, m, dp=3):
    return (rng.normal(size=n) * 3, np.ascontiguousarray(rng.normal(size=(n, dp))),
            rng.uniform(-1, 1, n), np.exp(rng.normal(size=n)), rng.normal(size=m),
            np.ascontiguousarray(rng.normal(size=(m, dp))),
            np.ascontiguousarray(np.tile(np.eye(dp), (m, 1, 1))), np.exp(rng.normal(size=m)),
            rng.normal(size=m), np.ascontiguousarray(rng.normal(size=(m, dp))))


def kernel_table(repeat, n=4000, d=4, m=5):
    rng = np.random.default_rng(0)
    mix = _mixture(rng, d, m)
    pts = np.ascontiguousarray(rng.normal(size=(n, d)))
    cases = {
        "component_logpdf": lambda k: k.component_logpdf(pts, *mix.packed),
        "mixture_logpdf": lambda k: k.mixture_logpdf(pts, *mix.packed),
        "predictive_logpdf_scalar": (lambda args: lambda k: k.predictive_logpdf_scalar(*args))(
            _predictive_args(rng, n, m)),
    }
    backends = kernels.available_backends()
    rows = []
    for name, fn in cases.items():
        times = {b: min(timeit.repeat(lambda: fn(k), number=1, repeat=repeat)) for b, k in backends.items()}
        rows.append((name, times))
    return rows, sorted(backends)


def filter_times(n):
    out = {}
    for pure in (False, True):
        env = dict(os.environ)
        env.pop("SEQLAP_PURE_PYTHON", None)
        if pure:
            env["SEQLAP_PURE_PYTHON"] = "1"
        res = subprocess.run([sys.executable, "-c", FILTER_SNIPPET.format(n=n)], env=env,
                             capture_output=True, text=True, check=True)
        backend, seconds = res.stdout.split()
        out[backend] = float(seconds)
    return out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--steps", type=int, default=100, help="series length for the filter row")
    p.add_argument("--no-filter", action="store_true")
    args = p.parse_args(argv)

    rows, names = kernel_table(args.repeat)
    print(f"{'kernel':28s}" + "".join(f"{b:>12s}" for b in names) + f"{'speedup':>10s}")
    for name, t in rows:
        speed = t["python"] / t["cython"] if "cython" in t else float("nan")
        print(f"{name:28s}" + "".join(f"{t[b] * 1e3:10.2f}ms" for b in names) + f"{speed:9.1f}x")
    if not args.no_filter:
        ft = filter_times(args.steps)
        speed = ft.get("python", np.nan) / ft.get("cython", np.nan)
        print(f"{f'SIG filter, {args.steps} steps':28s}"
              + "".join(f"{ft[b]:11.2f}s" for b in sorted(ft)) + f"{speed:9.1f}x")


if __name__ == "__main__":
    main()
