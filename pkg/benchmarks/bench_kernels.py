"""Time the numba kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat N]

Kernel timings are in-process (both paths are importable side by side). The
end-to-end SQL search at one field point is run in a subprocess per backend,
since the backend is chosen at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from noon_faraday import kernels

E2E = """
import time
import numpy as np
from noon_faraday import atomic, metrology
ch = atomic.CellChannel(atomic.CellConfig(temperature=70))
ch.prefetch(np.linspace(0.030, 0.031, 3))
t0 = time.perf_counter()
metrology.sql_optimize(0.0305, ch, n_starts=16, seed=0)
print(time.perf_counter() - t0)
"""


def best(fn, repeat):
    fn()  # warm-up / JIT compile
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(repeat):
    rng = np.random.default_rng(0)
    z = rng.normal(0, 5, (64, 2000)) + 1j * np.abs(rng.normal(0, 2, (64, 2000)))
    angles = rng.uniform(-np.pi, np.pi, (20000, 4))
    tp = np.exp(1j * rng.uniform(-3, 3, 3)) * 0.8
    tm = np.exp(1j * rng.uniform(-3, 3, 3)) * 0.7
    kmat = rng.normal(size=(40, 3, 4, 4)) + 1j * rng.normal(size=(40, 3, 4, 4))
    counts = rng.uniform(0, 1e4, (40, 3))
    t_int = np.ones(40)
    sw = np.sqrt(np.maximum(counts, 1))
    p = rng.normal(size=16)
    cases = {
        "faddeeva (128k points)": (
            lambda: kernels.faddeeva_numpy(z),
            (lambda: kernels.faddeeva_numba(z)) if kernels.HAVE_NUMBA else None,
        ),
        "single_photon_fi (20k configs)": (
            lambda: kernels.single_photon_fi_numpy(angles, tp, tm, 1e-5, 0.1, 0.2, True),
            (lambda: kernels.single_photon_fi_numba(angles, tp, tm, 1e-5, 0.1, 0.2, True))
            if kernels.HAVE_NUMBA else None,
        ),
        "pair_residuals (40 fields)": (
            lambda: kernels.pair_residuals_numpy(p, kmat, counts, t_int, sw, 1.0),
            (lambda: kernels.pair_residuals_numba(p, kmat, counts, t_int, sw, 1.0))
            if kernels.HAVE_NUMBA else None,
        ),
    }
    rows = []
    for name, (np_fn, nb_fn) in cases.items():
        t_np = best(np_fn, repeat)
        t_nb = best(nb_fn, repeat) if nb_fn else float("nan")
        rows.append((name, t_np, t_nb))
    return rows


def end_to_end():
    out = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, NOON_FARADAY_NO_NUMBA=flag)
        # twice: the first run may pay JIT compilation or cache load
        subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, check=True)
        r = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True, text=True, check=True)
        out[label] = float(r.stdout.strip())
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)
    print(f"active backend: {kernels.BACKEND}")
    print(f"{'kernel':34s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}")
    for name, a, b in kernel_table(args.repeat):
        print(f"{name:34s} {1e3 * a:11.3f} {1e3 * b:11.3f} {a / b:8.1f}")
    if not args.skip_e2e:
        e = end_to_end()
        print(f"{'sql_optimize, one field, 16 starts':34s} {1e3 * e['numpy']:11.1f} {1e3 * e['numba']:11.1f} "
              f"{e['numpy'] / e['numba']:8.1f}")


if __name__ == "__main__":
    main()
