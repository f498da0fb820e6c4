"""Compiled vs numpy stain kernels.

    python3 benchmarks/bench_kernels.py [--pixels N] [--repeat R]

Times nnls2 and lasso_cd from both backends on the same OD pixels, checks
that the outputs agree bit for bit, and times a full Vahadane fit with each.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from mitoshift import _kernels_py
from mitoshift.stain import RUIFROK_HE

try:
    from mitoshift import _ckernels
except ImportError:
    _ckernels = None


def pixels(n, seed=0):
    r = np.random.default_rng(seed)
    return np.abs(r.normal(size=(n, 2)) @ RUIFROK_HE.T + 0.05 * r.normal(size=(n, 3)))


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def vahadane_time(pure: bool, repeat: int) -> float:
    # backend is chosen at import, so each fit runs in a fresh interpreter
    env = dict(os.environ, MITOSHIFT_PURE_PYTHON="1" if pure else "0")
    code = (
        "import timeit\n"
        "from mitoshift import stain, data\n"
        "od = stain.rgb_to_od(data.synth_patch(1, 15.0, 1, 0, side=128)[0])\n"
        f"print(min(timeit.repeat(lambda: stain.fit_vahadane(od), number=1, repeat={repeat})))\n"
    )
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pixels", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    od = pixels(args.pixels)
    H0 = _kernels_py.nnls2(od, RUIFROK_HE)
    backends = {"numpy": _kernels_py}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    else:
        print("compiled extension not built; numpy only")

    rows = []
    for name, mod in backends.items():
        t_nnls = best(lambda: mod.nnls2(od, RUIFROK_HE), args.repeat)
        t_cd = best(lambda: mod.lasso_cd(od, RUIFROK_HE, H0, 0.1, 20), args.repeat)
        rows.append((name, t_nnls, t_cd))
    print(f"{args.pixels} pixels, best of {args.repeat}")
    print(f"{'backend':8s} {'nnls2 [ms]':>11s} {'lasso_cd x20 [ms]':>18s}")
    for name, a, b in rows:
        print(f"{name:8s} {a * 1e3:11.2f} {b * 1e3:18.2f}")
    if len(rows) == 2:
        print(f"speedup  {rows[0][1] / rows[1][1]:10.2f}x {rows[0][2] / rows[1][2]:17.2f}x")
        same = (np.array_equal(_ckernels.nnls2(od, RUIFROK_HE), _kernels_py.nnls2(od, RUIFROK_HE))
                and np.array_equal(_ckernels.lasso_cd(od, RUIFROK_HE, H0, 0.1, 20),
                                   _kernels_py.lasso_cd(od, RUIFROK_HE, H0, 0.1, 20)))
        print("outputs bit-identical:", same)
        tp, tc = vahadane_time(True, 3), vahadane_time(False, 3)
        print(f"fit_vahadane 128x128: numpy {tp * 1e3:.1f} ms, cython {tc * 1e3:.1f} ms ({tp / tc:.2f}x)")


if __name__ == "__main__":
    main()
