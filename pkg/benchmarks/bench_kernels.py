"""Compare the compiled step kernel with the pure-Python loop.

Usage: python benchmarks/bench_kernels.py [--scenario NAME] [--duration S] [--repeat N]
"""
from __future__ import annotations

import argparse
import statistics
import sys
import time

import numpy as np

from hdtsim import has_compiled
from hdtsim.config import PRESETS, preset
from hdtsim.simengine import run_compiled, run_python


def _time(fn, spec, repeat):
    times = []
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn(spec)
        times.append(time.perf_counter() - t0)
    return result, times


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenario", default="voltage_regulation", choices=PRESETS)
    ap.add_argument("--duration", type=float, default=None,
                    help="override the preset duration [s]")
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    if not has_compiled():
        print("compiled kernel not built; nothing to compare", file=sys.stderr)
        return 1
    spec = preset(args.scenario)
    if args.duration is not None:
        spec.duration = args.duration
    spec.validate()
    n = spec.nsteps

    py, t_py = _time(run_python, spec, args.repeat)
    cc, t_cc = _time(run_compiled, spec, args.repeat)
    best_py, best_cc = min(t_py), min(t_cc)

    vdc_py, vdc_cc = py["v_dc"], cc["v_dc"]
    m = min(len(vdc_py), len(vdc_cc))
    drift = float(np.max(np.abs(vdc_py[:m] - vdc_cc[:m]))) if m else float("nan")

    print(f"scenario      {spec.name} ({n} steps, dt={spec.dt:g} s)")
    print(f"python        best {best_py:8.4f} s  median {statistics.median(t_py):8.4f} s"
          f"  {n / best_py:12.0f} steps/s")
    print(f"compiled      best {best_cc:8.4f} s  median {statistics.median(t_cc):8.4f} s"
          f"  {n / best_cc:12.0f} steps/s")
    print(f"speedup       {best_py / best_cc:8.1f}x")
    print(f"max |dvC|     {drift:.3e} V between backends")
    return 0


if __name__ == "__main__":
    sys.exit(main())
