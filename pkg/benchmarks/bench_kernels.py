"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Each kernel runs on the same inputs through both backends; the script checks
the outputs agree before reporting the timings.
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from biplanar3d._kernels import compiled, fallback


def _best(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng: np.random.Generator) -> dict:
    xpad = rng.standard_normal((34, 34, 42, 8)).astype(np.float32)
    cols = fallback.im2col3d(xpad, (3, 3, 3), 1)
    mu = rng.random((48, 48, 64))
    origins = np.zeros((48, 64, 3))
    origins[..., 0] = (np.arange(48)[:, None] + 0.5)
    origins[..., 2] = (np.arange(64)[None, :] + 0.5)
    direction = np.array([0.0, 1.0, 0.0])
    return {
        "im2col3d 34x34x42x8 k3": ("im2col3d", (xpad, (3, 3, 3), 1)),
        "col2im3d 32x32x40 k3": ("col2im3d", (cols, xpad.shape, (3, 3, 3), 1)),
        "im2col3d stride2": ("im2col3d", (xpad, (3, 3, 3), 2)),
        "integrate_rays 48x64 rays": ("integrate_rays", (mu, np.ones(3), origins, direction, 0.5, 96)),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the results here")
    args = ap.parse_args(argv)
    if compiled is None:
        print("compiled kernels are not built; only the fallback can run")
    rows = []
    for name, (fn, inputs) in cases(np.random.default_rng(0)).items():
        ref = getattr(fallback, fn)(*inputs)
        row = {"case": name, "python_s": _best(lambda: getattr(fallback, fn)(*inputs), args.repeat)}
        if compiled is not None:
            out = getattr(compiled, fn)(*inputs)
            row["max_abs_diff"] = float(np.max(np.abs(np.asarray(out, dtype=np.float64) - ref)))
            row["cython_s"] = _best(lambda: getattr(compiled, fn)(*inputs), args.repeat)
            row["speedup"] = row["python_s"] / row["cython_s"]
        rows.append(row)
    for r in rows:
        line = f"{r['case']:<28} python {r['python_s'] * 1e3:9.2f} ms"
        if "cython_s" in r:
            line += (f"   cython {r['cython_s'] * 1e3:9.2f} ms   x{r['speedup']:6.1f}"
                     f"   max|diff| {r['max_abs_diff']:.1e}")
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
