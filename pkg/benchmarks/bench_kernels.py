"""Compare the compiled and numpy kernel backends on small and large inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Also times one desk-preset stage-2 training step under each backend (the
backend is chosen at import, so that part runs in subprocesses).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from triplane_ssc.numerics import kernels

CASES = {
    # name: (plane H, W, C, number of sample points)
    "desk": (16, 16, 24, 200 * 2 * 4),
    "large": (92, 304, 48, 20000 * 8),
}

STEP_SNIPPET = """
import time, numpy as np
from triplane_ssc.config import desk_preset
from triplane_ssc.data import desk_recipes, make_scene
from triplane_ssc.stage1 import make_optimizer
from triplane_ssc.stage2 import Stage2Model, stage2_example, train_stage2_step
cfg = desk_preset()
ex = stage2_example(make_scene(desk_recipes(1)[0]), cfg)
model = Stage2Model(cfg)
opt = make_optimizer(model)
train_stage2_step(model, opt, [ex], 0, 10)
t0 = time.perf_counter()
for step in range(1, 6):
    train_stage2_step(model, opt, [ex], step, 10)
print((time.perf_counter() - t0) / 5)
"""


def _inputs(h, w, c, n, seed=0):
    rng = np.random.default_rng(seed)
    plane = rng.normal(size=(h, w, c))
    pts = np.stack([rng.uniform(-1, h, n), rng.uniform(-1, w, n)], axis=1)
    grad = rng.normal(size=(n, c))
    index = rng.integers(0, h * w, n)
    return plane, pts, grad, index


def bench_kernels(repeat):
    found = kernels.backends()
    rows = []
    for case, (h, w, c, n) in CASES.items():
        plane, pts, grad, index = _inputs(h, w, c, n)
        for op, call in (
            ("bilinear_forward", lambda m: m.bilinear_forward(plane, pts)),
            ("bilinear_backward", lambda m: m.bilinear_backward(plane, pts, grad)),
            ("index_add_rows", lambda m: m.index_add_rows(index, grad, h * w)),
        ):
            times = {}
            for name, mod in found.items():
                times[name] = min(timeit.repeat(lambda: call(mod), number=1, repeat=repeat))
            rows.append((case, op, times))
    return rows


def bench_training_step():
    out = {}
    for name, flag in (("cython", "0"), ("numpy", "1")):
        env = dict(os.environ, TRIPLANE_SSC_PURE_PYTHON=flag)
        res = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True, check=True)
        out[name] = float(res.stdout.strip().splitlines()[-1])
    return out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--skip-step", action="store_true", help="kernels only")
    args = parser.parse_args(argv)

    print(f"active backend: {kernels.BACKEND}; available: {sorted(kernels.backends())}")
    print(f"{'case':<6} {'kernel':<18} {'numpy ms':>10} {'cython ms':>10} {'speedup':>8}")
    for case, op, t in bench_kernels(args.repeat):
        cy = t.get("cython")
        cy_ms = f"{cy * 1e3:10.3f}" if cy else f"{'n/a':>10}"
        speed = f"{t['numpy'] / cy:7.1f}x" if cy else f"{'n/a':>8}"
        print(f"{case:<6} {op:<18} {t['numpy'] * 1e3:10.3f} {cy_ms} {speed}")
    if not args.skip_step:
        step = bench_training_step()
        print(
            f"desk stage-2 training step: numpy {step['numpy'] * 1e3:.1f} ms, "
            f"cython {step['cython'] * 1e3:.1f} ms ({step['numpy'] / step['cython']:.2f}x)"
        )


if __name__ == "__main__":
    main()
