"""Compare the compiled and numpy Gaussian-mixture kernels.

Run with ``python benchmarks/bench_kernels.py``. Reports per-call kernel
timings over a few batch sizes and an end-to-end calibration timing with each
backend swapped in.
"""

import argparse
import timeit

import numpy as np

from iia_diffusion import _backend, harness, iia
from iia_diffusion.schedule import build_grid


def kernel_table(repeat: int):
    rng = np.random.default_rng(0)
    model = harness.default_model()
    means = np.ascontiguousarray(model.means)
    s2 = np.ascontiguousarray(model.scales**2)
    print(f"{'batch':>7} {'backend':>8} {'us/call':>10} {'speedup':>8}")
    for B in (1, 16, 200, 2048):
        z = rng.normal(size=(B, model.dim)) * 5
        log_w = model.log_weights(None, B)
        base = None
        for name, fn in _backend.KERNELS.items():
            t = min(timeit.repeat(lambda: fn(z, means, log_w, s2, 0.9, 0.7), number=repeat, repeat=3)) / repeat
            base = t if base is None else base
            print(f"{B:>7} {name:>8} {t * 1e6:>10.1f} {base / t:>8.2f}")


def calibration_table():
    model = harness.default_model()
    grid = build_grid("edm_rho", 6, 0.002, 80.0, terminal_zero=True)
    batch = iia.make_calibration_batch(model, grid, 200)
    variant = iia.Variant.default("iia_edm")
    original = _backend.gm_posterior
    try:
        for name, fn in _backend.KERNELS.items():
            _backend.gm_posterior = fn
            t = min(timeit.repeat(lambda: iia.calibrate(variant, model, grid, batch), number=1, repeat=3))
            print(f"calibrate iia_edm N={grid.N} |B|=200 backend={name}: {t * 1e3:.1f} ms")
    finally:
        _backend.gm_posterior = original


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()
    if "cython" not in _backend.KERNELS:
        print("compiled kernel not built; only the numpy fallback is available")
    kernel_table(args.repeat)
    calibration_table()


if __name__ == "__main__":
    main()
