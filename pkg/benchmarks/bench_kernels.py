"""Time the compiled and numpy compositing kernels on identical inputs.

    python benchmarks/bench_kernels.py [--splats 200] [--width 64] [--repeat 50]

Prints per-call timings for forward and backward on both backends and checks
that the two agree before timing anything.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from ocsplat import kernels


def make_inputs(n_splats: int, width: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    mean = rng.uniform(-5, width + 5, n_splats)
    var = rng.uniform(0.3, 40.0, n_splats)
    opacity = rng.uniform(0.05, 0.95, n_splats)
    color = rng.uniform(0, 1, (n_splats, 3))
    oc = rng.uniform(0, 0.3, n_splats)
    grad = rng.normal(0, 1e-3, (width, 3))
    return mean, var, opacity, color, oc, np.zeros(3), grad


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--splats", type=int, default=200)
    ap.add_argument("--width", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)

    mean, var, op, col, oc, bg, grad = make_inputs(args.splats, args.width)
    backends = {"python": kernels.python_backend}
    if kernels.cython_backend is not None:
        backends["cython"] = kernels.cython_backend
    else:
        print("compiled backend unavailable; timing numpy only")

    ref = None
    for name, be in backends.items():
        fwd = be.composite_forward(mean, var, op, col, oc, args.width, bg, args.threads)
        bwd = be.composite_backward(mean, var, op, col, args.width, bg, grad, args.threads)
        if ref is None:
            ref = (fwd, bwd)
        else:
            err = max(float(np.max(np.abs(a - b))) for a, b in zip((*ref[0][:4], *ref[1]), (*fwd[:4], *bwd)))
            print(f"max |{name} - python| = {err:.3e}")

    print(f"{args.splats} splats, width {args.width}, {args.repeat} calls")
    times = {}
    for name, be in backends.items():
        f = timeit.timeit(lambda: be.composite_forward(mean, var, op, col, oc, args.width, bg, args.threads),
                          number=args.repeat) / args.repeat
        b = timeit.timeit(lambda: be.composite_backward(mean, var, op, col, args.width, bg, grad, args.threads),
                          number=args.repeat) / args.repeat
        times[name] = (f, b)
        print(f"{name:>7}: forward {f * 1e6:9.1f} us   backward {b * 1e6:9.1f} us")
    if "cython" in times:
        pf, pb = times["python"]
        cf, cb = times["cython"]
        print(f"speedup: forward {pf / cf:.1f}x   backward {pb / cb:.1f}x")


if __name__ == "__main__":
    main()
