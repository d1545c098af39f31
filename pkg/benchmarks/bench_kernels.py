"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel with the best-of-N time for each backend and the
speedup.  Outputs are cross-checked before timing.
"""
import argparse
import timeit

import numpy as np

from sdq import _pykernels

try:
    from sdq import _ckernels
except ImportError:
    _ckernels = None


# (batch, in channels, side, out channels): the toy ResNet's shape, then a larger one
CONV_SHAPES = {"toy": (64, 4, 8, 8), "large": (16, 8, 16, 16)}


def cases(rng):
    v = rng.uniform(0, 1, 200_000)
    idx = rng.integers(0, 16, v.size)
    out = {
        "round_half_away": lambda k: k.round_half_away(v * 37.0),
        "quantize_grid": lambda k: k.quantize_grid(v, 15.0),
        "segment_sum": lambda k: k.segment_sum(v, idx, 16),
    }
    for tag, (n, c, side, o) in CONV_SHAPES.items():
        x = rng.normal(size=(n, c, side, side))
        w = rng.normal(size=(o, c, 3, 3))
        g = rng.normal(size=(n, o, side, side))
        out[f"conv2d_forward/{tag}"] = lambda k, x=x, w=w: k.conv2d_forward(x, w, 1, 1)
        out[f"conv2d_backward_input/{tag}"] = (
            lambda k, g=g, w=w, s=x.shape: k.conv2d_backward_input(g, w, s, 1, 1))
        out[f"conv2d_backward_weight/{tag}"] = (
            lambda k, g=g, x=x, s=w.shape: k.conv2d_backward_weight(g, x, s, 1, 1))
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled extension not built; run pip install -e . --no-build-isolation")
    print(f"{'kernel':<30}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(np.random.default_rng(0)).items():
        np.testing.assert_allclose(fn(_ckernels), fn(_pykernels), rtol=1e-12, atol=1e-9)
        py = min(timeit.repeat(lambda: fn(_pykernels), number=1, repeat=args.repeat))
        cy = min(timeit.repeat(lambda: fn(_ckernels), number=1, repeat=args.repeat))
        print(f"{name:<30}{py * 1e3:>12.2f}{cy * 1e3:>12.2f}{py / cy:>9.2f}x")


if __name__ == "__main__":
    main()
