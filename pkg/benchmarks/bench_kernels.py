"""Time the compiled kernels against the NumPy fallback on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes match one training step of the default model: a batch of 30
trajectories of 30 days x 18 slots x 12 locations.
"""

import argparse
import timeit

import numpy as np

from tbcnn import _runtime
from tbcnn.kernels import _numpy

try:
    from tbcnn.kernels import _compiled
except ImportError:
    _compiled = None


def cases(rng):
    B, D, T, C = 30, 30, 18, 12
    x = rng.standard_normal((B, D, T, C))
    g = rng.standard_normal((B, D, T, C))
    w_row = rng.standard_normal((C, 1, 3, C))
    w_dw = rng.standard_normal((C, 3, 3))
    bias = rng.standard_normal(C)
    z = x.reshape(B, D, T, C)
    a = rng.random((B, T))
    n = 512 * 1008
    p, pg = rng.standard_normal(n), rng.standard_normal(n)

    def conv_fwd(k):
        return lambda: k.conv2d_forward(x, w_row, bias)

    def conv_bwd(k):
        cols = k.conv2d_forward(x, w_row, bias)[1]
        return lambda: k.conv2d_backward(cols, x.shape, w_row, g)

    def maxpool(k):
        def run():
            out, win = k.maxpool2d_forward(x, 5, 3)
            k.maxpool2d_backward(out, win, x.shape)
        return run

    def squeeze_excite(k):
        def run():
            h, _ = k.relu_squeeze(z)
            k.scale_grad(g, h)
            k.relu_squeeze_scale_grad(g, h, a, a)
        return run

    def adam(k):
        m, v = np.zeros(n), np.zeros(n)
        return lambda: k.adam_update(p, pg, m, v, 1e-5, 0.9, 0.999, 1e-8, 1)

    return {
        "conv2d 1x3 forward": conv_fwd,
        "conv2d 1x3 backward": conv_bwd,
        "depthwise 3x3 forward": lambda k: (lambda: k.depthwise_forward(x, w_dw, bias)),
        "depthwise 3x3 backward": lambda k: (lambda: k.depthwise_backward(x, w_dw, g)),
        "max_pool 5x3 fwd+bwd": maxpool,
        "relu+squeeze+scale passes": squeeze_excite,
        "adam update (516k params)": adam,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=10)
    args = ap.parse_args()
    _runtime.tune_allocator()
    rng = np.random.default_rng(0)
    if _compiled is None:
        print("compiled kernels are not built; run `pip install -e .` first")
    print(f"{'kernel':<28}{'numpy ms':>10}{'compiled ms':>13}{'speedup':>9}")
    for name, make in cases(rng).items():
        times = []
        for k in (_numpy, _compiled):
            if k is None:
                times.append(float("nan"))
                continue
            fn = make(k)
            best = min(timeit.repeat(fn, number=args.number, repeat=args.repeat))
            times.append(best / args.number * 1e3)
        print(f"{name:<28}{times[0]:>10.3f}{times[1]:>13.3f}{times[0] / times[1]:>8.1f}x")


if __name__ == "__main__":
    main()
