"""Time the compiled kernels against the numpy fallback.

Usage: ``python3 benchmarks/bench_kernels.py [--repeat R]``. Besides timing,
each kernel's outputs are compared across backends before anything is timed.
"""

import argparse
import timeit

import numpy as np

from prosub._ext import RELU, SCALED_SIGMOID2, available_backends


def cases(rng):
    z = rng.normal(size=(1500, 1024))
    bias = rng.normal(size=1024)
    a = np.empty_like(z)
    dout = rng.normal(size=z.shape)
    dz = np.empty_like(z)
    p = rng.normal(size=1024 * 1024)
    g = rng.normal(size=p.size)

    def bias_relu(k):
        zz = z.copy()
        k.bias_activation(zz, bias, RELU, a)
        return a.copy()

    def bias_sigmoid(k):
        zz = z.copy()
        k.bias_activation(zz, bias, SCALED_SIGMOID2, a)
        return a.copy()

    def backward_sigmoid(k):
        out = 2.0 / (1.0 + np.exp(-z))
        k.activation_backward(z, out, dout, SCALED_SIGMOID2, dz)
        return dz.copy()

    def adam(k):
        pp, m, v = p.copy(), np.zeros_like(p), np.zeros_like(p)
        for step in range(1, 4):
            k.adam_update(pp, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1 - 0.9**step, 1 - 0.999**step)
        return pp

    def wilcoxon_counts(k):
        return np.asarray(k.signed_rank_counts(25))

    return {
        "bias+relu 1500x1024": bias_relu,
        "bias+2sigmoid 1500x1024": bias_sigmoid,
        "2sigmoid backward 1500x1024": backward_sigmoid,
        "adam x3, 1M params": adam,
        "signed-rank counts n=25": wilcoxon_counts,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy fallback is available")
    table = cases(np.random.default_rng(0))
    names = list(backends)
    print(f"{'kernel':30s}" + "".join(f"{n + ' ms':>14s}" for n in names) + f"{'speedup':>10s}")
    for label, fn in table.items():
        outs = [fn(backends[n]) for n in names]
        for o in outs[1:]:
            if not np.allclose(o, outs[0], rtol=1e-12, atol=0.0):
                raise SystemExit(f"{label}: backends disagree")
        times = [min(timeit.repeat(lambda: fn(backends[n]), number=1, repeat=args.repeat)) * 1e3
                 for n in names]
        speed = f"{times[0] / times[-1]:>9.2f}x" if len(times) > 1 else ""
        print(f"{label:30s}" + "".join(f"{t:>14.2f}" for t in times) + speed)


if __name__ == "__main__":
    main()
