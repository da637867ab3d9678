"""Compare the compiled and numpy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Times each hot kernel on training-sized inputs and one short training run,
and checks that both backends agree before reporting speedups.
"""

import argparse
import timeit

import numpy as np

from prefmargin import backend
from prefmargin.data import GeneratorConfig, generate
from prefmargin.trainer import TrainConfig, train


def _inputs(rng, n_groups, k, d, batch):
    offsets = np.arange(0, n_groups * k + 1, k, dtype=np.int64)
    phi = rng.standard_normal((n_groups * k, d))
    w = rng.standard_normal(d)
    rows = rng.integers(0, n_groups * k, batch)
    coefs = rng.standard_normal(batch)
    r = rng.normal(0.5, 1.0, batch)
    return phi, w, offsets, rows, coefs, r


def _cases(k_mod, phi, w, offsets, rows, coefs, r):
    logp = k_mod.candidate_logprobs(phi, w, offsets)
    return {
        "candidate_logprobs": lambda: k_mod.candidate_logprobs(phi, w, offsets),
        "policy_gradient": lambda: k_mod.policy_gradient(phi, offsets, logp, rows, coefs),
        "adaptive_margins": lambda: k_mod.adaptive_margins(r, 2.0),
    }


def _best(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--epochs", type=int, default=50)
    args = p.parse_args(argv)

    names = sorted(backend.AVAILABLE)
    print(f"backends: {', '.join(names)} (default {backend.NAME})")
    rng = np.random.default_rng(0)
    shapes = [("pair batch", 32, 2, 32, 64), ("split", 200, 2, 32, 200), ("large", 4096, 4, 32, 4096)]
    for label, n_groups, k, d, batch in shapes:
        data = _inputs(rng, n_groups, k, d, batch)
        results = {n: _cases(backend.get(n), *data) for n in names}
        for kernel in results[names[0]]:
            outs = [results[n][kernel]() for n in names]
            for other in outs[1:]:
                np.testing.assert_allclose(np.hstack(other), np.hstack(outs[0]), rtol=1e-10, atol=1e-12)
            times = {n: _best(results[n][kernel], args.repeat, 200) for n in names}
            line = "  ".join(f"{n} {times[n] * 1e6:9.2f} us" for n in names)
            if "cython" in times:
                line += f"  speedup x{times['python'] / times['cython']:.1f}"
            print(f"{label:>10} {kernel:<20} {line}")

    ds = generate(GeneratorConfig.from_seed(7))
    cfg = TrainConfig(epochs=args.epochs, batch_size=32, seed=7)
    times = {}
    for n in names:
        times[n] = _best(lambda: train(cfg, ds, kernels=backend.get(n)), max(1, args.repeat // 2), 1)
    line = "  ".join(f"{n} {times[n]:7.3f} s" for n in names)
    if "cython" in times:
        line += f"  speedup x{times['python'] / times['cython']:.1f}"
    print(f"{'train':>10} {f'amapo {args.epochs} epochs':<20} {line}")


if __name__ == "__main__":
    main()
