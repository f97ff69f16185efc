"""Time the compiled row kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--repeat 50] [--train-steps 5]

Prints one line per (kernel, shape) with the median time of each backend
and the speedup, then the wall time of a few teacher-forced training
updates of the toy agent under each backend.
"""
import argparse
import statistics
import time

import numpy as np

from semnav.numkernel import _pykernels, tensor

try:
    from semnav.numkernel import _ckernels
except ImportError:
    _ckernels = None

SHAPES = [(8, 16), (40, 40), (64, 64), (288, 16), (1000, 64)]


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_cases(mod, rows, cols, rng):
    x = rng.normal(size=(rows, cols))
    mask = rng.random((rows, cols)) < 0.8
    gy = rng.normal(size=(rows, cols))
    gain, bias = rng.normal(size=cols), rng.normal(size=cols)
    y = mod.softmax_forward(x, mask)
    _, xhat, rstd = mod.layernorm_forward(x, gain, bias, 1e-5)
    return {
        "softmax_fwd": lambda: mod.softmax_forward(x, mask),
        "softmax_bwd": lambda: mod.softmax_backward(y, gy, mask),
        "layernorm_fwd": lambda: mod.layernorm_forward(x, gain, bias, 1e-5),
        "layernorm_bwd": lambda: mod.layernorm_backward(gy, xhat, rstd, gain),
    }


def bench_kernels(repeat):
    print(f"{'kernel':<15}{'shape':>12}{'numpy us':>12}{'cython us':>12}{'speedup':>9}")
    for rows, cols in SHAPES:
        py = kernel_cases(_pykernels, rows, cols, np.random.default_rng(0))
        cy = kernel_cases(_ckernels, rows, cols, np.random.default_rng(0)) if _ckernels else {}
        for name, fn in py.items():
            t_py = median_time(fn, repeat) * 1e6
            if name in cy:
                t_cy = median_time(cy[name], repeat) * 1e6
                print(f"{name:<15}{f'{rows}x{cols}':>12}{t_py:>12.1f}{t_cy:>12.1f}{t_py / t_cy:>8.2f}x")
            else:
                print(f"{name:<15}{f'{rows}x{cols}':>12}{t_py:>12.1f}{'n/a':>12}{'':>9}")


def bench_training(steps):
    from semnav.agent import ModelConfig, NavigationAgent, train_step
    from semnav.semparser import load_lexicon
    from semnav.simworld import generate_task, generate_world

    lex = load_lexicon()
    world = generate_world(1, 16, 3.0, lex.category_names)
    batch = [generate_task(world, s, lex) for s in range(4)]
    backends = [_pykernels] + ([_ckernels] if _ckernels else [])
    for mod in backends:
        tensor.kernels = mod
        agent = NavigationAgent.build(ModelConfig(), lex, 0)
        train_step(agent, batch, {world.seed: world}, lex)
        t0 = time.perf_counter()
        for _ in range(steps):
            train_step(agent, batch, {world.seed: world}, lex)
        per = (time.perf_counter() - t0) / steps
        print(f"train_step ({mod.BACKEND}, batch 4, toy dims): {per * 1e3:.1f} ms")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=50)
    p.add_argument("--train-steps", type=int, default=5)
    args = p.parse_args()
    if _ckernels is None:
        print("compiled kernels not built; timing the numpy fallback only")
    bench_kernels(args.repeat)
    if args.train_steps:
        bench_training(args.train_steps)


if __name__ == "__main__":
    main()
