"""Timing comparison of the pure-numpy and JIT kernel lanes.

Runs each hot kernel at training-realistic shapes (MNIST-scale minibatch:
batch 256, hidden width 100, 10 activation draws) under both backends, then
times the full per-minibatch gradient step that training spends nearly all of
its wall clock in.  The JIT lane is warmed up before timing so compilation
cost is excluded (it is reported separately).

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from signagg import kernels
from signagg.gradients import sign_loss_grads
from signagg.network import NetworkSpec, init_posterior

BATCH = 256
WIDTH = 100
DRAWS = 10
ROWS = BATCH * DRAWS
PARAMS = 98_801  # 784-100-1 with biases


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def kernel_cases(rng):
    """(name, callable) pairs at the shapes the training loop produces."""
    z = rng.standard_normal((ROWS, WIDTH))
    a = rng.standard_normal((ROWS, WIDTH))
    inv_scale = 1.0 / np.sqrt(2.0 * (np.einsum("td,td->t", a, a) + 1.0))
    inv_std = inv_scale * np.sqrt(2.0)
    p = rng.uniform(0.01, 0.99, size=(ROWS, WIDTH))
    u = rng.uniform(size=(ROWS, WIDTH))
    flat = rng.standard_normal(PARAMS)
    grad = rng.standard_normal(PARAMS)
    m1 = np.zeros(PARAMS)
    v1 = np.zeros(PARAMS)
    return [
        ("erf_map", lambda: kernels.erf_map(z)),
        ("erf_scaled", lambda: kernels.erf_scaled(z, inv_scale)),
        ("cond_prob_pos", lambda: kernels.cond_prob_pos(z, inv_scale)),
        ("sample_pm1", lambda: kernels.sample_pm1(p, u)),
        ("score_coeff", lambda: kernels.score_coeff(a, z, inv_scale, inv_std)),
        ("gauss_coeff", lambda: kernels.gauss_coeff(z, inv_scale, inv_std)),
        ("sigmoid_map", lambda: kernels.sigmoid_map(z)),
        (
            "adam_step",
            lambda: kernels.adam_step(
                flat, grad, m1, v1, 1, 0.01, 0.9, 0.999, 1e-8
            ),
        ),
    ]


def minibatch_step(rng):
    """One full gradient evaluation on an MNIST-shaped sign network."""
    spec = NetworkSpec((784, WIDTH, 1), "sign", True)
    post = init_posterior(spec, rng)
    X = rng.standard_normal((BATCH, 784))
    y = np.where(rng.uniform(size=BATCH) < 0.5, 1.0, -1.0)
    step_rng = np.random.default_rng(0)
    return lambda: sign_loss_grads(post, X, y, DRAWS, step_rng)


def run(repeats):
    lanes = kernels.available_backends()
    if "numba" not in lanes:
        print("numba unavailable: timing the numpy lane only")

    results = {}
    compile_cost = {}
    for lane in lanes:
        kernels.set_backend(lane)
        rng = np.random.default_rng(7)
        for name, fn in kernel_cases(rng):
            t0 = time.perf_counter()
            fn()  # warm-up; first numba call compiles
            warm = time.perf_counter() - t0
            med = _median_time(fn, repeats)
            results[(name, lane)] = med
            if lane == "numba":
                compile_cost[name] = warm - med
        step = minibatch_step(rng)
        t0 = time.perf_counter()
        step()
        warm = time.perf_counter() - t0
        results[("minibatch_step", lane)] = _median_time(step, repeats)
        if lane == "numba":
            compile_cost["minibatch_step"] = warm - results[("minibatch_step", lane)]

    names = [name for name, _ in kernel_cases(np.random.default_rng(7))]
    names.append("minibatch_step")
    header = f"{'kernel':<16} {'numpy (ms)':>12} {'numba (ms)':>12} {'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name in names:
        np_ms = results[(name, "numpy")] * 1e3
        if ("numba" in lanes) and (name, "numba") in results:
            nb_ms = results[(name, "numba")] * 1e3
            print(f"{name:<16} {np_ms:>12.3f} {nb_ms:>12.3f} {np_ms / nb_ms:>8.2f}x")
        else:
            print(f"{name:<16} {np_ms:>12.3f} {'-':>12} {'-':>9}")
    if compile_cost:
        total = sum(compile_cost.values())
        print(f"\none-time numba compilation: {total:.1f}s total")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--repeats", type=int, default=20, help="timed repetitions per case"
    )
    args = parser.parse_args()
    run(args.repeats)


if __name__ == "__main__":
    main()
