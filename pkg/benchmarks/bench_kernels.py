"""Time the numba and pure-numpy paths of each hot kernel.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is warmed up once (JIT compilation is excluded) and then timed as
the best of ``--repeat`` runs. Results from both paths are cross-checked.
"""

import argparse
import time

import numpy as np

from fedmobfair import _kernels as k


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not k.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    seq = rng.integers(0, 4, 5000)
    x, y = rng.random((40, 40)), rng.random((40, 40))
    v, w, n = 100, 2, 2000
    weights = rng.normal(size=(w * v + 1, v)) * 0.1
    ctx, lab = rng.integers(0, v, (n, w)), rng.integers(0, v, n)

    cases = [
        ("lz_lambda n=5000", lambda: k.lz_lambda_numpy(seq), lambda: k.lz_lambda_numba(seq)),
        ("windowed_ssim 40x40 N=8", lambda: k.windowed_ssim_numpy(x, y, 8, 1e-4, 9e-4),
         lambda: k.windowed_ssim_numba(x, y, 8, 1e-4, 9e-4)),
        ("mlr_loss_grad V=100 W=2 n=2000", lambda: k.mlr_loss_grad_numpy(weights, ctx, lab),
         lambda: k.mlr_loss_grad_numba(weights, ctx, lab)),
    ]
    assert np.array_equal(cases[0][1](), cases[0][2]())
    assert abs(cases[1][1]() - cases[1][2]()) < 1e-12
    assert abs(cases[2][1]()[0] - cases[2][2]()[0]) < 1e-12

    print(f"{'kernel':34s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, f_np, f_nb in cases:
        t_np, t_nb = best_of(f_np, args.repeat), best_of(f_nb, args.repeat)
        print(f"{name:34s} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
