"""Time each hot kernel on its numba and numpy paths.

    python benchmarks/bench_kernels.py [--repeat N]

The first numba call of each kernel pays compilation and is excluded.
"""

import argparse
import time

import numpy as np

from mvhan import _kernels as K


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    rows, width, n = 20_000, 16, 200_000
    idx = rng.integers(0, rows, size=n)
    src = rng.normal(size=(n, width))
    yield "scatter_add_rows", lambda f: f(np.zeros((rows, width)), idx, src)

    n_users, n_items, per_user = 2000, 5000, 50
    items = np.concatenate([np.sort(rng.choice(n_items, per_user, replace=False)) for _ in range(n_users)])
    indptr = np.arange(0, n_users * per_user + 1, per_user, dtype=np.int64)
    users = rng.integers(0, n_users, size=4096)
    draws = rng.integers(0, n_items, size=(users.size, 28))
    yield "select_negatives", lambda f: f(draws, users, indptr, items, 20)

    pos, neg = rng.normal(size=5000), rng.normal(size=250_000)
    yield "auc_twice_numerator", lambda f: f(pos, neg)

    scores = rng.normal(size=(256, 5000))
    yield "topk_rows", lambda f: f(scores, 50)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, call in cases(rng):
        np_fn = getattr(K, f"{name}_numpy")
        nb_fn = getattr(K, f"{name}_numba")
        call(nb_fn)  # compile
        t_np = _best(lambda: call(np_fn), args.repeat)
        t_nb = _best(lambda: call(nb_fn), args.repeat)
        print(f"{name:<22}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
