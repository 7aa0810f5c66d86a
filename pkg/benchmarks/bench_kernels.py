"""Time every kernel under both backends at model-sized shapes.

The default backend mix in memreport._kernels was chosen from this table;
rerun after touching the kernels or moving to different hardware:

    python3 benchmarks/bench_kernels.py [--iters N] [--repeats R]

A ratio above 1 means the compiled kernel is faster there.
"""

import argparse
import time

import numpy as np

from memreport._kernels import npkernels as npk

try:
    from memreport._kernels import cykernels as cyk
except ImportError:
    cyk = None


def bench(fn, args, iters, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(iters):
            fn(*args)
        best = min(best, (time.perf_counter() - t0) / iters)
    return best * 1e3


def cases(r):
    att = np.ascontiguousarray(r.normal(size=(12800, 100)) * 2.0)
    att_p = npk.softmax_fwd(att.copy())
    att_g = np.ascontiguousarray(r.normal(size=att.shape))
    ln_x = np.ascontiguousarray(r.normal(size=(1600, 64)))
    ln_xhat, ln_sigma = npk.layernorm_fwd(ln_x, 1e-6)
    ln_g = np.ascontiguousarray(r.normal(size=ln_x.shape))
    elem = np.ascontiguousarray(r.normal(size=(4096, 64)) * 2.0)
    p = r.normal(size=600_000)
    g = r.normal(size=600_000)
    m = np.zeros(600_000)
    v = np.zeros(600_000)
    idx = np.ascontiguousarray(r.integers(0, 122, size=1600), dtype=np.int64)
    sg = np.ascontiguousarray(r.normal(size=(1600, 64)))
    out = np.zeros((122, 64))
    return [
        ("softmax_fwd", "(12800, 100)", (att,)),
        ("softmax_bwd", "(12800, 100)", (att_p, att_g)),
        ("softmax_lse_fwd", "(12800, 100)", (att,)),
        ("layernorm_fwd", "(1600, 64)", (ln_x, 1e-6)),
        ("layernorm_bwd", "(1600, 64)", (ln_xhat, ln_sigma, ln_g, 1e-6)),
        ("sigmoid_fwd", "(4096, 64)", (elem,)),
        ("tanh_fwd", "(4096, 64)", (elem,)),
        ("adam_update", "(600000,)", (p, g, m, v, 1e-4, 0.9, 0.999, 1e-8, 5)),
        ("scatter_add_rows", "(1600, 64)->122", (out, idx, sg)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=30)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    if cyk is None:
        print("compiled kernels are not built; nothing to compare "
              "(pip install -e . builds them unless MEMREPORT_SKIP_EXT is set)")
        return

    print("| kernel | shape | numpy ms | compiled ms | np/cy | winner |")
    print("|---|---|---|---|---|---|")
    for name, shape, call_args in cases(np.random.default_rng(0)):
        t_np = bench(getattr(npk, name), call_args, args.iters, args.repeats)
        t_cy = bench(getattr(cyk, name), call_args, args.iters, args.repeats)
        ratio = t_np / t_cy
        winner = "compiled" if ratio > 1.05 else "numpy" if ratio < 0.95 else "tie"
        print(f"| {name} | {shape} | {t_np:.3f} | {t_cy:.3f} "
              f"| {ratio:.2f} | {winner} |")


if __name__ == "__main__":
    main()
