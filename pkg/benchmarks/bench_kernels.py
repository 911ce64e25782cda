"""Time the numba kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeats N]

Shapes match desk-scale training: CTC over 16x-downsampled utterances and
word alignment of 5-12 word transcripts.
"""
import argparse
import time

import numpy as np

from ctxasr import kernels


def _ctc_case(rng, T, L, V=68):
    x = rng.normal(size=(T, V))
    lp = x - np.log(np.exp(x).sum(1, keepdims=True))
    return lp, rng.integers(3, V - 1, L)


def _time(fn, repeats):
    fn()  # warm up (and compile, for numba)
    t = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t) / repeats


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    ctc = [_ctc_case(rng, T, L) for T, L in ((80, 40), (160, 90))]
    words = [(rng.integers(0, 50, n), rng.integers(0, 50, n + 2)) for n in (5, 12, 40)]
    cases = [(f"ctc T={lp.shape[0]} L={len(t)}", lambda lp=lp, t=t: kernels.ctc_forward_backward(lp, t, 67))
             for lp, t in ctc]
    cases += [(f"align {len(r)}x{len(h)}", lambda r=r, h=h: kernels.edit_alignment(r, h)) for r, h in words]
    if not kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy path can run")
    print(f"{'case':<22}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name, fn in cases:
        kernels.use_numba(False)
        slow = _time(fn, args.repeats)
        kernels.use_numba(True)
        fast = _time(fn, args.repeats) if kernels.HAVE_NUMBA else float("nan")
        print(f"{name:<22}{1e3 * slow:>12.3f}{1e3 * fast:>12.3f}{slow / fast:>9.1f}x")


if __name__ == "__main__":
    main()
