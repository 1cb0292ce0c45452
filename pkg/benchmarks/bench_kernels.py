"""Compare the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--sizes 1000 100000 1000000] [--repeat 20]

Prints one line per (kernel, size) with the best-of-``repeat`` time of each
backend and the speed-up. Exits early if the compiled module is unavailable.
"""
import argparse
import sys
import timeit

import numpy as np

from tdvcl.kernels import _pykernels

try:
    from tdvcl.kernels import _ckernels
except ImportError:
    _ckernels = None


def cases(P, rng):
    mu_q, rho_q = rng.normal(size=P), rng.normal(size=P) - 3.0
    mu_p, sig_p = rng.normal(size=P), np.abs(rng.normal(size=P)) + 0.1
    grads = rng.normal(size=P)

    def adam(mod):
        params, m, v = np.zeros(P), np.zeros(P), np.zeros(P)
        return lambda: mod.adam_update(params, grads, m, v, 1e-3, 0.9, 0.999, 1e-8, 1)

    return {
        "softplus": lambda mod: (lambda: mod.softplus(rho_q)),
        "kl_diag": lambda mod: (lambda: mod.kl_diag(mu_q, mod.softplus(rho_q), mu_p, sig_p)),
        "kl_diag_grad": lambda mod: (lambda: mod.kl_diag_grad(mu_q, rho_q, mu_p, sig_p)),
        "adam_update": adam,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1_000, 100_000, 1_000_000])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels not built; install with the extension enabled", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<14}{'P':>10}{'python (ms)':>14}{'cython (ms)':>14}{'speed-up':>10}")
    for P in args.sizes:
        for name, make in cases(P, rng).items():
            t_py = min(timeit.repeat(make(_pykernels), number=1, repeat=args.repeat))
            t_c = min(timeit.repeat(make(_ckernels), number=1, repeat=args.repeat))
            print(f"{name:<14}{P:>10}{t_py * 1e3:>14.3f}{t_c * 1e3:>14.3f}{t_py / t_c:>10.2f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
