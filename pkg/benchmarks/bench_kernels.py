"""Numba kernels against their pure-numpy fallbacks.

Part 1 times each hot kernel in-process on both paths and checks that they
agree.  Part 2 runs an end-to-end kernel build in two subprocesses, one with
MKVFLOW_PURE_NUMPY=1.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--skip-e2e]
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from mkvflow import _accel


def best_of(fn, repeat):
    fn()  # warm-up (JIT compile on the numba path)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    z = np.linspace(-6, 6, 257)
    h = z[1] - z[0]
    y = np.linspace(-3, 3, 129)
    var = rng.uniform(0.05, 0.5, len(y))
    ca_z = 0.5 + 0.2 * np.abs(np.sin(z))
    ca_y = 0.5 + 0.2 * np.abs(np.sin(y))
    cb_z = np.tanh(z)
    edges = np.linspace(-6, 6, 257)
    pts = rng.normal(size=4000)
    sd = np.full(len(pts), 0.1)
    X = rng.normal(size=(3000, 1))
    w = np.full(len(X), 1.0 / len(X))
    n, m = 64, 512
    lo = -np.ones((n, m))
    up = -np.ones((n, m))
    dg = np.full((n, m), 4.0)
    rhs = rng.normal(size=(n, m))
    return {
        "residual_weights": ((z, h, y, var, ca_z, ca_y, cb_z),
                             "_residual_weights_nb", "residual_weights_np"),
        "cell_gauss": ((edges, pts, sd), "_cell_gauss_nb", "cell_gauss_np"),
        "pair_power_sum": ((X, X, w, 1.5, 0.05), "_pair_power_sum_nb", "pair_power_sum_np"),
        "pair_gauss_sum": ((X, X, w, 1.0), "_pair_gauss_sum_nb", "pair_gauss_sum_np"),
        "thomas_batch": ((lo, dg, up, rhs), "_thomas_batch_nb", "thomas_batch_np"),
    }


E2E = ("import time, numpy as np; from mkvflow import scenarios, _accel;"
       "from mkvflow.verify import scenario_kernel;"
       "sc = scenarios.build('holder_diffusion');"
       "scenario_kernel(sc, n_x=4, t_nodes=np.array([0.5, 1.0]));"
       "t0 = time.perf_counter(); k = scenario_kernel(sc, n_x=16);"
       "print(_accel.USE_NUMBA, time.perf_counter() - t0, float(k.values.sum()))")


def end_to_end():
    out = {}
    for label, flag in (("numba", "0"), ("numpy", "1")):
        env = dict(os.environ, MKVFLOW_PURE_NUMPY=flag)
        res = subprocess.run([sys.executable, "-c", E2E], env=env, capture_output=True,
                             text=True, check=True)
        used, secs, total = res.stdout.split()
        out[label] = (used == "True", float(secs), float(total))
    return out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args()
    if not _accel._HAVE_NUMBA:
        print("numba not importable; only the numpy path exists")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numba [ms]':>12}{'numpy [ms]':>12}{'speedup':>9}{'max |diff|':>12}")
    for name, (a, nb, npy) in cases(rng).items():
        f_nb, f_np = getattr(_accel, nb), getattr(_accel, npy)
        if name in ("pair_power_sum", "pair_gauss_sum"):
            a = a[:3] + (float(a[3]),) + a[4:]
        t_nb = best_of(lambda: f_nb(*a), args.repeat)
        t_np = best_of(lambda: f_np(*a), args.repeat)
        diff = float(np.abs(np.asarray(f_nb(*a)) - np.asarray(f_np(*a))).max())
        print(f"{name:<18}{1e3 * t_nb:>12.2f}{1e3 * t_np:>12.2f}{t_np / t_nb:>9.1f}{diff:>12.2e}")
    if not args.skip_e2e:
        r = end_to_end()
        print()
        print("end-to-end heat kernel (holder_diffusion, 16 start points)")
        for label, (used, secs, total) in r.items():
            print(f"  {label:<6} numba_active={used!s:<5} {secs:8.2f} s  checksum {total:.12g}")
        print(f"  speedup {r['numpy'][1] / r['numba'][1]:.1f}x, "
              f"checksum diff {abs(r['numpy'][2] - r['numba'][2]):.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
