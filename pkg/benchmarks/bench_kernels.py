"""Walk-kernel backend benchmark: numba versus the pure-numpy fallback.

Runs the same reproducible batch (identical rate tables, seeds, and record
grid, with the production quadratic-variation and occupation integrands
attached) through both kernels, checks that the integer outputs agree
bit-for-bit, and reports jumps per second.

Usage:
    python benchmarks/bench_kernels.py [--cells 32] [--paths 512]
                                       [--t-max 0.25] [--seed 7]

Scale --paths/--t-max up for stable numba numbers; the numpy fallback is
typically two orders of magnitude slower, so the defaults keep it polite.
"""

import argparse
import time

import numpy as np

from effdiff import kernels
from effdiff.corrector import solve_correctors
from effdiff.energy import assemble
from effdiff.environment import EnvironmentSpec, generate_field
from effdiff.montecarlo import (WalkConfig, _qv_density_fields, _rate_tables,
                                simulate_walk)


def build_workload(n, paths, t_max, seed):
    spec = EnvironmentSpec.checkerboard(1.0, 4.0, tile_cells=max(2, n // 8))
    field = generate_field(spec, n, 1.0 / n)
    form = assemble(field)
    correctors = solve_correctors(form, tol=1e-10)
    total, cump, nbr = _rate_tables(form)
    gfields = np.vstack([
        _qv_density_fields(form, correctors),
        (1.0 / field.lam).reshape(1, -1),
        field.Lam.reshape(1, -1),
    ])
    rng_starts = np.arange(paths, dtype=np.int64) % total.size
    coords = np.stack(np.unravel_index(rng_starts, field.grid_shape),
                      axis=1).astype(np.int64)
    rec = np.array([t_max / 2, t_max])
    return (total, cump, nbr, rng_starts, coords, rec, gfields, seed)


def run(backend, args_tuple, repeats):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = kernels.run_walk(*args_tuple, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return out, best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cells", type=int, default=32)
    ap.add_argument("--paths", type=int, default=512)
    ap.add_argument("--t-max", type=float, default=0.25)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    work = build_workload(args.cells, args.paths, args.t_max, args.seed)
    backends = ["numpy"]
    if kernels.HAS_NUMBA:
        # warm up the JIT outside the timed region
        kernels.run_walk(*work, backend="numba")
        backends.insert(0, "numba")
    else:
        print("numba unavailable "
              f"({kernels.DISABLE_ENV} set or import failed); "
              "timing the numpy fallback only")

    results = {}
    for backend in backends:
        (pos, cells, gints, njumps), dt = run(backend, work, args.repeats)
        jumps = int(njumps.sum())
        results[backend] = (pos, cells, njumps, gints, dt, jumps)
        print(f"{backend:>6}: {jumps / dt:12.3e} jumps/s "
              f"({jumps} jumps, best of {args.repeats}: {dt:.3f} s)")

    if len(results) == 2:
        a, b = results["numba"], results["numpy"]
        same = (np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
                and np.array_equal(a[2], b[2]))
        close = np.allclose(a[3], b[3], rtol=1e-12, atol=0.0)
        print(f"integer outputs identical: {same}; "
              f"float integrals within 1e-12: {close}")
        print(f"speedup numba/numpy: {b[4] / a[4]:.1f}x")

    # end-to-end sanity: the public entry point on the active backend
    field = generate_field(
        EnvironmentSpec.checkerboard(1.0, 4.0, tile_cells=2), 16, 1.0 / 16)
    t0 = time.perf_counter()
    res = simulate_walk(field, WalkConfig(t_max=0.5, n_paths=256, seed=1))
    print(f"simulate_walk ({res.backend}): {res.njumps.sum()} jumps "
          f"in {time.perf_counter() - t0:.3f} s")


if __name__ == "__main__":
    main()
