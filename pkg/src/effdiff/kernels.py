"""Continuous-time random walk kernels: numba and pure-numpy backends.

Both backends consume the same flat rate tables and the same counter-based
random streams (one stream per path, two draws per jump: holding time, then
direction), so results are deterministic given (seed, path count) no matter
how paths are scheduled. The numpy backend advances all active paths in
lockstep, one jump per vector step.

Bit-compatibility: integer outputs (positions, cells, jump counts) agree
across backends because direction selection compares bit-identical uniforms
against bit-identical cumulative tables. Holding times pass through a log,
and numpy's vectorized log may differ from libm's by one ulp on ~0.3% of
inputs (measured here), so recorded clocks and occupation integrals agree to
~1e-12 relative rather than exactly; a record time landing inside that ulp
window could in principle shift one integer record, with probability ~1e-9
per path in the shipped configurations.

Semantics shared by both backends, per path:
  - state s_0 from the stream hash; each draw advances s by a fixed gamma and
    finalizes (splitmix64).
  - holding tau = -log(u)/total_rate[cell]; records falling in [t, t+tau) are
    written before the jump (position right-continuous between jumps).
  - direction j picked by scanning the cumulative row; axis j>>1 moves by
    +1 if j is even else -1; zero-rate cells absorb (all remaining records
    repeat the frozen position).
  - occupation integrals of per-cell functions accumulate g(cell)*dt along
    the way and are emitted at each record time.
"""

import math
import os

import numpy as np

from ._rng import GAMMA, MIX1, MIX2, fmix64, stream_state, to_unit

_SH30 = np.uint64(30)
_SH27 = np.uint64(27)
_SH31 = np.uint64(31)
_SH11 = np.uint64(11)
_INV53 = 2.0**-53
_STREAM_SALT = np.uint64(0x5354524541)

DISABLE_ENV = "EH_DISABLE_NUMBA"

if os.environ.get(DISABLE_ENV, "").strip() not in ("", "0"):
    HAS_NUMBA = False
    _NUMBA_ERR = f"disabled via {DISABLE_ENV}"
else:
    try:
        import numba
        from numba import njit, prange
        HAS_NUMBA = True
        _NUMBA_ERR = None
    except Exception as exc:  # pragma: no cover - environment dependent
        HAS_NUMBA = False
        _NUMBA_ERR = repr(exc)


def active_backend():
    return "numba" if HAS_NUMBA else "numpy"


def set_threads(n):
    """Thread count for the parallel kernel (no-op on the numpy backend).

    Clamped to the range numba's runtime allows; asking for more threads
    than the process has available must not abort a run.
    """
    if HAS_NUMBA and n:
        limit = int(numba.config.NUMBA_NUM_THREADS)
        numba.set_num_threads(min(max(1, int(n)), limit))


if HAS_NUMBA:

    @njit(cache=True)
    def _fmix(z):
        z = (z ^ (z >> _SH30)) * MIX1
        z = (z ^ (z >> _SH27)) * MIX2
        return z ^ (z >> _SH31)

    @njit(cache=True)
    def _stream(seed, word1, word2):
        h = (seed + GAMMA) ^ (word1 * MIX1)
        h = _fmix(h)
        h = (h + GAMMA) ^ (word2 * MIX1)
        return _fmix(h)

    @njit(parallel=True, cache=True)
    def _walk_numba(total_rate, cump, nbr, starts, start_coords, rec_times,
                    gfields, seed, pos, cells, gints, njumps):
        n_paths = starts.shape[0]
        n_rec = rec_times.shape[0]
        n_g = gfields.shape[0]
        n_dir = cump.shape[1]
        d = start_coords.shape[1]
        for p in prange(n_paths):
            state = _stream(seed, _STREAM_SALT, np.uint64(p))
            cell = starts[p]
            coords = np.empty(d, dtype=np.int64)
            for i in range(d):
                coords[i] = start_coords[p, i]
            gacc = np.zeros(n_g)
            t = 0.0
            rec = 0
            jumps = 0
            while rec < n_rec:
                rate = total_rate[cell]
                state = state + GAMMA
                z = _fmix(state)
                u1 = (float(z >> _SH11) + 0.5) * _INV53
                tau = -math.log(u1) / rate
                while rec < n_rec and t + tau >= rec_times[rec]:
                    for g in range(n_g):
                        gints[p, rec, g] = gacc[g] + gfields[g, cell] * (
                            rec_times[rec] - t)
                    for i in range(d):
                        pos[p, rec, i] = coords[i]
                    cells[p, rec] = cell
                    rec += 1
                if rec >= n_rec:
                    break
                for g in range(n_g):
                    gacc[g] += gfields[g, cell] * tau
                t = t + tau
                state = state + GAMMA
                z = _fmix(state)
                u2 = (float(z >> _SH11) + 0.5) * _INV53
                j = 0
                while j < n_dir - 1 and u2 >= cump[cell, j]:
                    j += 1
                cell = nbr[cell, j]
                axis = j >> 1
                if j & 1 == 0:
                    coords[axis] += 1
                else:
                    coords[axis] -= 1
                jumps += 1
            njumps[p] = jumps


def _walk_numpy(total_rate, cump, nbr, starts, start_coords, rec_times,
                gfields, seed, pos, cells, gints, njumps):
    n_paths = starts.shape[0]
    n_rec = rec_times.shape[0]
    n_g = gfields.shape[0]
    state = stream_state(np.uint64(seed), np.arange(n_paths, dtype=np.uint64))
    cell = starts.astype(np.int64).copy()
    coords = start_coords.astype(np.int64).copy()
    t = np.zeros(n_paths)
    rec = np.zeros(n_paths, dtype=np.int64)
    gacc = np.zeros((n_paths, n_g))
    njumps[:] = 0
    active = np.ones(n_paths, dtype=bool)
    while active.any():
        idx = np.nonzero(active)[0]
        c = cell[idx]
        rate = total_rate[c]
        with np.errstate(over="ignore"):
            st = state[idx] + GAMMA
        u1 = to_unit(fmix64(st))
        with np.errstate(divide="ignore"):
            tau = -np.log(u1) / rate
        t_new = t[idx] + tau
        # flush every record time inside this holding interval
        while True:
            pending = rec[idx] < n_rec
            hit = pending.copy()
            safe = np.minimum(rec[idx], n_rec - 1)
            hit &= t_new >= rec_times[safe]
            if not hit.any():
                break
            ii = idx[hit]
            ri = rec[ii]
            dt = rec_times[ri] - t[ii]
            for g in range(n_g):
                gints[ii, ri, g] = gacc[ii, g] + gfields[g, cell[ii]] * dt
            pos[ii, ri, :] = coords[ii]
            cells[ii, ri] = cell[ii]
            rec[ii] += 1
        finished = rec[idx] >= n_rec
        if finished.any():
            active[idx[finished]] = False
        live = ~finished
        if not live.any():
            state[idx] = st
            continue
        jj = idx[live]
        tau_l = tau[live]
        if n_g:
            gacc[jj] += gfields[:, cell[jj]].T * tau_l[:, None]
        t[jj] = t_new[live]
        with np.errstate(over="ignore"):
            st2 = st[live] + GAMMA
        u2 = to_unit(fmix64(st2))
        rows = cump[cell[jj]]
        j = np.sum(rows[:, :-1] <= u2[:, None], axis=1)
        cell[jj] = nbr[cell[jj], j]
        axis = j >> 1
        step = np.where(j & 1 == 0, 1, -1)
        coords[jj, axis] += step
        njumps[jj] += 1
        state[idx] = st
        state[jj] = st2


def run_walk(total_rate, cump, nbr, starts, start_coords, rec_times, gfields,
             seed, backend=None):
    """Dispatch a walk batch; returns (pos, cells, gints, njumps).

    Shapes: total_rate (M,), cump/nbr (M, 2d), starts (P,), start_coords
    (P, d), rec_times (T,) strictly increasing > 0, gfields (G, M).
    """
    if backend is None:
        backend = active_backend()
    n_paths = len(starts)
    n_rec = len(rec_times)
    d = start_coords.shape[1]
    n_g = gfields.shape[0]
    pos = np.zeros((n_paths, n_rec, d), dtype=np.int64)
    cells = np.zeros((n_paths, n_rec), dtype=np.int64)
    gints = np.zeros((n_paths, n_rec, n_g))
    njumps = np.zeros(n_paths, dtype=np.int64)
    args = (np.ascontiguousarray(total_rate, dtype=np.float64),
            np.ascontiguousarray(cump, dtype=np.float64),
            np.ascontiguousarray(nbr, dtype=np.int64),
            np.ascontiguousarray(starts, dtype=np.int64),
            np.ascontiguousarray(start_coords, dtype=np.int64),
            np.ascontiguousarray(rec_times, dtype=np.float64),
            np.ascontiguousarray(gfields, dtype=np.float64),
            np.uint64(seed), pos, cells, gints, njumps)
    if backend == "numba":
        if not HAS_NUMBA:
            raise RuntimeError(f"numba backend unavailable: {_NUMBA_ERR}")
        _walk_numba(*args)
    elif backend == "numpy":
        _walk_numpy(*args)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return pos, cells, gints, njumps


def walk_one_python(total_rate, cump, nbr, start, start_coord, rec_times,
                    gfields, seed, path_index, max_jumps=10_000_000):
    """Plain-python reference walker that also keeps the full jump chain.

    Slow; used for small runs (keep_jumps) and as an independent oracle for
    the two production kernels. Returns (pos, cells, gints, jump_times,
    jump_cells) where the jump arrays include the start state at t=0.
    """
    state = stream_state(np.uint64(seed), np.uint64(path_index))
    n_rec = len(rec_times)
    n_g = gfields.shape[0]
    d = len(start_coord)
    cell = int(start)
    coords = np.array(start_coord, dtype=np.int64)
    gacc = np.zeros(n_g)
    t = 0.0
    rec = 0
    pos = np.zeros((n_rec, d), dtype=np.int64)
    cells = np.zeros(n_rec, dtype=np.int64)
    gints = np.zeros((n_rec, n_g))
    jump_times = [0.0]
    jump_cells = [cell]
    n_dir = cump.shape[1]
    while rec < n_rec:
        rate = total_rate[cell]
        with np.errstate(over="ignore"):
            state = state + GAMMA
        u1 = float(to_unit(fmix64(state)))
        tau = -math.log(u1) / rate if rate > 0 else math.inf
        while rec < n_rec and t + tau >= rec_times[rec]:
            gints[rec] = gacc + gfields[:, cell] * (rec_times[rec] - t)
            pos[rec] = coords
            cells[rec] = cell
            rec += 1
        if rec >= n_rec:
            break
        gacc += gfields[:, cell] * tau
        t = t + tau
        with np.errstate(over="ignore"):
            state = state + GAMMA
        u2 = float(to_unit(fmix64(state)))
        j = 0
        while j < n_dir - 1 and u2 >= cump[cell, j]:
            j += 1
        cell = int(nbr[cell, j])
        axis = j >> 1
        coords[axis] += 1 if (j & 1) == 0 else -1
        jump_times.append(t)
        jump_cells.append(cell)
        if len(jump_times) > max_jumps:
            raise RuntimeError("jump budget exceeded in reference walker")
    return pos, cells, gints, np.array(jump_times), np.array(jump_cells,
                                                             dtype=np.int64)
