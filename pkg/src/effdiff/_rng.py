"""Counter-based random streams (splitmix64).

All randomness in the package flows through these functions so that field
generation and path simulation are reproducible and parallelizable: a draw is
a pure function of (master seed, logical coordinates, counter). The same
definitions are re-implemented inside the numba kernels (see kernels.py);
test_kernels cross-checks the two bit-for-bit.

Everything operates on numpy uint64 with wraparound semantics. Python ints
must never leak into the arithmetic (numpy would promote to float64).
"""

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)

_U64 = np.uint64
_SH30 = np.uint64(30)
_SH27 = np.uint64(27)
_SH31 = np.uint64(31)
_SH11 = np.uint64(11)
_HALF = 0.5
_INV53 = 2.0**-53


def fmix64(z):
    """splitmix64 finalizer; accepts uint64 scalars or arrays."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _SH30)) * MIX1
        z = (z ^ (z >> _SH27)) * MIX2
        z = z ^ (z >> _SH31)
    return z if z.ndim else _U64(z)


def hash_words(seed, *words):
    """Chain-hash integer words onto a seed. Any word may be an array
    (subsequent words broadcast), making whole-grid derivation one call."""
    h = np.uint64(np.uint64(seed))
    with np.errstate(over="ignore"):
        for w in words:
            w = np.asarray(w, dtype=np.uint64)
            h = fmix64((h + GAMMA) ^ (w * MIX1))
    return h


def stream_state(seed, index):
    """Initial state of logical stream `index` under `seed`."""
    return hash_words(seed, np.uint64(0x5354524541), index)  # salt = ASCII "STREA"


def next_state(state):
    """Advance a stream state by one draw. Returns (new_state, raw_u64)."""
    with np.errstate(over="ignore"):
        state = state + GAMMA
    return state, fmix64(state)


def to_unit(z):
    """Map raw uint64 draws to floats in (0, 1].

    The minimum is 2^-54 (never 0, so logs stay finite). The maximum rounds
    up to exactly 1.0 when the top 53 bits are all ones (probability 2^-53
    per draw); consumers must accept u = 1. The walk kernels do: it yields a
    zero-length holding time and selects the last direction.
    """
    return ((z >> _SH11).astype(np.float64) + _HALF) * _INV53


def uniform_cells(seed, salt, count, n_cells):
    """`count` quasi-independent cell indices in [0, n_cells): used for start
    cells. Modulo bias is ~n_cells/2^64, irrelevant at any grid size here."""
    raw = hash_words(seed, salt, np.arange(count, dtype=np.uint64))
    return (raw % np.uint64(n_cells)).astype(np.int64)
