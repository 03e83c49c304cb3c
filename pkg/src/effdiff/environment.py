"""Random coefficient fields on a periodized grid.

A field assigns every cell of an N^d periodic grid a symmetric positive d x d
matrix a(x) together with its eigenvalue bounds lambda(x) <= Lambda(x). The
torus stands in for the abstract stationary-ergodic environment: shifts are
exact symmetries and spatial averaging is the ergodic average.

All presets produce axis-aligned (diagonal) cell matrices. Generation is
deterministic in (spec, cells_per_side, spacing): cell values are derived by
counter-based hashing of the seed and the absolute cell/block coordinates, so
enlarging the grid extends a field rather than reshuffling it (the fixed-omega
refinement used by the sublinearity and audit sweeps).
"""

import hashlib
from dataclasses import dataclass, field as dc_field

import numpy as np

from ._rng import fmix64, hash_words, to_unit
from .errors import ConfigurationError, RangeError, ShapeError

MODELS = (
    "identity",
    "scaled_identity",
    "laminate_two_phase",
    "checkerboard",
    "heavy_tail",
    "bessel_trap",
)

_SALT_U = np.uint64(0x75)       # heavy-tail lambda draw
_SALT_V = np.uint64(0x76)       # heavy-tail Lambda draw
_SALT_AXIS = np.uint64(0x61)    # heavy-tail degenerate-axis choice


@dataclass(frozen=True)
class EnvironmentSpec:
    """Which law the field follows, in which dimension, under which seed."""

    model: str
    d: int
    seed: int
    params: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigurationError(f"unknown model {self.model!r}")
        if self.d < 1:
            raise ConfigurationError(f"dimension must be >= 1, got {self.d}")
        p = self.params
        pos = [k for k, v in p.items() if isinstance(v, (int, float)) and v <= 0]
        if pos:
            raise ConfigurationError(f"{self.model}: parameters must be > 0: {pos}")
        if self.model == "scaled_identity" and "c" not in p:
            raise ConfigurationError("scaled_identity needs parameter c")
        if self.model == "laminate_two_phase":
            f = p.get("volume_fraction")
            if f is None or not (0.0 < f < 1.0):
                raise ConfigurationError("volume_fraction must lie in (0,1)")
            if "a_low" not in p or "a_high" not in p:
                raise ConfigurationError("laminate needs a_low and a_high")
        if self.model == "checkerboard":
            t = p.get("tile_cells")
            if t is None or int(t) != t or t < 1:
                raise ConfigurationError("tile_cells must be an integer >= 1")
            if "a_low" not in p or "a_high" not in p:
                raise ConfigurationError("checkerboard needs a_low and a_high")
        if self.model == "heavy_tail":
            for k in ("tail_index_lo", "tail_index_hi", "correlation_cells"):
                if k not in p:
                    raise ConfigurationError(f"heavy_tail needs {k}")
            c = p["correlation_cells"]
            if int(c) != c or c < 1:
                raise ConfigurationError("correlation_cells must be an integer >= 1")
            if self.d < 2:
                raise ConfigurationError("heavy_tail requires d >= 2 (distinct "
                                         "lambda/Lambda axes)")
        if self.model == "bessel_trap":
            if "exponent" not in p:
                raise ConfigurationError("bessel_trap needs exponent")
            if self.d < 2:
                raise ConfigurationError("bessel_trap requires d >= 2")

    # --- convenience constructors -------------------------------------
    @classmethod
    def identity(cls, d=2, seed=0):
        return cls("identity", d, seed)

    @classmethod
    def scaled_identity(cls, c, d=2, seed=0):
        return cls("scaled_identity", d, seed, {"c": float(c)})

    @classmethod
    def laminate(cls, a_low, a_high, volume_fraction=0.5, d=2, seed=0):
        return cls("laminate_two_phase", d, seed,
                   {"a_low": float(a_low), "a_high": float(a_high),
                    "volume_fraction": float(volume_fraction)})

    @classmethod
    def checkerboard(cls, a_low, a_high, tile_cells, d=2, seed=0):
        return cls("checkerboard", d, seed,
                   {"a_low": float(a_low), "a_high": float(a_high),
                    "tile_cells": int(tile_cells)})

    @classmethod
    def heavy_tail(cls, tail_index_lo, tail_index_hi, correlation_cells=1,
                   d=2, seed=0):
        return cls("heavy_tail", d, seed,
                   {"tail_index_lo": float(tail_index_lo),
                    "tail_index_hi": float(tail_index_hi),
                    "correlation_cells": int(correlation_cells)})

    @classmethod
    def bessel_trap(cls, exponent, d=2, seed=0):
        return cls("bessel_trap", d, seed, {"exponent": float(exponent)})


def tri_index(i, j, d):
    """Index of entry (i,j), i<=j, in the row-major upper-triangle layout."""
    if j < i:
        i, j = j, i
    return i * d - i * (i - 1) // 2 + (j - i)


@dataclass
class CoefficientField:
    """Per-cell symmetric matrices plus eigenvalue bounds on a periodic grid.

    entries has shape (N,)*d + (d(d+1)/2,), λ/Λ have shape (N,)*d. Immutable
    by convention: nothing in the package writes to a generated field.
    """

    d: int
    cells_per_side: int
    spacing: float
    entries: np.ndarray
    lam: np.ndarray
    Lam: np.ndarray
    model: str = "custom"

    @property
    def n_cells(self):
        return self.cells_per_side ** self.d

    @property
    def box_side(self):
        return self.cells_per_side * self.spacing

    @property
    def grid_shape(self):
        return (self.cells_per_side,) * self.d

    def diag(self, axis):
        """Grid view of the diagonal coefficient a_{axis,axis}."""
        return self.entries[..., tri_index(axis, axis, self.d)]

    def matrix(self, cell):
        """Full symmetric matrix of one cell (cell = tuple of indices)."""
        m = np.zeros((self.d, self.d))
        vals = self.entries[tuple(np.mod(cell, self.cells_per_side))]
        k = 0
        for i in range(self.d):
            for j in range(i, self.d):
                m[i, j] = m[j, i] = vals[k]
                k += 1
        return m

    def descriptor_hash(self):
        """Stable content hash used by cross-object consistency checks."""
        hsh = hashlib.sha256()
        hsh.update(np.int64([self.d, self.cells_per_side]).tobytes())
        hsh.update(np.float64([self.spacing]).tobytes())
        hsh.update(np.ascontiguousarray(self.entries, dtype="<f8").tobytes())
        return hsh.hexdigest()

    def save(self, path):
        from .formats import write_ehf1
        write_ehf1(path, self)

    @classmethod
    def load(cls, path):
        from .formats import read_ehf1
        return read_ehf1(path)


def _cell_centers_1d(n, h):
    return (np.arange(n) + 0.5) * h


def _diagonal_field(diagonals, d, n, h, model):
    """Assemble a CoefficientField from per-axis diagonal value grids."""
    ntri = d * (d + 1) // 2
    shape = (n,) * d
    entries = np.zeros(shape + (ntri,))
    for ax in range(d):
        entries[..., tri_index(ax, ax, d)] = diagonals[ax]
    lam = np.min(np.stack(diagonals), axis=0)
    Lam = np.max(np.stack(diagonals), axis=0)
    return CoefficientField(d, n, h, entries, lam, Lam, model)


def generate_field(spec: EnvironmentSpec, cells_per_side: int,
                   spacing: float) -> CoefficientField:
    """Realize the spec on an N^d periodic grid with the given cell size."""
    n, d, h = int(cells_per_side), spec.d, float(spacing)
    if n < 2:
        raise ConfigurationError(f"cells_per_side must be >= 2, got {n}")
    if h <= 0:
        raise ConfigurationError("spacing must be > 0")
    p = spec.params

    if spec.model == "identity":
        g = np.ones((n,) * d)
        return _diagonal_field([g] * d, d, n, h, spec.model)

    if spec.model == "scaled_identity":
        g = np.full((n,) * d, p["c"])
        return _diagonal_field([g] * d, d, n, h, spec.model)

    if spec.model == "laminate_two_phase":
        f = p["volume_fraction"]
        n_low = int(round(n * f))
        if not 0 < n_low < n:
            raise ConfigurationError("volume_fraction unresolvable at this N")
        stripe = np.where(np.arange(n) < n_low, p["a_low"], p["a_high"])
        g = stripe.reshape((n,) + (1,) * (d - 1)) * np.ones((n,) * d)
        return _diagonal_field([g] * d, d, n, h, spec.model)

    if spec.model == "checkerboard":
        t = int(p["tile_cells"])
        if n % (2 * t) != 0:
            raise ConfigurationError(
                f"cells_per_side={n} not divisible by one period 2*tile_cells={2*t}")
        tiles = [np.arange(n) // t for _ in range(d)]
        parity = np.zeros((n,) * d, dtype=np.int64)
        for ax in range(d):
            parity = parity + tiles[ax].reshape(
                (1,) * ax + (n,) + (1,) * (d - 1 - ax))
        g = np.where(parity % 2 == 0, p["a_low"], p["a_high"]).astype(float)
        return _diagonal_field([g] * d, d, n, h, spec.model)

    if spec.model == "heavy_tail":
        corr = int(p["correlation_cells"])
        if n % corr != 0:
            raise ConfigurationError(
                f"cells_per_side={n} not divisible by correlation_cells={corr}")
        t_lo, t_hi = p["tail_index_lo"], p["tail_index_hi"]
        # Key each block by its absolute coordinates so coarse grids are
        # sub-grids of fine ones under a fixed seed.
        blocks = [np.arange(n) // corr for _ in range(d)]
        key = np.uint64(np.uint64(spec.seed))
        key = hash_words(key, np.uint64(0x4854))  # "HT"
        for ax in range(d):
            coord = blocks[ax].astype(np.uint64).reshape(
                (1,) * ax + (n,) + (1,) * (d - 1 - ax))
            key = hash_words(key, coord + np.uint64(1))
        u = to_unit(fmix64(key ^ _SALT_U))
        v = to_unit(fmix64(key ^ _SALT_V))
        lam = u ** (1.0 / t_lo)                       # lambda^{-1} Pareto(t_lo)
        Lam = np.maximum(lam, v ** (-1.0 / t_hi))     # Lambda Pareto-tail(t_hi)
        axis_pick = (fmix64(key ^ _SALT_AXIS) % np.uint64(d)).astype(np.int64)
        diagonals = [np.where(axis_pick == ax, lam, Lam) for ax in range(d)]
        return _diagonal_field(diagonals, d, n, h, spec.model)

    if spec.model == "bessel_trap":
        # Conductance collapses toward the box center like r^exponent (floored
        # at one cell width). lambda^{-1} = r^{-exponent} there, so with
        # exponent = d the q-th moment diverges under refinement iff q >= 1.
        e = p["exponent"]
        centers = [_cell_centers_1d(n, h) - n * h / 2.0 for _ in range(d)]
        r2 = np.zeros((n,) * d)
        for ax in range(d):
            r2 = r2 + centers[ax].reshape((1,) * ax + (n,) + (1,) * (d - 1 - ax)) ** 2
        r = np.sqrt(r2)
        g = np.where(r <= 1.0, np.maximum(r, h) ** e, 1.0)
        return _diagonal_field([g] * d, d, n, h, spec.model)

    raise ConfigurationError(f"unknown model {spec.model!r}")


@dataclass
class MomentReport:
    """Empirical check of the degeneracy budget 1/p + 1/q < 2/d."""

    p: float
    q: float
    emp_lambda_inv_q: float
    emp_Lambda_p: float
    condition_value: float
    threshold: float
    admissible: bool

    def to_dict(self):
        return {
            "p": self.p, "q": self.q,
            "emp_lambda_inv_q": self.emp_lambda_inv_q,
            "emp_Lambda_p": self.emp_Lambda_p,
            "condition_value": self.condition_value,
            "threshold": self.threshold,
            "admissible": bool(self.admissible),
        }


def moment_condition_value(p, q):
    inv = lambda r: 0.0 if np.isinf(r) else 1.0 / r
    return inv(p) + inv(q)


def validate_moments(field: CoefficientField, p: float, q: float) -> MomentReport:
    """Empirical moments of Lambda^p and lambda^{-q} plus the admissibility flag.

    p or q may be inf, read as the essential sup over cells. Divergence is
    reported (admissible=False through non-finite moments), never raised.
    """
    p, q = float(p), float(q)
    if p < 1 or q < 1:
        raise ConfigurationError("moment exponents must satisfy p, q >= 1")
    with np.errstate(over="ignore", divide="ignore"):
        if np.isinf(q):
            emp_l = float(np.max(1.0 / field.lam))
        else:
            emp_l = float(np.mean(field.lam ** (-q)))
        if np.isinf(p):
            emp_L = float(np.max(field.Lam))
        else:
            emp_L = float(np.mean(field.Lam ** p))
    cond = moment_condition_value(p, q)
    thr = 2.0 / field.d
    ok = bool(cond < thr and np.isfinite(emp_l) and np.isfinite(emp_L))
    return MomentReport(p, q, emp_l, emp_L, cond, thr, ok)


def moment_refinement_sweep(spec: EnvironmentSpec, p: float, q: float,
                            sizes, spacing_of=None):
    """validate_moments across grid refinements of the same spec.

    Returns (reports, diverging) where diverging means the lambda^{-q} or
    Lambda^p empirical means grow without sign of saturating (last-step growth
    above 2% per size doubling). This is how a finite grid detects a moment
    that only diverges in the refinement limit (the trap preset at q >= 1).
    """
    sizes = list(sizes)
    if sorted(sizes) != sizes or len(sizes) < 3:
        raise ConfigurationError("need >= 3 increasing sizes")
    if spacing_of is None:
        spacing_of = lambda n: 1.0 / n
    reports = [validate_moments(generate_field(spec, n, spacing_of(n)), p, q)
               for n in sizes]
    lam_m = np.array([r.emp_lambda_inv_q for r in reports])
    Lam_m = np.array([r.emp_Lambda_p for r in reports])

    def grows(vals):
        if not np.all(np.isfinite(vals)):
            return True
        tail = vals[-3:]
        return bool(np.all(np.diff(tail) > 0.02 * tail[:-1]))

    return reports, (grows(lam_m) or grows(Lam_m))


def ball_cells(field: CoefficientField, center, radius, metric="torus"):
    """Boolean grid mask of cells whose centers lie strictly inside the ball.

    center is a cell index tuple; distances are between cell centers, wrapped
    around the torus so balls near the boundary stay balls.
    """
    n, h = field.cells_per_side, field.spacing
    if radius > n * h / 2.0 and metric == "torus":
        raise RangeError(f"radius {radius} exceeds half the box {n * h / 2.0}")
    d2 = np.zeros((n,) * field.d)
    for ax in range(field.d):
        delta = (np.arange(n) - center[ax]) * h
        if metric == "torus":
            side = n * h
            delta = (delta + side / 2.0) % side - side / 2.0
        d2 = d2 + (delta.reshape((1,) * ax + (n,) + (1,) * (field.d - 1 - ax))) ** 2
    return d2 < radius * radius


def doubling_diagnostic(field: CoefficientField, center, radii):
    """(R, volume-doubling ratio of Lambda, Muckenhaupt-type ratio) per R.

    ratio_Lambda = sum_{B_2R} Lambda / sum_{B_R} Lambda;
    muckenhaupt = avg_{B_R}(Lambda) * avg_{B_R}(lambda^{-1}).
    Purely diagnostic: the admitted environments need not be doubling at
    small scales, which is exactly what this lets one plot.
    """
    radii = list(radii)
    if sorted(radii) != radii:
        raise ConfigurationError("radii must be increasing")
    if radii and radii[-1] > field.box_side / 2.0:
        raise RangeError("largest radius exceeds half the box")
    out = []
    for r in radii:
        b = ball_cells(field, center, r)
        b2 = ball_cells(field, center, min(2.0 * r, field.box_side / 2.0))
        s1 = float(field.Lam[b].sum())
        s2 = float(field.Lam[b2].sum())
        ratio = s2 / s1 if s1 > 0 else np.inf
        if b.any():
            muck = float(field.Lam[b].mean() * (1.0 / field.lam[b]).mean())
        else:
            muck = np.nan
        out.append((float(r), ratio, muck))
    return out


def translate(field: CoefficientField, z) -> CoefficientField:
    """Shifted field: out(x) = in(x + z), exact on the torus."""
    z = [int(v) for v in np.atleast_1d(z)]
    if len(z) != field.d:
        raise ShapeError(f"offset has {len(z)} components for a {field.d}-d field")
    shift = tuple(-v for v in z)
    axes = tuple(range(field.d))
    return CoefficientField(
        field.d, field.cells_per_side, field.spacing,
        np.roll(field.entries, shift, axis=axes),
        np.roll(field.lam, shift, axis=axes),
        np.roll(field.Lam, shift, axis=axes),
        field.model,
    )


def check_eigen_bounds(field: CoefficientField, n_dirs=1000, seed=7,
                       rel_slack=1e-12):
    """Verify lambda |xi|^2 <= <a xi, xi> <= Lambda |xi|^2 on random directions.

    Returns the worst signed slack (negative = violation beyond tolerance).
    Cheap enough to run on full fields in tests.
    """
    rng = np.random.default_rng(seed)
    xis = rng.normal(size=(n_dirs, field.d))
    xis /= np.linalg.norm(xis, axis=1, keepdims=True)
    flat_entries = field.entries.reshape(-1, field.entries.shape[-1])
    lam = field.lam.ravel()
    Lam = field.Lam.ravel()
    worst = np.inf
    mats = np.zeros((flat_entries.shape[0], field.d, field.d))
    k = 0
    for i in range(field.d):
        for j in range(i, field.d):
            mats[:, i, j] = flat_entries[:, k]
            mats[:, j, i] = flat_entries[:, k]
            k += 1
    for xi in xis:
        quad = np.einsum("cij,i,j->c", mats, xi, xi)
        lo = quad - lam
        hi = Lam - quad
        scale = np.maximum(np.abs(quad), 1.0)
        worst = min(worst, float(np.min(lo / scale)), float(np.min(hi / scale)))
        if worst < -rel_slack:
            break
    return worst
