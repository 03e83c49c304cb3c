"""Variable-speed random walk simulation and invariance-principle statistics.

The walk jumps from cell x across the edge e at rate a_e / h^2 (exponential
holding with the cell's total rate, direction proportional to conductance) —
the Markov chain whose Dirichlet form is exactly the assembled discrete
energy, with uniform invariant measure on cells. Everything downstream of the
kernels lives here: the martingale/corrector decomposition of the position,
quadratic-variation accounting, endpoint covariance and Gaussianity tests,
additive-functional time changes, and ergodic occupation averages.

Positions are unwrapped (the walk explores the whole lattice; the field is
read modulo N), so displacement statistics see no torus artifacts until paths
wrap far enough to feel the periodic correlations.
"""

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import stats as sp_stats

from . import kernels
from ._rng import uniform_cells
from .corrector import CorrectorField
from .energy import assemble
from .environment import CoefficientField, tri_index
from .errors import (ConfigurationError, ConsistencyError, RangeError,
                     ShapeError, SingularityError, StatisticsError)
from .homogenize import EffectiveMatrix

_START_SALT = np.uint64(0x5354415254)   # start-cell stream
_MAX_EXPECTED_JUMPS = 5e12              # per path; clock/coordinate safety rail
_KEEP_JUMPS_BUDGET = 5e6


@dataclass
class WalkConfig:
    """Batch parameters: horizon, path count, seed, starts, record grid."""

    t_max: float
    n_paths: int
    seed: int
    start: tuple = None          # fixed start cell; None = uniform random
    record_times: tuple = None   # explicit grid; wins over record_stride
    record_stride: float = None  # else: stride, 2*stride, ..., t_max
    keep_jumps: bool = False

    def __post_init__(self):
        if not self.t_max > 0:
            raise ConfigurationError("t_max must be > 0")
        if self.n_paths < 1:
            raise ConfigurationError("need at least one path")
        if self.record_stride is not None and not self.record_stride > 0:
            raise ConfigurationError("record_stride must be > 0")

    def resolved_record_times(self):
        if self.record_times is not None:
            t = np.asarray(self.record_times, dtype=float)
            if t.ndim != 1 or t.size == 0:
                raise ConfigurationError("record_times must be a nonempty list")
            if np.any(t <= 0) or np.any(np.diff(t) <= 0):
                raise ConfigurationError("record_times must be positive and "
                                         "strictly increasing")
            if t[-1] > self.t_max * (1 + 1e-12):
                raise ConfigurationError("record_times exceed t_max")
            return t
        if self.record_stride is not None:
            n = int(math.floor(self.t_max / self.record_stride + 1e-9))
            if n < 1:
                raise ConfigurationError("record_stride exceeds t_max")
            return self.record_stride * np.arange(1, n + 1)
        return np.array([self.t_max])


@dataclass
class PathSample:
    """One path's recorded samples (views into the batch arrays)."""

    times: np.ndarray
    coords: np.ndarray           # (T, d) unwrapped integer cells
    cells: np.ndarray            # (T,) wrapped flat index
    start_coord: np.ndarray
    start_cell: int
    spacing: float
    y: np.ndarray = None         # (T, d) harmonic coordinates, if decomposed
    chi: np.ndarray = None
    qv: np.ndarray = None        # (T, d(d+1)/2) integrated QV density
    extras: dict = dc_field(default_factory=dict)
    jump_times: np.ndarray = None
    jump_cells: np.ndarray = None

    def positions(self):
        return self.coords * self.spacing

    def displacements(self):
        return (self.coords - self.start_coord) * self.spacing


@dataclass
class WalkResult:
    """All recorded samples of a batch plus the tables needed to re-run it."""

    field: CoefficientField
    config: WalkConfig
    record_times: np.ndarray
    start_cells: np.ndarray
    start_coords: np.ndarray
    pos: np.ndarray              # (P, T, d)
    cells: np.ndarray            # (P, T)
    njumps: np.ndarray
    field_hash: str
    backend: str
    qv: np.ndarray = None        # (P, T, d(d+1)/2) when correctors were given
    qv_hash: str = ""
    extras: dict = dc_field(default_factory=dict)   # name -> (P, T)
    y: np.ndarray = None
    chi: np.ndarray = None
    theta: np.ndarray = None     # per-cell weight when time-changed
    conservativeness: dict = None
    jumps: list = None
    _tables: tuple = dc_field(default=None, repr=False)
    _qv_fields: np.ndarray = dc_field(default=None, repr=False)
    _extra_fields: dict = dc_field(default=None, repr=False)

    @property
    def n_paths(self):
        return self.pos.shape[0]

    @property
    def d(self):
        return self.pos.shape[2]

    def displacements(self, time_index=-1):
        """(P, d) physical displacement at the given record index."""
        return (self.pos[:, time_index, :] - self.start_coords) * \
            self.field.spacing

    def path(self, i):
        jt = jc = None
        if self.jumps is not None:
            jt, jc = self.jumps[i]
        return PathSample(
            self.record_times, self.pos[i], self.cells[i],
            self.start_coords[i], int(self.start_cells[i]),
            self.field.spacing,
            None if self.y is None else self.y[i],
            None if self.chi is None else self.chi[i],
            None if self.qv is None else self.qv[i],
            {k: v[i] for k, v in self.extras.items()},
            jt, jc)

    def save_wlk1(self, path):
        from .formats import write_wlk1
        write_wlk1(path, self.d, self.record_times, self.pos)


def _rate_tables(form):
    """Flattened per-cell total rate, cumulative direction table, neighbors."""
    n, d, h = form.cells_per_side, form.d, form.spacing
    m = n ** d
    idx = np.arange(m).reshape(form.grid_shape)
    rates = np.empty((m, 2 * d))
    nbr = np.empty((m, 2 * d), dtype=np.int64)
    for ax in range(d):
        rates[:, 2 * ax] = (form.cond[ax] / h ** 2).ravel()
        rates[:, 2 * ax + 1] = (np.roll(form.cond[ax], 1, axis=ax) / h ** 2).ravel()
        nbr[:, 2 * ax] = np.roll(idx, -1, axis=ax).ravel()
        nbr[:, 2 * ax + 1] = np.roll(idx, 1, axis=ax).ravel()
    total = rates.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cump = np.cumsum(rates, axis=1) / total[:, None]
    cump[:, -1] = 1.0
    return total, cump, nbr


def _qv_density_fields(form, correctors):
    """Per-cell quadratic-variation densities f_kh, one flat field per pair
    (k <= h). Built so the exact cell average of f_kh equals d_kh: each edge
    contributes rate * (edge difference of y^k) * (edge difference of y^h)
    to both endpoints."""
    d, h = form.d, form.spacing
    npairs = d * (d + 1) // 2
    fields = np.zeros((npairs,) + form.grid_shape)
    dy = np.empty((d, d) + form.grid_shape)   # dy[k, ax] = forward diff of y^k
    for k in range(d):
        chi = correctors.chis[k]
        for ax in range(d):
            dy[k, ax] = -(np.roll(chi, -1, axis=ax) - chi)
            if ax == k:
                dy[k, ax] += h
    for k in range(d):
        for l in range(k, d):
            f = np.zeros(form.grid_shape)
            for ax in range(d):
                fwd = form.cond[ax] * dy[k, ax] * dy[l, ax]
                f += fwd + np.roll(fwd, 1, axis=ax)
            fields[tri_index(k, l, d)] = f / h ** 2
    return fields.reshape(npairs, -1)


def _check_corrector_hash(field_hash, correctors):
    if correctors.field_hash and field_hash and \
            correctors.field_hash != field_hash:
        raise ConsistencyError(
            "correctors belong to a different field (descriptor hash mismatch)")


def simulate_walk(field: CoefficientField, config: WalkConfig,
                  correctors: CorrectorField = None, cell_functions=None,
                  backend=None) -> WalkResult:
    """Run the conductance walk; optionally accumulate quadratic variation
    (needs the correctors) and extra per-cell occupation integrals.

    Strict ellipticity is enforced: the trap preset and any field with a
    (near-)zero-rate cell are refused. Per-path random streams split off the
    master seed make the batch reproducible regardless of scheduling.
    """
    if field.model == "bessel_trap":
        raise SingularityError(
            "bessel_trap fields are refused: the walk freezes near the "
            "vanishing-conductance center")
    form = assemble(field)
    total, cump, nbr = _rate_tables(form)
    med = float(np.median(total))
    if med <= 0 or float(total.min()) < 1e-12 * med:
        raise SingularityError(
            f"(near-)zero-rate cell: min total rate {total.min():.3e} vs "
            f"median {med:.3e}")
    return _run_tables(field, form, config, (total, cump, nbr), correctors,
                       cell_functions, backend, theta=None)


def _run_tables(field, form, config, tables, correctors, cell_functions,
                backend, theta):
    total, cump, nbr = tables
    rec_times = config.resolved_record_times()
    if float(total.max()) * config.t_max > _MAX_EXPECTED_JUMPS:
        raise RangeError(
            "horizon too long for 64-bit clocks/coordinates: expected jumps "
            f"per path ~{total.max() * config.t_max:.2e}")
    m = total.size
    d = field.d
    p = config.n_paths
    if config.start is not None:
        cell0 = np.ravel_multi_index(
            tuple(np.mod(config.start, field.cells_per_side)),
            field.grid_shape)
        starts = np.full(p, cell0, dtype=np.int64)
    else:
        starts = uniform_cells(np.uint64(config.seed), _START_SALT, p, m)
    start_coords = np.stack(
        np.unravel_index(starts, field.grid_shape), axis=1).astype(np.int64)

    gstack = []
    qv_fields = None
    field_hash = field.descriptor_hash()
    if correctors is not None:
        _check_corrector_hash(field_hash, correctors)
        qv_fields = _qv_density_fields(form, correctors)
        if theta is not None:
            qv_fields = qv_fields / theta.reshape(1, -1)
        gstack.append(qv_fields)
    names = sorted(cell_functions) if cell_functions else []
    extra_fields = {}
    for name in names:
        g = np.asarray(cell_functions[name], dtype=float)
        if g.shape != field.grid_shape:
            raise ShapeError(f"cell function {name!r} has shape {g.shape}, "
                             f"grid is {field.grid_shape}")
        extra_fields[name] = g.reshape(-1)
        gstack.append(g.reshape(1, -1))
    gfields = np.vstack(gstack) if gstack else np.zeros((0, m))

    pos, cells, gints, njumps = kernels.run_walk(
        total, cump, nbr, starts, start_coords, rec_times, gfields,
        np.uint64(config.seed), backend=backend)

    npairs = d * (d + 1) // 2
    off = 0
    qv = None
    if correctors is not None:
        qv = gints[:, :, :npairs]
        off = npairs
    extras = {name: gints[:, :, off + i] for i, name in enumerate(names)}

    jumps = None
    if config.keep_jumps:
        est = float(total.max()) * config.t_max * p
        if est > _KEEP_JUMPS_BUDGET:
            raise ConfigurationError(
                f"keep_jumps on ~{est:.1e} expected jumps; reduce the run")
        jumps = []
        for i in range(p):
            _, _, _, jt, jc = kernels.walk_one_python(
                total, cump, nbr, starts[i], start_coords[i], rec_times,
                gfields, np.uint64(config.seed), i)
            jumps.append((jt, jc))

    return WalkResult(
        field=field, config=config, record_times=rec_times,
        start_cells=starts, start_coords=start_coords, pos=pos, cells=cells,
        njumps=njumps, field_hash=field_hash,
        backend=backend or kernels.active_backend(),
        qv=qv, qv_hash=correctors.field_hash if correctors is not None else "",
        extras=extras, theta=theta, jumps=jumps,
        _tables=(total, cump, nbr), _qv_fields=qv_fields,
        _extra_fields=extra_fields)


@dataclass
class QVReport:
    """Martingale decomposition diagnostics over a batch."""

    mean_qv_over_t: np.ndarray    # (d, d) mean <M^k, M^l>_t / t at the horizon
    target: np.ndarray            # D, when supplied
    rel_errors: np.ndarray
    reconstruction_max: float     # max |X - y - chi| over paths and times
    increment_correlation: float  # worst |corr| of consecutive y-increments
    n_paths: int

    def to_dict(self):
        return {
            "mean_qv_over_t": self.mean_qv_over_t.tolist(),
            "target": None if self.target is None else self.target.tolist(),
            "rel_errors": None if self.rel_errors is None
            else self.rel_errors.tolist(),
            "reconstruction_max": self.reconstruction_max,
            "increment_correlation": self.increment_correlation,
            "n_paths": self.n_paths,
        }


def martingale_decomposition(result: WalkResult,
                             correctors: CorrectorField,
                             target: EffectiveMatrix = None) -> QVReport:
    """Record y(X_t) = X_t - chi(X_t) along every path and audit the
    martingale structure.

    Mutates the result (fills .y and .chi) and returns the report: mean
    quadratic variation per unit time (against the effective matrix if
    given), the decomposition reconstruction error, and the worst
    correlation between consecutive y-increments (a stand-in for the
    martingale's uncorrelated increments).
    """
    _check_corrector_hash(result.field_hash, correctors)
    if result.qv is not None and result.qv_hash and correctors.field_hash \
            and result.qv_hash != correctors.field_hash:
        raise ConsistencyError("walk carries QV integrals from different "
                               "correctors")
    h = result.field.spacing
    d = result.d
    n = result.field.cells_per_side
    wrapped = np.mod(result.pos, n)
    flat = np.zeros(result.pos.shape[:2], dtype=np.int64)
    for ax in range(d):
        flat = flat * n + wrapped[:, :, ax]
    chi = np.stack([correctors.chis[k].ravel()[flat] for k in range(d)],
                   axis=2)
    x_phys = result.pos * h
    y = x_phys - chi
    result.y = y
    result.chi = chi
    recon = float(np.max(np.abs(x_phys - (y + chi))))

    # y-increments between consecutive records (incl. from the start)
    chi0 = np.stack([correctors.chis[k].ravel()[result.start_cells]
                     for k in range(d)], axis=1)
    y0 = result.start_coords * h - chi0
    yy = np.concatenate([y0[:, None, :], y], axis=1)
    inc = np.diff(yy, axis=1)          # (P, T, d)
    worst = 0.0
    if inc.shape[1] >= 2:
        for k in range(d):
            for t in range(inc.shape[1] - 1):
                a, b = inc[:, t, k], inc[:, t + 1, k]
                sa, sb = a.std(), b.std()
                if sa > 0 and sb > 0:
                    c = float(np.corrcoef(a, b)[0, 1])
                    worst = max(worst, abs(c))

    if result.qv is None:
        raise ConfigurationError(
            "walk was simulated without correctors: no quadratic-variation "
            "integrals to report")
    t_last = result.record_times[-1]
    mean_pairs = result.qv[:, -1, :].mean(axis=0) / t_last
    mqv = np.zeros((d, d))
    for k in range(d):
        for l in range(k, d):
            mqv[k, l] = mqv[l, k] = mean_pairs[tri_index(k, l, d)]
    rel = None
    tgt = None
    if target is not None:
        tgt = target.D
        scale = np.maximum(np.abs(tgt), np.abs(tgt).max() * 1e-3 + 1e-300)
        rel = np.abs(mqv - tgt) / scale
    return QVReport(mqv, tgt, rel, recon, worst, result.n_paths)


@dataclass
class CLTReport:
    """Endpoint Gaussianity and covariance against the effective matrix."""

    times: np.ndarray
    covariances: list             # (d, d) per time
    target: np.ndarray
    rel_errors: list              # max-entry relative error per time
    ks_rows: list                 # (t, xi, statistic, p_value)
    qv_ratio: np.ndarray          # mean QV / t vs target diag, or None
    n_paths: int

    def to_dict(self):
        return {
            "times": self.times.tolist(),
            "covariances": [c.tolist() for c in self.covariances],
            "target": self.target.tolist(),
            "rel_errors": [float(e) for e in self.rel_errors],
            "ks": [{"t": float(t), "xi": list(map(float, xi)),
                    "statistic": float(s), "p_value": float(p)}
                   for t, xi, s, p in self.ks_rows],
            "qv_ratio": None if self.qv_ratio is None
            else self.qv_ratio.tolist(),
            "n_paths": self.n_paths,
        }

    def min_p_value(self):
        return min(p for _, _, _, p in self.ks_rows)


def default_directions(d):
    dirs = [np.eye(d)[k] for k in range(d)]
    if d >= 2:
        dirs.append((np.eye(d)[0] + np.eye(d)[1]) / math.sqrt(2.0))
    return dirs


def clt_statistics(result: WalkResult, target: EffectiveMatrix,
                   eval_times=None, directions=None,
                   min_paths=1000) -> CLTReport:
    """Empirical endpoint covariance and per-direction KS tests.

    The scaling-limit covariance of displacements at time t is t*D; each
    direction xi is tested via xi . X_t / sqrt(t xi' D xi) against the
    standard normal.
    """
    if result.n_paths < min_paths:
        raise StatisticsError(
            f"{result.n_paths} paths < required {min_paths}")
    times = result.record_times if eval_times is None \
        else np.asarray(eval_times, dtype=float)
    indices = []
    for t in times:
        where = np.nonzero(np.isclose(result.record_times, t, rtol=1e-12))[0]
        if where.size == 0:
            raise ConfigurationError(f"time {t} was not recorded")
        indices.append(int(where[0]))
    if directions is None:
        directions = default_directions(result.d)
    covs, rels, ks = [], [], []
    for t, ti in zip(times, indices):
        disp = result.displacements(ti)
        cov = np.cov(disp.T) if result.d > 1 else \
            np.atleast_2d(np.var(disp[:, 0], ddof=1))
        covs.append(cov)
        tgt = t * target.D
        rels.append(float(np.max(np.abs(cov - tgt)) / np.max(np.abs(tgt))))
        for xi in directions:
            xi = np.asarray(xi, dtype=float)
            denom = math.sqrt(t * float(xi @ target.D @ xi))
            z = disp @ xi / denom
            stat, pval = sp_stats.kstest(z, "norm")
            ks.append((float(t), xi, float(stat), float(pval)))
    qv_ratio = None
    if result.qv is not None:
        t_last = result.record_times[-1]
        pairs = result.qv[:, -1, :].mean(axis=0) / t_last
        diag = np.array([pairs[tri_index(k, k, result.d)]
                         for k in range(result.d)])
        qv_ratio = diag / np.diag(target.D)
    return CLTReport(np.asarray(times, dtype=float), covs, target.D, rels,
                     ks, qv_ratio, result.n_paths)


@dataclass
class TimeChangeSpec:
    """Additive-functional clock: follow the walk on the time scale where
    one unit costs theta(x) per unit of original time at cell x."""

    theta: object                 # scalar or per-cell grid

    def resolve(self, field: CoefficientField):
        th = np.asarray(self.theta, dtype=float)
        if th.ndim == 0:
            th = np.full(field.grid_shape, float(th))
        if th.shape != field.grid_shape:
            raise ShapeError(f"theta shape {th.shape} vs grid "
                             f"{field.grid_shape}")
        if not np.all(np.isfinite(th)) or np.any(th <= 0):
            raise ConfigurationError("theta must be positive and finite")
        return th


def time_change(result: WalkResult, spec: TimeChangeSpec,
                backend=None) -> WalkResult:
    """Re-run the batch on the time-changed clock.

    The jump chain is untouched (direction probabilities never see theta);
    holding rates at cell x are divided by theta(x). Same seed, same start
    cells, same record grid — a constant theta = c therefore reproduces the
    original paths sampled at times t/c, bit-for-bit when c is a power of
    two. Quadratic-variation integrands are divided by theta (the QV of the
    changed martingale runs on the changed clock) and the conservativeness
    diagnostic — the occupation average of 1/theta, which converges to
    1/avg(theta) — is attached to the result.
    """
    theta = spec.resolve(result.field)
    th_flat = theta.ravel()
    total, cump, nbr = result._tables
    new_total = total / th_flat

    config = result.config
    rec_times = result.record_times
    gstack = []
    qv_fields = None
    if result._qv_fields is not None:
        qv_fields = result._qv_fields / th_flat.reshape(1, -1)
        gstack.append(qv_fields)
    names = sorted(result._extra_fields) if result._extra_fields else []
    for name in names:
        gstack.append(result._extra_fields[name].reshape(1, -1))
    gstack.append((1.0 / th_flat).reshape(1, -1))
    gfields = np.vstack(gstack)

    if float(new_total.max()) * config.t_max > _MAX_EXPECTED_JUMPS:
        raise RangeError("time-changed clock overflows the jump budget")

    pos, cells, gints, njumps = kernels.run_walk(
        new_total, cump, nbr, result.start_cells, result.start_coords,
        rec_times, gfields, np.uint64(config.seed), backend=backend)

    npairs = result.d * (result.d + 1) // 2
    off = 0
    qv = None
    if qv_fields is not None:
        qv = gints[:, :, :npairs]
        off = npairs
    extras = {name: gints[:, :, off + i] for i, name in enumerate(names)}
    theta_inv_int = gints[:, :, off + len(names)]
    extras["theta_inv"] = theta_inv_int
    t_last = rec_times[-1]
    vals = theta_inv_int[:, -1] / t_last
    cons = {
        "value": float(vals.mean()),
        "stderr": float(vals.std(ddof=1) / math.sqrt(len(vals)))
        if len(vals) > 1 else 0.0,
        "target": float(1.0 / theta.mean()),
    }

    return WalkResult(
        field=result.field, config=config, record_times=rec_times,
        start_cells=result.start_cells, start_coords=result.start_coords,
        pos=pos, cells=cells, njumps=njumps, field_hash=result.field_hash,
        backend=backend or kernels.active_backend(),
        qv=qv, qv_hash=result.qv_hash,
        extras=extras, theta=theta,
        conservativeness=cons,
        _tables=(new_total, cump, nbr), _qv_fields=qv_fields,
        _extra_fields=result._extra_fields)


def environment_average(result: WalkResult, name: str,
                        horizon_factor=100.0):
    """Time-average of a recorded per-cell function along the batch.

    Returns (mean over paths of (1/t) * integral, standard error). With
    uniform random starts the occupation measure is stationary and the
    estimate is unbiased at every horizon; for a fixed start the horizon must
    cover horizon_factor times the slow-mode relaxation time of the box.
    """
    if name not in result.extras:
        raise ConfigurationError(
            f"no occupation integral named {name!r}; available: "
            f"{sorted(result.extras)}")
    if result.config.start is not None:
        lam_inv = float(np.mean(1.0 / result.field.lam))
        proxy = result.field.box_side ** 2 * lam_inv / (4.0 * math.pi ** 2)
        if result.config.t_max < horizon_factor * proxy:
            raise StatisticsError(
                f"horizon {result.config.t_max} below {horizon_factor} x "
                f"mixing proxy {proxy:.3g} for a fixed start")
    t_last = result.record_times[-1]
    vals = result.extras[name][:, -1] / t_last
    mean = float(vals.mean())
    stderr = float(vals.std(ddof=1) / math.sqrt(len(vals))) \
        if len(vals) > 1 else 0.0
    return mean, stderr
