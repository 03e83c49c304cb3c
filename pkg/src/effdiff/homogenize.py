"""Effective diffusivity, variational bounds, and sup-norm inequality audits.

The effective matrix is read off the harmonic coordinates,

    d_ij = 2 E(y^i, y^j) / volume,

which sits between the harmonic-mean lower bound 2 (avg lambda^{-1})^{-1} |xi|^2
and the zero-corrector upper bound 2 avg <a xi, xi> in every direction. The
audits evaluate both sides of the interior sup-norm estimate for solutions of
the corrector/Poisson problems and report the observed ratio envelopes; the
theory's constants are unknown, so tests assert stability, never magnitudes.
"""

import io
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .corrector import jacobi_preconditioner, solve_correctors
from .energy import MoserSchedule, assemble, ball_norm, energy
from .environment import (CoefficientField, EnvironmentSpec, ball_cells,
                          generate_field, tri_index)
from .errors import ConfigurationError, ConsistencyError
from .solver import pcg


@dataclass
class EffectiveMatrix:
    """Symmetric positive-definite D with solve-level error bars."""

    D: np.ndarray
    error_bars: np.ndarray
    field_hash: str
    asymmetry: float

    @property
    def d(self):
        return self.D.shape[0]

    def to_dict(self):
        return {
            "D": self.D.tolist(),
            "error_bars": self.error_bars.tolist(),
            "field_hash": self.field_hash,
            "asymmetry": self.asymmetry,
        }


def effective_matrix(form, correctors) -> EffectiveMatrix:
    """D from the corrector energies; hard failure if not positive definite."""
    if correctors.field_hash and form.field_hash and \
            correctors.field_hash != form.field_hash:
        raise ConsistencyError("correctors were solved on a different field")
    d = form.d
    vol = form.volume
    raw = np.zeros((d, d))
    pairs = []
    for k in range(d):
        slope = np.zeros(d)
        slope[k] = 1.0
        pairs.append((slope, -correctors.chis[k]))
    for i in range(d):
        for j in range(i, d):
            raw[i, j] = 2.0 * energy(form, pairs[i], pairs[j]) / vol
            raw[j, i] = raw[i, j]
    # The energy form is exactly symmetric, so asymmetry can only enter
    # through the residuals of the two solves; measure it that way.
    bnorm = np.zeros(d)
    cnorm = np.zeros(d)
    for k in range(d):
        slope = np.zeros(d)
        slope[k] = 1.0
        bnorm[k] = float(np.linalg.norm(form.divergence_rhs(slope)))
        cnorm[k] = float(np.linalg.norm(correctors.chis[k]))
    res = np.asarray(correctors.residuals, dtype=float)
    bars = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            bars[i, j] = 2.0 * (res[i] * bnorm[i] * cnorm[j]
                                + res[j] * bnorm[j] * cnorm[i]) / vol
    D = 0.5 * (raw + raw.T)
    asym = float(np.abs(raw - raw.T).max())
    evals = np.linalg.eigvalsh(D)
    if np.any(evals <= 0.0):
        err = ConsistencyError(
            f"effective matrix is not positive definite: eigenvalues {evals}")
        err.eigenvalues = evals
        raise err
    return EffectiveMatrix(D, bars, correctors.field_hash, asym)


def variational_bounds(field: CoefficientField, xi):
    """(lower, upper) for xi' D xi: harmonic-mean floor and zero-test ceiling."""
    xi = np.asarray(xi, dtype=float)
    lower = 2.0 * float(xi @ xi) / float(np.mean(1.0 / field.lam))
    quad = np.zeros(field.grid_shape)
    for i in range(field.d):
        for j in range(field.d):
            quad = quad + field.entries[..., tri_index(i, j, field.d)] * xi[i] * xi[j]
    upper = 2.0 * float(np.mean(quad))
    return lower, upper


@dataclass
class BoundsRow:
    xi: np.ndarray
    lower: float
    value: float
    upper: float
    ok: bool
    slack_lower: float
    slack_upper: float
    tight_lower: bool
    tight_upper: bool


@dataclass
class BoundsReport:
    rows: list
    all_ok: bool
    rel_slack: float

    def to_dict(self):
        return {
            "rel_slack": self.rel_slack,
            "all_ok": bool(self.all_ok),
            "rows": [{
                "xi": r.xi.tolist(), "lower": r.lower, "value": r.value,
                "upper": r.upper, "ok": bool(r.ok),
                "tight_lower": bool(r.tight_lower),
                "tight_upper": bool(r.tight_upper),
            } for r in self.rows],
        }


def check_bounds(D: EffectiveMatrix, field: CoefficientField, directions,
                 rel_slack=1e-9, tight_tol=1e-6) -> BoundsReport:
    """Evaluate the two-sided variational bounds per direction.

    Violations are recorded (ok=False), never raised; tightness flags mark
    directions where a bound is attained to tight_tol (layered media attain
    the lower bound along the layering axis).
    """
    rows = []
    for xi in directions:
        xi = np.asarray(xi, dtype=float)
        lower, upper = variational_bounds(field, xi)
        value = float(xi @ D.D @ xi)
        scale = max(abs(lower), abs(upper), abs(value), 1e-300)
        s_lo = (value - lower) / scale
        s_hi = (upper - value) / scale
        ok = (s_lo >= -rel_slack) and (s_hi >= -rel_slack)
        rows.append(BoundsRow(
            xi, lower, value, upper, ok, s_lo, s_hi,
            abs(value - lower) <= tight_tol * scale,
            abs(value - upper) <= tight_tol * scale,
        ))
    return BoundsReport(rows, all(r.ok for r in rows), rel_slack)


def random_directions(d, count, seed=0):
    rng = np.random.default_rng(seed)
    xis = rng.normal(size=(count, d))
    return xis / np.linalg.norm(xis, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# sup-norm inequality audits


def _ball_moment_prefactor(field, mask, schedule, sigma, sigma_prime):
    """((1 v ||lambda^{-1}||_{B,q} ||Lambda||_{B,p}) / (sigma-sigma')^2)^exponent
    without the exponent applied; returns the base. Ball norms are power means
    over the masked cells."""
    mq = ball_norm(1.0 / field.lam, mask, schedule.q)
    mp = ball_norm(field.Lam, mask, schedule.p)
    return max(1.0, mq * mp) / (sigma - sigma_prime) ** 2


@dataclass
class MoserAuditReport:
    """Observed lhs/rhs ratios of the corrector sup-norm estimate per scale."""

    R: float
    sigma_prime: float
    sigma: float
    seed: int
    schedule: MoserSchedule = dc_field(repr=False, default=None)
    rows: list = dc_field(default_factory=list)   # (epsilon, lhs, rhs_core, ratio)
    max_ratio: float = 0.0
    min_ratio: float = 0.0

    def ratios(self):
        return np.array([r[3] for r in self.rows])

    def to_csv(self, path_or_buf=None):
        buf = io.StringIO()
        buf.write("epsilon,lhs,rhs_core,ratio\n")
        for eps, lhs, rhs, ratio in self.rows:
            buf.write(f"{eps!r},{lhs!r},{rhs!r},{ratio!r}\n")
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        if isinstance(path_or_buf, (str, bytes)):
            with open(path_or_buf, "w") as fh:
                fh.write(text)
        else:
            path_or_buf.write(text)
        return text

    def envelope(self):
        """max/min spread of the finite ratios across the size sweep."""
        if self.min_ratio > 0:
            return self.max_ratio / self.min_ratio
        return math.inf if self.max_ratio > 0 else 1.0

    def to_dict(self):
        return {
            "R": self.R, "sigma_prime": self.sigma_prime, "sigma": self.sigma,
            "seed": self.seed,
            "schedule": self.schedule.to_dict() if self.schedule else None,
            "rows": [{"epsilon": float(e), "lhs": float(l),
                      "rhs_core": float(rc), "ratio": float(rt)}
                     for e, l, rc, rt in self.rows],
            "max_ratio": self.max_ratio, "min_ratio": self.min_ratio,
            "envelope": self.envelope(),
        }


def moser_audit(spec: EnvironmentSpec, schedule: MoserSchedule, R,
                sigma_prime, sigma, sizes, tol=1e-10, max_iter=20000,
                precond="auto") -> MoserAuditReport:
    """Audit the corrector sup-norm bound across grid refinements.

    Per size N (epsilon = 1/N): lhs = sup of |chi^1| over B(sigma' R);
    rhs_core = (prefactor)^kappa' * (||chi^1||_{B(sigma R), alpha}^gamma'
    v ||chi^1||), with the moment prefactor taken over the full B(R).
    Cell-average ball norms throughout. The unknown constant of the bound is
    exactly what max_ratio estimates.
    """
    if not 0.5 <= sigma_prime < sigma <= 1.0:
        raise ConfigurationError("need 1/2 <= sigma' < sigma <= 1")
    if not 0.0 < R <= 0.25:
        raise ConfigurationError("ball radius must lie in (0, 0.25]")
    sizes = list(sizes)
    if sorted(sizes) != sizes or len(sizes) < 1:
        raise ConfigurationError("sizes must be increasing and nonempty")
    rows = []
    for n in sizes:
        field = generate_field(spec, n, 1.0 / n)
        form = assemble(field)
        correctors = solve_correctors(form, tol=tol, max_iter=max_iter,
                                      precond=precond)
        chi = correctors.chis[0]
        center = (n // 2,) * spec.d
        m_full = ball_cells(field, center, R)
        m_outer = ball_cells(field, center, sigma * R)
        m_inner = ball_cells(field, center, sigma_prime * R)
        lhs = ball_norm(chi, m_inner, np.inf)
        base = _ball_moment_prefactor(field, m_full, schedule, sigma,
                                      sigma_prime)
        anorm = ball_norm(chi, m_outer, schedule.alpha)
        rhs = base ** schedule.kappa_prime * max(anorm ** schedule.gamma_prime,
                                                 anorm)
        if rhs == 0.0 and lhs > 0.0:
            raise ConsistencyError(
                f"sup-norm bound violated at N={n}: lhs={lhs} with zero rhs")
        ratio = lhs / rhs if rhs > 0.0 else 0.0
        rows.append((1.0 / n, lhs, rhs, ratio))
    ratios = [r[3] for r in rows]
    pos = [r for r in ratios if r > 0]
    return MoserAuditReport(float(R), float(sigma_prime), float(sigma),
                            spec.seed, schedule, rows,
                            max(ratios) if ratios else 0.0,
                            min(pos) if pos else 0.0)


def maximal_inequality_direct(form, field: CoefficientField, f_slope, center,
                              R, schedule: MoserSchedule, sigma=1.0,
                              sigma_prime=0.5, tol=1e-10, max_iter=20000):
    """Both sides of the interior sup-norm estimate for a Dirichlet solution.

    Solves E(u, phi) = -E(pi_f, phi) for all phi supported in the ball
    B(center, R), with u = 0 outside (so u is literally a solution in the
    ball), then returns

        lhs = sup_{B(sigma' R)} |u|,
        rhs_core = ((1 v ||lambda^{-1}||_{B,q}||Lambda||_{B,p})
                    / (sigma-sigma')^2)^kappa
                   * (||u||_{B(sigma R), rho}^gamma v ||u||_{B(sigma R), rho}).

    The restricted operator is positive definite (no constant in its kernel),
    so plain preconditioned CG applies without the mean-zero gauge.
    """
    if not 0.5 <= sigma_prime < sigma <= 1.0:
        raise ConfigurationError("need 1/2 <= sigma' < sigma <= 1")
    mask = ball_cells(field, center, R)
    if not mask.any():
        raise ConfigurationError("ball contains no cells")
    f_slope = np.asarray(f_slope, dtype=float)
    b = np.where(mask, -form.divergence_rhs(f_slope), 0.0)
    jac = jacobi_preconditioner(form)
    project = lambda u: np.where(mask, u, 0.0)
    matvec = lambda u: form.apply(u)
    u, _ = pcg(matvec, b, precond=jac, project=project, tol=tol,
               max_iter=max_iter)
    m_outer = ball_cells(field, center, sigma * R)
    m_inner = ball_cells(field, center, sigma_prime * R)
    lhs = ball_norm(u, m_inner, np.inf)
    base = _ball_moment_prefactor(field, mask, schedule, sigma, sigma_prime)
    rnorm = ball_norm(u, m_outer, schedule.rho)
    rhs = base ** schedule.kappa * max(rnorm ** schedule.gamma, rnorm)
    return float(lhs), float(rhs)
