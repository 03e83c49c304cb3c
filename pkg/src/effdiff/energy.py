"""Discrete Dirichlet form and the iteration-exponent bookkeeping.

The energy of the graph with per-edge conductances is

    E(u, v) = h^{d-2} * sum_edges a_e (du)_e (dv)_e,

where the edge difference (du)_e for the edge (x, x+e_i) is
u(x+e_i) - u(x) + xi_i * h when u carries an affine slope xi on top of its
periodic cell part. Edge conductances are directional harmonic means of the
incident cells' diagonal coefficients, which composes 1D layers exactly
(series resistors) — the sharpest available desk-scale oracle.

Norm conventions (both are used, every caller states which):
  * unnormalized:  ||u||_r = (sum_cells h^d |u|^r)^(1/r)
  * ball-average:  ||u||_{B,r} = (mean_{cells in B} |u|^r)^(1/r)
with r = inf meaning the max. Powers r in (0,1) are accepted (power means,
not norms).
"""

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .environment import CoefficientField, moment_condition_value
from .errors import ConfigurationError, ShapeError, UndefinedRatioError


@dataclass
class DiscreteDirichletForm:
    """Edge-conductance energy on the periodic grid.

    cond[ax][x] is the conductance of the (undirected) edge between cell x and
    cell x + e_ax; periodic wrap-around included.
    """

    d: int
    cells_per_side: int
    spacing: float
    cond: np.ndarray  # shape (d,) + (N,)*d
    field_hash: str = ""

    @property
    def volume(self):
        return (self.cells_per_side * self.spacing) ** self.d

    @property
    def grid_shape(self):
        return (self.cells_per_side,) * self.d

    def diagonal(self):
        """Diagonal of the associated graph Laplacian (Jacobi preconditioner)."""
        scale = self.spacing ** (self.d - 2)
        diag = np.zeros(self.grid_shape)
        for ax in range(self.d):
            diag += self.cond[ax] + np.roll(self.cond[ax], 1, axis=ax)
        return scale * diag

    def apply(self, u):
        """Matrix-vector product of the graph Laplacian with conductances."""
        if u.shape != self.grid_shape:
            raise ShapeError(f"function shape {u.shape} vs grid {self.grid_shape}")
        scale = self.spacing ** (self.d - 2)
        out = np.zeros_like(u)
        for ax in range(self.d):
            c_f = self.cond[ax]
            c_b = np.roll(c_f, 1, axis=ax)
            out += c_f * (u - np.roll(u, -1, axis=ax))
            out += c_b * (u - np.roll(u, 1, axis=ax))
        return scale * out

    def divergence_rhs(self, slope):
        """Right-hand side b(x) = E(pi_xi, basis_x): the discrete divergence of
        a * slope, so that solutions of L u = b satisfy E(u, phi) = E(pi, phi)."""
        scale = self.spacing ** (self.d - 1)
        b = np.zeros(self.grid_shape)
        for ax in range(self.d):
            if slope[ax] != 0.0:
                b += slope[ax] * (np.roll(self.cond[ax], 1, axis=ax) - self.cond[ax])
        return scale * b


def assemble(field: CoefficientField) -> DiscreteDirichletForm:
    """Harmonic-mean edge conductances from the per-cell diagonal coefficients.

    Off-diagonal cell entries do not enter the 2d-neighbor stencil (all presets
    are axis-aligned, so nothing is lost; full tensors are out of scope).
    """
    cond = np.zeros((field.d,) + field.grid_shape)
    for ax in range(field.d):
        a = field.diag(ax)
        an = np.roll(a, -1, axis=ax)
        s = a + an
        with np.errstate(invalid="ignore", divide="ignore"):
            cond[ax] = np.where(s > 0, 2.0 * a * an / np.where(s > 0, s, 1.0), 0.0)
    return DiscreteDirichletForm(field.d, field.cells_per_side, field.spacing,
                                 cond, field.descriptor_hash())


def _as_slope_and_values(u, grid_shape, d):
    """Accept ndarray (periodic part only) or (slope, values) with values=None
    meaning a purely affine function."""
    if isinstance(u, np.ndarray):
        return np.zeros(d), u
    slope, values = u
    slope = np.asarray(slope, dtype=float)
    if slope.shape != (d,):
        raise ShapeError(f"slope shape {slope.shape}, expected ({d},)")
    if values is None:
        values = np.zeros(grid_shape)
    return slope, values


def energy(form: DiscreteDirichletForm, u, v) -> float:
    """Bilinear energy E(u, v); u, v are periodic grids or (slope, grid) pairs."""
    xi_u, pu = _as_slope_and_values(u, form.grid_shape, form.d)
    xi_v, pv = _as_slope_and_values(v, form.grid_shape, form.d)
    if pu.shape != form.grid_shape or pv.shape != form.grid_shape:
        raise ShapeError(f"function shapes {pu.shape}/{pv.shape} vs grid "
                         f"{form.grid_shape}")
    h = form.spacing
    scale = h ** (form.d - 2)
    total = 0.0
    for ax in range(form.d):
        du = np.roll(pu, -1, axis=ax) - pu + xi_u[ax] * h
        dv = np.roll(pv, -1, axis=ax) - pv + xi_v[ax] * h
        total += float(np.sum(form.cond[ax] * du * dv))
    return scale * total


# --------------------------------------------------------------------------
# norms


def norm_unnormalized(values, h, d, r):
    values = np.abs(np.asarray(values, dtype=float))
    if np.isinf(r):
        return float(values.max())
    return float((h ** d * np.sum(values ** r)) ** (1.0 / r))


def ball_norm(values, mask, r):
    """Power mean over the cells selected by `mask` (cell-average convention)."""
    sel = np.abs(np.asarray(values, dtype=float)[mask])
    if sel.size == 0:
        return 0.0
    if np.isinf(r):
        return float(sel.max())
    return float(np.mean(sel ** r) ** (1.0 / r))


def radial_cutoff(grid_shape, spacing, center, r_inner, r_outer):
    """Piecewise-linear radial ramp: 1 inside r_inner, 0 outside r_outer,
    slope 1/(r_outer - r_inner) in between (the iteration's cutoff shape)."""
    if not r_outer > r_inner >= 0:
        raise ConfigurationError("need 0 <= r_inner < r_outer")
    n = grid_shape[0]
    d = len(grid_shape)
    side = n * spacing
    d2 = np.zeros(grid_shape)
    for ax in range(d):
        delta = (np.arange(n) - center[ax]) * spacing
        delta = (delta + side / 2.0) % side - side / 2.0
        d2 = d2 + delta.reshape((1,) * ax + (n,) + (1,) * (d - 1 - ax)) ** 2
    r = np.sqrt(d2)
    return np.clip((r_outer - r) / (r_outer - r_inner), 0.0, 1.0)


# --------------------------------------------------------------------------
# iteration exponents


def rho_exponent(q, d):
    """Sobolev conjugate of 2q/(q+1): rho = 2qd/(q(d-2)+d)."""
    if d < 1:
        raise ConfigurationError("d must be >= 1")
    if np.isinf(q):
        if d <= 2:
            return math.inf
        return 2.0 * d / (d - 2.0)
    denom = q * (d - 2.0) + d
    if denom <= 0:
        # 2q/(q+1) >= d (only possible for d = 1): no Sobolev loss at all
        return math.inf
    return 2.0 * q * d / denom


def p_star(p):
    """Hoelder conjugate p/(p-1)."""
    if np.isinf(p):
        return 1.0
    if p <= 1.0:
        return math.inf
    return p / (p - 1.0)


@dataclass
class MoserSchedule:
    """Every exponent the sup-norm iteration needs, precomputed.

    kappa/kappa_prime carry exact closed forms of their geometric series (the
    truncated partial sums and tail bounds are kept alongside as diagnostics);
    gamma is an infinite product and is truncated at K terms with a recorded
    tail bound.
    """

    p: float
    q: float
    d: int
    alpha: float
    p_star: float
    rho: float
    theta: float
    kappa: float
    gamma: float
    gamma_prime: float
    kappa_prime: float
    K: int
    kappa_partial: float
    kappa_tail_bound: float
    gamma_tail_bound: float
    kappa_prime_partial: float
    kappa_prime_tail_bound: float
    alphas: np.ndarray = dc_field(repr=False, default=None)

    def sigma_k(self, k, sigma, sigma_prime):
        """Ball-shrinking schedule sigma' + 2^{-k+1}(sigma - sigma')."""
        return sigma_prime + 2.0 ** (-k + 1) * (sigma - sigma_prime)

    def to_dict(self):
        return {
            "p": self.p, "q": self.q, "d": self.d, "alpha": self.alpha,
            "p_star": self.p_star, "rho": self.rho, "theta": self.theta,
            "kappa": self.kappa, "gamma": self.gamma,
            "gamma_prime": self.gamma_prime, "kappa_prime": self.kappa_prime,
            "K": self.K, "kappa_partial": self.kappa_partial,
            "kappa_tail_bound": self.kappa_tail_bound,
            "gamma_tail_bound": self.gamma_tail_bound,
            "kappa_prime_partial": self.kappa_prime_partial,
            "kappa_prime_tail_bound": self.kappa_prime_tail_bound,
        }


def moser_exponents(p, q, d, alpha=None, K=64) -> MoserSchedule:
    """All iteration exponents for admissible (p, q, d).

    alpha is the norm index of the final (low-integrability) bound; defaults
    to 2 p* — the choice the sublinearity argument uses. K >= 16 controls the
    recorded truncations.
    """
    p, q = float(p), float(q)
    if p < 1 or q < 1:
        raise ConfigurationError("need p, q >= 1")
    if K < 16:
        raise ConfigurationError("need truncation K >= 16")
    cond = moment_condition_value(p, q)
    if not cond < 2.0 / d:
        raise ConfigurationError(
            f"(p={p}, q={q}, d={d}) inadmissible: 1/p + 1/q = {cond} is not "
            f"< 2/d = {2.0 / d}")
    ps = p_star(p)
    rho = rho_exponent(q, d)
    if alpha is None:
        alpha = 2.0 * ps
    alpha = float(alpha)
    if alpha <= 0:
        raise ConfigurationError("alpha must be > 0")
    if np.isinf(ps):
        # p = 1: no Hoelder room on the high side, the iteration cannot close
        ratio = math.inf
    elif np.isinf(rho):
        # rho = inf (q = inf in d <= 2, or d = 1): every iteration step gains
        # infinite integrability; represent with kappa = 0, gamma = 1.
        ratio = 0.0
    else:
        ratio = 2.0 * ps / rho
    if not ratio < 1.0:
        raise ConfigurationError(f"rho={rho} must exceed 2 p*={2 * ps}")

    ks = np.arange(1, K + 1, dtype=float)
    powers = ratio ** ks
    with np.errstate(divide="ignore"):
        alphas = np.where(powers > 0, 1.0 / powers, np.inf)

    kappa = 0.5 * ratio / (1.0 - ratio) if ratio > 0 else 0.0
    kappa_partial = 0.5 * float(powers.sum())
    kappa_tail = 0.5 * ratio ** (K + 1) / (1.0 - ratio) if ratio > 0 else 0.0

    gamma = float(np.prod(1.0 - powers))
    tail_sum = ratio ** (K + 1) / (1.0 - ratio) if ratio > 0 else 0.0
    gamma_tail = gamma * tail_sum  # |gamma_trunc - gamma_inf| <= this

    if np.isinf(rho) or alpha >= rho:
        # One Jensen step suffices: same exponents as the sup-norm bound.
        theta = 1.0
        gamma_prime = gamma
        kappa_prime = kappa
        kp_partial = kappa_partial
        kp_tail = kappa_tail
    else:
        theta = alpha / rho
        gamma_prime = gamma * theta / (1.0 - gamma + gamma * theta)
        kappa_prime = kappa / theta ** 2  # kappa * sum k (1-theta)^(k-1)
        x = 1.0 - theta
        series = float(np.sum(ks * x ** (ks - 1.0)))
        kp_partial = kappa * series
        kp_tail = kappa * (x ** K) * (K * (1 - x) + 1) / (1 - x) ** 2

    return MoserSchedule(
        p=p, q=q, d=d, alpha=alpha, p_star=ps, rho=rho, theta=theta,
        kappa=kappa, gamma=gamma, gamma_prime=gamma_prime,
        kappa_prime=kappa_prime, K=K, kappa_partial=kappa_partial,
        kappa_tail_bound=kappa_tail, gamma_tail_bound=gamma_tail,
        kappa_prime_partial=kp_partial, kappa_prime_tail_bound=kp_tail,
        alphas=alphas,
    )


def sobolev_ratio(form: DiscreteDirichletForm, field: CoefficientField,
                  u: np.ndarray, ball_mask: np.ndarray, q=2.0) -> float:
    """||u||_rho^2 / (||1_B lambda^{-1}||_q * E(u,u)), unnormalized norms.

    A numerical stand-in for the local Sobolev constant: finite for every
    compactly supported nonzero u, and (empirically) bounded by a dimensional
    envelope. u must vanish outside the ball.
    """
    if u.shape != form.grid_shape:
        raise ShapeError(f"u shape {u.shape} vs grid {form.grid_shape}")
    if np.any(u[~ball_mask] != 0.0):
        raise ConfigurationError("u must vanish outside the ball")
    if not np.any(u != 0.0):
        raise UndefinedRatioError("sobolev ratio of the zero function")
    h, d = form.spacing, form.d
    rho = rho_exponent(q, d)
    num = norm_unnormalized(u, h, d, rho) ** 2
    with np.errstate(divide="ignore"):
        lam_inv = np.where(ball_mask, 1.0 / field.lam, 0.0)
    weight = norm_unnormalized(lam_inv, h, d, q)
    e_uu = energy(form, u, u)
    return num / (weight * e_uu)
