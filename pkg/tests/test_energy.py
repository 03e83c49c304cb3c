"""Discrete Dirichlet form, norms, and the iteration-exponent calculator."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from effdiff.energy import (assemble, ball_norm, energy, moser_exponents,
                            norm_unnormalized, p_star, radial_cutoff,
                            rho_exponent, sobolev_ratio)
from effdiff.environment import EnvironmentSpec, ball_cells, generate_field
from effdiff.errors import (ConfigurationError, ShapeError,
                            UndefinedRatioError)


def make(spec, n=16):
    return generate_field(spec, n, 1.0 / n)


def grid_functions(n, max_dim=2):
    return hnp.arrays(np.float64, (n, n),
                      elements=st.floats(-5, 5, allow_nan=False))


# --------------------------------------------------------------------------
# assembly


def test_identity_assembly_is_unit_conductance():
    form = assemble(make(EnvironmentSpec.identity()))
    assert np.all(form.cond[0] == 1.0) and np.all(form.cond[1] == 1.0)


def test_edges_are_harmonic_means():
    field = make(EnvironmentSpec.checkerboard(1.0, 4.0, tile_cells=1), n=4)
    form = assemble(field)
    a = field.diag(0)
    expect = 2.0 * a * np.roll(a, -1, axis=0) / (a + np.roll(a, -1, axis=0))
    assert np.allclose(form.cond[0], expect, rtol=1e-15)
    # np.unique collapses the two phases: every edge crossesphases here
    assert np.all(form.cond[0] == pytest.approx(1.6))


def test_zero_coefficient_gives_zero_edge_not_nan():
    field = make(EnvironmentSpec.identity(), n=4)
    entries = field.entries.copy()
    entries[0, 0, :] = 0.0
    field = type(field)(field.d, field.cells_per_side, field.spacing,
                        entries, field.lam * 0, field.Lam, "custom")
    form = assemble(field)
    assert np.all(np.isfinite(form.cond))
    assert form.cond[0][0, 0] == 0.0


# --------------------------------------------------------------------------
# the bilinear form


@given(u=grid_functions(8), v=grid_functions(8), w=grid_functions(8),
       a=st.floats(-3, 3, allow_nan=False))
@settings(max_examples=25, deadline=None)
def test_energy_is_bilinear_and_symmetric(u, v, w, a):
    form = assemble(make(EnvironmentSpec.checkerboard(1.0, 4.0, tile_cells=2),
                         n=8))
    e = lambda x, y: energy(form, x, y)
    assert e(u, v) == pytest.approx(e(v, u), rel=1e-12, abs=1e-12)
    assert e(u + a * w, v) == pytest.approx(e(u, v) + a * e(w, v),
                                            rel=1e-9, abs=1e-9)
    assert e(u, u) >= -1e-12


@given(u=grid_functions(8))
@settings(max_examples=25, deadline=None)
def test_energy_cauchy_schwarz(u):
    form = assemble(make(EnvironmentSpec.heavy_tail(3.0, 3.0, seed=2), n=8))
    v = np.sin(np.arange(64)).reshape(8, 8)
    lhs = energy(form, u, v) ** 2
    rhs = energy(form, u, u) * energy(form, v, v)
    assert lhs <= rhs * (1 + 1e-10) + 1e-12


def test_constants_have_zero_energy():
    form = assemble(make(EnvironmentSpec.heavy_tail(3.0, 3.0, seed=1), n=8))
    c = np.full((8, 8), 3.7)
    assert energy(form, c, c) == pytest.approx(0.0, abs=1e-12)


def test_apply_is_the_riesz_representation():
    form = assemble(make(EnvironmentSpec.checkerboard(1.0, 4.0, tile_cells=2),
                         n=8))
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=(2, 8, 8))
    assert float(np.vdot(v, form.apply(u))) == pytest.approx(
        energy(form, u, v), rel=1e-12)


def test_divergence_rhs_represents_affine_energy():
    form = assemble(make(EnvironmentSpec.heavy_tail(3.0, 3.0, seed=5), n=8))
    rng = np.random.default_rng(1)
    xi = np.array([0.3, -1.2])
    for _ in range(5):
        phi = rng.normal(size=(8, 8))
        lhs = float(np.vdot(phi, form.divergence_rhs(xi)))
        rhs = energy(form, (xi, None), phi)
        assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_energy_accepts_affine_pairs():
    form = assemble(make(EnvironmentSpec.identity(), n=8))
    e1 = np.array([1.0, 0.0])
    # identity, unit slope: E = 2 * |xi|^2 is the constant-field energy
    val = energy(form, (e1, None), (e1, None))
    assert val == pytest.approx(1.0, rel=1e-12)  # |xi|^2 * volume here
    # mixed: affine vs grid function equals the divergence pairing
    rng = np.random.default_rng(2)
    phi = rng.normal(size=(8, 8))
    assert energy(form, (e1, None), phi) == pytest.approx(
        float(np.vdot(phi, form.divergence_rhs(e1))), rel=1e-12, abs=1e-12)


# --------------------------------------------------------------------------
# norms and cutoffs


def test_norms_scale_and_limits():
    u = np.array([[1.0, 2.0], [3.0, 4.0]])
    h = 0.5
    # r = 1: h^d * sum |u|
    assert norm_unnormalized(u, h, 2, 1.0) == pytest.approx(0.25 * 10.0)
    assert norm_unnormalized(u, h, 2, np.inf) == 4.0
    # power-mean monotonicity after volume normalization
    vol = (2 * h) ** 2
    prev = 0.0
    for r in (1.0, 2.0, 4.0, 8.0):
        cur = (norm_unnormalized(u, h, 2, r) ** r / vol) ** (1.0 / r)
        assert cur >= prev - 1e-12
        prev = cur


def test_ball_norm_is_a_cell_average_and_handles_edge_cases():
    vals = np.array([[1.0, 2.0], [3.0, 4.0]])
    mask = np.array([[True, True], [False, False]])
    assert ball_norm(vals, mask, 1.0) == pytest.approx(1.5)
    assert ball_norm(vals, mask, np.inf) == 2.0
    assert ball_norm(vals, np.zeros((2, 2), bool), 2.0) == 0.0


def test_radial_cutoff_profile():
    cut = radial_cutoff((64, 64), 1.0 / 64, (32, 32), 0.1, 0.2)
    f = make(EnvironmentSpec.identity(), n=64)
    inner = ball_cells(f, (32, 32), 0.1)
    outer = ball_cells(f, (32, 32), 0.2)
    assert np.all(cut[inner] == 1.0)
    assert np.all(cut[~outer] == 0.0)
    between = outer & ~inner
    assert np.all((cut[between] > 0) & (cut[between] < 1))
    # linear ramp: the cell 10 columns out sits at radius 10/64
    r = 10.0 / 64
    assert cut[32, 42] == pytest.approx((0.2 - r) / (0.2 - 0.1), rel=1e-12)


def test_radial_cutoff_needs_ordered_radii():
    with pytest.raises(ConfigurationError):
        radial_cutoff((16, 16), 1.0 / 16, (8, 8), 0.2, 0.1)


# --------------------------------------------------------------------------
# exponents


def test_rho_reference_values():
    assert rho_exponent(2.0, 2) == 4.0
    assert rho_exponent(3.0, 2) == 6.0          # 2q in d = 2
    assert rho_exponent(np.inf, 2) == math.inf
    assert rho_exponent(3.0, 3) == pytest.approx(3.0)
    assert rho_exponent(np.inf, 3) == pytest.approx(6.0)
    # d = 1: the embedding never loses integrability
    assert rho_exponent(1.0, 1) == math.inf
    assert rho_exponent(2.0, 1) == math.inf


def test_p_star_reference_values():
    assert p_star(3.0) == 1.5
    assert p_star(2.0) == 2.0
    assert p_star(np.inf) == 1.0
    assert p_star(1.0) == math.inf


def test_moser_schedule_p3_q2_d2():
    s = moser_exponents(3.0, 2.0, 2)
    assert s.p_star == 1.5 and s.rho == 4.0
    assert s.kappa == pytest.approx(1.5, abs=0)       # r = 3/4, r/(2(1-r))
    assert s.alpha == 3.0                              # default 2 p*
    assert s.theta == pytest.approx(0.75)
    assert s.kappa_prime == pytest.approx(1.5 / 0.75 ** 2)  # = 8/3
    assert s.kappa_prime == pytest.approx(8.0 / 3.0)
    # gamma = prod (1 - r^k) converges; truncation error is certified
    assert 0 < s.gamma < 1
    assert abs(s.kappa_partial - s.kappa) <= s.kappa_tail_bound * 1.0001
    assert 0 < s.gamma_prime < s.gamma
    # alpha_k = r^{-k} grows geometrically
    assert s.alphas[0] == pytest.approx(4.0 / 3.0)
    assert s.alphas[1] == pytest.approx((4.0 / 3.0) ** 2)


def test_moser_schedule_jensen_case():
    s = moser_exponents(3.0, 2.0, 2, alpha=4.0)   # alpha = rho
    assert s.theta == 1.0
    assert s.kappa_prime == s.kappa
    assert s.gamma_prime == s.gamma
    s2 = moser_exponents(3.0, 2.0, 2, alpha=10.0)
    assert s2.theta == 1.0


def test_moser_rejects_inadmissible_pairs():
    with pytest.raises(ConfigurationError):
        moser_exponents(2.0, 2.0, 2)     # 1/2 + 1/2 = 1 = 2/d, not strict
    with pytest.raises(ConfigurationError):
        moser_exponents(3.0, 2.0, 4)
    with pytest.raises(ConfigurationError):
        moser_exponents(3.0, 2.0, 2, K=8)
    # p = 1 passes the moment condition in d = 1 but the iteration ratio
    # 2 p* / rho is degenerate (p* = inf): must be refused, not accepted
    with pytest.raises(ConfigurationError):
        moser_exponents(1.0, 2.0, 1)


def test_moser_degenerate_rho_infinite_is_flat():
    s = moser_exponents(2.0, np.inf, 2)
    assert s.kappa == 0.0 and s.gamma == 1.0
    assert s.theta == 1.0 and s.kappa_prime == 0.0


@given(p=st.floats(2.1, 8.0), q=st.floats(1.1, 8.0))
@settings(max_examples=40, deadline=None)
def test_moser_exponents_are_consistent_when_admissible(p, q):
    if 1.0 / p + 1.0 / q >= 1.0:     # d = 2 admissibility
        return
    s = moser_exponents(p, q, 2)
    r = 2.0 * s.p_star / s.rho
    assert 0 < r < 1
    assert s.kappa == pytest.approx(0.5 * r / (1 - r), rel=1e-12)
    assert 0 < s.gamma <= 1
    assert 0 < s.theta <= 1
    assert s.kappa_prime >= s.kappa - 1e-12
    assert 0 < s.gamma_prime <= s.gamma + 1e-15


# --------------------------------------------------------------------------
# sobolev diagnostic


def bump_corpus(n):
    f = make(EnvironmentSpec.identity(), n=n)
    mask = ball_cells(f, (n // 2, n // 2), 0.25)
    cut = radial_cutoff((n, n), 1.0 / n, (n // 2, n // 2), 0.12, 0.24)
    yy, xx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    sx = np.sin(2 * np.pi * xx / n)
    corpus = [
        cut,
        cut ** 2,
        cut * sx,
        cut * (xx - n / 2) / n,
        cut * np.maximum(0, 1 - 8 * np.hypot(xx - n / 2, yy - n / 2) / n),
    ]
    return mask, corpus


@pytest.mark.parametrize("spec", [
    EnvironmentSpec.identity(),
    EnvironmentSpec.checkerboard(1.0, 4.0, tile_cells=2),
    EnvironmentSpec.heavy_tail(3.0, 3.0, seed=6),
])
def test_sobolev_ratio_bounded_on_bump_corpus(spec):
    n = 32
    field = make(spec, n=n)
    form = assemble(field)
    mask, corpus = bump_corpus(n)
    for u in corpus:
        ratio = sobolev_ratio(form, field, u, mask, q=2.0)
        assert np.isfinite(ratio) and 0 < ratio < 10.0


def test_sobolev_ratio_error_cases():
    n = 16
    field = make(EnvironmentSpec.identity(), n=n)
    form = assemble(field)
    mask = ball_cells(field, (8, 8), 0.25)
    with pytest.raises(UndefinedRatioError):
        sobolev_ratio(form, field, np.zeros((n, n)), mask)
    leak = np.ones((n, n))
    with pytest.raises(ConfigurationError):
        sobolev_ratio(form, field, leak, mask)
    with pytest.raises(ShapeError):
        sobolev_ratio(form, field, np.zeros((4, 4)), mask)
