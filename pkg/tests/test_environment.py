"""Field generation, moment checks, and geometry helpers."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from effdiff.environment import (CoefficientField, EnvironmentSpec,
                                 ball_cells, check_eigen_bounds,
                                 doubling_diagnostic, generate_field,
                                 moment_refinement_sweep, translate,
                                 tri_index, validate_moments)
from effdiff.errors import ConfigurationError, RangeError, ShapeError


def make(spec, n=32, h=None):
    return generate_field(spec, n, 1.0 / n if h is None else h)


# --------------------------------------------------------------------------
# spec validation


def test_unknown_model_rejected():
    with pytest.raises(ConfigurationError):
        EnvironmentSpec("perlin", 2, 0)


def test_nonpositive_parameters_rejected():
    with pytest.raises(ConfigurationError):
        EnvironmentSpec.checkerboard(-1.0, 4.0, tile_cells=2)
    with pytest.raises(ConfigurationError):
        EnvironmentSpec.laminate(1.0, 4.0, volume_fraction=1.5)
    with pytest.raises(ConfigurationError):
        EnvironmentSpec.checkerboard(1.0, 4.0, tile_cells=0)


def test_grid_too_small_rejected():
    with pytest.raises(ConfigurationError):
        make(EnvironmentSpec.identity(), n=1)


def test_checkerboard_tile_divisibility():
    # the periodized parity coloring needs N divisible by 2*tile_cells
    with pytest.raises(ConfigurationError):
        make(EnvironmentSpec.checkerboard(1.0, 4.0, tile_cells=3), n=32)


# --------------------------------------------------------------------------
# generation


def test_identity_field_is_exactly_identity():
    f = make(EnvironmentSpec.identity())
    assert np.all(f.lam == 1.0) and np.all(f.Lam == 1.0)
    assert np.all(f.diag(0) == 1.0) and np.all(f.diag(1) == 1.0)
    off = f.entries[..., tri_index(0, 1, 2)]
    assert np.all(off == 0.0)


def test_scaled_identity():
    f = make(EnvironmentSpec.scaled_identity(3.5))
    assert np.all(f.diag(0) == 3.5) and np.all(f.lam == 3.5)


def test_laminate_layers_and_fractions():
    f = make(EnvironmentSpec.laminate(1.0, 4.0), n=64)
    a = f.diag(0)
    # layered along axis 0: rows are constant
    assert np.all(a == a[:, :1])
    vals, counts = np.unique(a, return_counts=True)
    assert set(vals) == {1.0, 4.0}
    assert counts[0] == counts[1]


def test_checkerboard_parity_and_fraction():
    f = make(EnvironmentSpec.checkerboard(1.0, 4.0, tile_cells=4), n=32)
    a = f.diag(0)
    assert set(np.unique(a)) == {1.0, 4.0}
    assert np.sum(a == 1.0) == a.size // 2
    # tiles are constant 4x4 blocks with alternating parity
    blocks = a.reshape(8, 4, 8, 4)
    assert np.all(blocks.max(axis=(1, 3)) == blocks.min(axis=(1, 3)))
    parity = (np.add.outer(np.arange(8), np.arange(8))) % 2
    lo = blocks[:, 0, :, 0] == 1.0
    assert np.array_equal(lo, lo[0, 0] == (parity == 0))


def test_heavy_tail_ranges_and_blocks():
    spec = EnvironmentSpec.heavy_tail(3.0, 3.0, correlation_cells=4, seed=5)
    f = make(spec, n=64)
    assert np.all(f.lam > 0) and np.all(f.lam <= 1.0)
    assert np.all(f.Lam >= 1.0)
    assert np.all(f.Lam >= f.lam)
    blocks = f.lam.reshape(16, 4, 16, 4)
    assert np.all(blocks.max(axis=(1, 3)) == blocks.min(axis=(1, 3)))


def test_heavy_tail_is_anisotropic_but_bounded_by_eigenvalues():
    f = make(EnvironmentSpec.heavy_tail(3.0, 3.0, seed=1), n=32)
    assert check_eigen_bounds(f, n_dirs=500) >= -1e-12


def test_bessel_trap_vanishes_at_center():
    f = make(EnvironmentSpec.bessel_trap(2.0), n=64)
    assert f.lam.min() < 1e-3
    assert f.lam.min() == pytest.approx((1.0 / 64) ** 2, rel=1e-12)
    # radial profile max(r, h)^e evaluated at the corner cell center
    r = np.hypot(31.5 / 64, 31.5 / 64)
    assert f.lam[0, 0] == pytest.approx(r ** 2, rel=1e-12)


def test_determinism_and_seed_sensitivity():
    spec = EnvironmentSpec.heavy_tail(3.0, 3.0, seed=9)
    a, b = make(spec), make(spec)
    assert a.descriptor_hash() == b.descriptor_hash()
    c = make(EnvironmentSpec.heavy_tail(3.0, 3.0, seed=10))
    assert c.descriptor_hash() != a.descriptor_hash()


@pytest.mark.parametrize("spec", [
    EnvironmentSpec.identity(),
    EnvironmentSpec.scaled_identity(2.0),
    EnvironmentSpec.laminate(1.0, 4.0),
    EnvironmentSpec.checkerboard(1.0, 4.0, tile_cells=2),
    EnvironmentSpec.heavy_tail(3.0, 3.0, seed=3),
    EnvironmentSpec.bessel_trap(2.0),
])
def test_eigen_bounds_hold_on_every_preset(spec):
    f = make(spec, n=16)
    assert check_eigen_bounds(f, n_dirs=200) >= -1e-12


# --------------------------------------------------------------------------
# translation


def test_translate_matches_indexing():
    f = make(EnvironmentSpec.heavy_tail(3.0, 3.0, seed=2), n=16)
    g = translate(f, (3, 5))
    assert g.lam[0, 0] == f.lam[3, 5]
    assert g.lam[10, 12] == f.lam[13, 1]


@given(z1=st.tuples(st.integers(-40, 40), st.integers(-40, 40)),
       z2=st.tuples(st.integers(-40, 40), st.integers(-40, 40)))
@settings(max_examples=25, deadline=None)
def test_translate_is_a_group_action(z1, z2):
    f = make(EnvironmentSpec.heavy_tail(3.0, 3.0, seed=4), n=16)
    a = translate(translate(f, z1), z2)
    b = translate(f, (z1[0] + z2[0], z1[1] + z2[1]))
    assert np.array_equal(a.entries, b.entries)
    full = translate(f, (16, 16))
    assert np.array_equal(full.entries, f.entries)


def test_translate_bad_offset():
    f = make(EnvironmentSpec.identity(), n=8)
    with pytest.raises(ShapeError):
        translate(f, (1, 2, 3))


# --------------------------------------------------------------------------
# moments


def test_identity_moments_are_one_and_admissible():
    f = make(EnvironmentSpec.identity())
    rep = validate_moments(f, 3.0, 2.0)
    assert rep.emp_lambda_inv_q == 1.0 and rep.emp_Lambda_p == 1.0
    assert rep.admissible
    assert rep.condition_value == pytest.approx(1 / 3 + 1 / 2)


def test_inadmissible_exponent_pair_flagged():
    f = make(EnvironmentSpec.identity())
    assert not validate_moments(f, 2.0, 2.0).admissible


def test_infinite_exponents_read_essential_sup():
    f = make(EnvironmentSpec.checkerboard(1.0, 4.0, tile_cells=2), n=8)
    rep = validate_moments(f, np.inf, np.inf)
    assert rep.emp_Lambda_p == 4.0
    assert rep.emp_lambda_inv_q == 1.0


def test_exponents_below_one_rejected():
    f = make(EnvironmentSpec.identity())
    with pytest.raises(ConfigurationError):
        validate_moments(f, 0.5, 2.0)


@given(q1=st.floats(1.0, 4.0), q2=st.floats(1.0, 4.0),
       seed=st.integers(0, 50))
@settings(max_examples=30, deadline=None)
def test_lambda_inverse_moments_are_power_mean_monotone(q1, q2, seed):
    # (E lam^{-q1})^{1/q1} <= (E lam^{-q2})^{1/q2} for q1 <= q2
    if q1 > q2:
        q1, q2 = q2, q1
    f = make(EnvironmentSpec.heavy_tail(4.0, 4.0, seed=seed), n=16)
    m1 = validate_moments(f, 3.0, q1).emp_lambda_inv_q
    m2 = validate_moments(f, 3.0, q2).emp_lambda_inv_q
    assert m1 ** (1.0 / q1) <= m2 ** (1.0 / q2) * (1 + 1e-12)


def test_refinement_sweep_flags_the_trap_and_not_the_checkerboard():
    trap = EnvironmentSpec.bessel_trap(3.0)
    for q in (1.0, 2.0):
        _, diverging = moment_refinement_sweep(trap, 3.0, q, [32, 64, 128, 256])
        assert diverging
    board = EnvironmentSpec.checkerboard(1.0, 4.0, tile_cells=2)
    _, diverging = moment_refinement_sweep(board, 3.0, 2.0, [32, 64, 128])
    assert not diverging


def test_refinement_sweep_needs_three_increasing_sizes():
    with pytest.raises(ConfigurationError):
        moment_refinement_sweep(EnvironmentSpec.identity(), 3.0, 2.0, [8, 16])


# --------------------------------------------------------------------------
# geometry


def test_ball_cells_volume_and_interior():
    f = make(EnvironmentSpec.identity(), n=64)
    mask = ball_cells(f, (32, 32), 0.25)
    frac = mask.sum() / 64 ** 2
    assert frac == pytest.approx(np.pi * 0.25 ** 2, rel=0.02)
    # strict interior: a cell center exactly at distance R is excluded
    m2 = ball_cells(f, (0, 0), 2.0 / 64)
    assert not m2[2, 0] and m2[1, 0]


def test_ball_wraps_around_the_torus():
    f = make(EnvironmentSpec.identity(), n=32)
    mask = ball_cells(f, (0, 0), 0.2)
    assert mask[31, 0] and mask[0, 31]


def test_ball_radius_beyond_half_box():
    f = make(EnvironmentSpec.identity(), n=16)
    with pytest.raises(RangeError):
        ball_cells(f, (8, 8), 0.6)


def test_doubling_diagnostic_monotone_radii_only():
    f = make(EnvironmentSpec.identity(), n=32)
    with pytest.raises(ConfigurationError):
        doubling_diagnostic(f, (16, 16), [0.2, 0.1])
    rows = doubling_diagnostic(f, (16, 16), [0.1, 0.2])
    for _, ratio, muck in rows:
        assert ratio >= 1.0
        assert muck == pytest.approx(1.0)  # identity: Lambda = 1/lambda = 1


def test_trap_degrades_doubling_and_muckenhaupt():
    f = make(EnvironmentSpec.bessel_trap(3.0), n=128)
    rows = doubling_diagnostic(f, (64, 64),
                               [4.0 / 128, 8.0 / 128, 16.0 / 128, 32.0 / 128])
    mucks = [m for _, _, m in rows]
    assert all(a < b for a, b in zip(mucks, mucks[1:]))
    assert mucks[-1] > 10.0
    # Lambda-mass doubling far above the flat-measure factor 4
    assert all(ratio > 8.0 for _, ratio, _ in rows)
