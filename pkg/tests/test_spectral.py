import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snsweak.spectral import (SCALE, SpectralField, TruncationError, basis_field, biot_savart,
                              from_grid, grid_size, is_positive, max_velocity, nonlinear_term,
                              project, sobolev_norm, to_grid)

from oracles import convolution_nonlinearity, curl_and_div


def random_field(N, seed, batch=()):
    return SpectralField.random(N, np.random.default_rng(seed), batch)


def test_positive_half_plane():
    assert is_positive(0, 1) and is_positive(1, 0) and is_positive(-3, 2)
    assert not is_positive(-1, 0) and not is_positive(2, -1)


def test_grid_size_rule():
    assert [grid_size(N) for N in (1, 4, 8, 16, 32)] == [4, 16, 32, 54, 108]
    for N in range(1, 40):
        G = grid_size(N)
        assert G >= 3 * N + 1 and G % 2 == 0


def test_basis_field_examples():
    f = basis_field((1, 0), 4)
    assert f.norm() == 1.0 and f.norm(1) == 1.0
    assert sobolev_norm(basis_field((3, 4), 8), 2) == pytest.approx(25.0, rel=1e-15)
    with pytest.raises(TruncationError):
        basis_field((0, 0), 4)
    with pytest.raises(TruncationError, match="5"):
        basis_field((5, 0), 4)


def test_sobolev_norm_examples():
    assert sobolev_norm(basis_field((1, 0), 4), -1) == 1.0
    assert sobolev_norm(basis_field((3, 4), 4), 1) == pytest.approx(5.0, rel=1e-15)
    w = SpectralField.from_modes(2, {(1, 0): 3.0, (1, 1): 4.0})
    assert sobolev_norm(w, 0) == 5.0


def test_mean_mode_rejected():
    c = np.zeros((5, 5))
    c[2, 2] = 1.0
    with pytest.raises(ValueError):
        SpectralField(2, c)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_parseval(N, seed):
    w = random_field(N, seed)
    assert w.norm() ** 2 == pytest.approx(np.sum(w.coeffs**2), rel=1e-14)


def test_project_examples():
    f = basis_field((1, 0), 6)
    p = project(f, 4)
    assert p.N == 4 and p.coefficient((1, 0)) == 1.0
    assert project(basis_field((5, 0), 6), 4).norm() == 0.0
    w = random_field(5, 1)
    assert np.array_equal(project(w, 5).coeffs, w.coeffs)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 10), st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_project_idempotent_and_contractive(N, M, seed):
    w = random_field(N, seed)
    p = project(w, M)
    assert np.array_equal(project(p, M).coeffs, p.coeffs)
    assert p.norm() <= w.norm() * (1 + 1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**32 - 1))
def test_grid_round_trip(N, seed):
    w = random_field(N, seed)
    back = from_grid(to_grid(w), N)
    assert np.max(np.abs(back.coeffs - w.coeffs)) <= 1e-12 * np.max(np.abs(w.coeffs))


def test_to_grid_matches_basis_definition():
    N, G = 3, 16
    x = 2 * np.pi * np.arange(G) / G
    X1, X2 = np.meshgrid(x, x, indexing="ij")
    w = SpectralField.from_modes(N, {(2, 1): 0.7, (1, -3): -1.3, (-2, 0): 0.4})
    expect = (0.7 * np.sin(2 * X1 + X2) - 1.3 * np.cos(X1 - 3 * X2) + 0.4 * np.cos(-2 * X1)) / SCALE
    assert np.allclose(to_grid(w, G), expect, atol=1e-14)


def test_biot_savart_single_mode():
    u1, u2 = biot_savart(basis_field((1, 0), 4))
    # psi = -sin(x1)/SCALE, u = (0, cos x1)/SCALE = (0, f_(-1,0))
    assert u1.norm() == pytest.approx(0.0, abs=1e-15)
    assert u2.coefficient((-1, 0)) == pytest.approx(1.0, rel=1e-15)
    assert np.count_nonzero(np.abs(u2.coeffs) > 1e-15) == 1
    z1, z2 = biot_savart(SpectralField.zeros(4))
    assert z1.norm() == 0 and z2.norm() == 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_biot_savart_curl_and_divergence(seed):
    N = 8
    w = random_field(N, seed)
    u1, u2 = biot_savart(w)
    curl, div = curl_and_div(u1.coeffs, u2.coeffs, N)
    scale = np.max(np.abs(w.coeffs))
    assert np.max(np.abs(curl - w.coeffs)) <= 1e-12 * scale
    assert np.max(np.abs(div)) <= 1e-12 * scale


def test_max_velocity_single_mode():
    assert max_velocity(basis_field((1, 0), 4)) == pytest.approx(1 / SCALE, rel=1e-12)


def test_nonlinear_single_mode_vanishes():
    assert np.max(np.abs(nonlinear_term(basis_field((1, 0), 4)).coeffs)) < 1e-16


def test_nonlinear_two_modes_against_convolution():
    N = 8
    # equal |k|^2 makes w proportional to psi, so both sides vanish
    w = basis_field((1, 0), N) + basis_field((0, 1), N)
    got = nonlinear_term(w).coeffs
    ref = convolution_nonlinearity(w.coeffs, N)
    assert np.max(np.abs(got - ref)) <= 1e-12
    w = basis_field((1, 0), N) + basis_field((1, 1), N)
    got = nonlinear_term(w).coeffs
    ref = convolution_nonlinearity(w.coeffs, N)
    assert np.max(np.abs(ref)) > 0.01
    assert np.max(np.abs(got - ref)) <= 1e-12 * np.max(np.abs(ref))


@pytest.mark.parametrize("N,seed", [(2, 3), (5, 4), (8, 5), (8, 6)])
def test_nonlinear_random_against_convolution(N, seed):
    w = random_field(N, seed)
    got = nonlinear_term(w).coeffs
    ref = convolution_nonlinearity(w.coeffs, N)
    assert np.max(np.abs(got - ref)) <= 1e-12 * np.max(np.abs(ref))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 32), st.integers(0, 2**32 - 1))
def test_nonlinear_skew_symmetric(N, seed):
    w = random_field(N, seed)
    assert abs(nonlinear_term(w).inner(w)) <= 1e-10 * w.norm(1) ** 2


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**32 - 1), st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3))
def test_nonlinear_quadratic(N, seed, alpha):
    w = random_field(N, seed)
    a = nonlinear_term(w * alpha).coeffs
    b = alpha**2 * nonlinear_term(w).coeffs
    assert np.max(np.abs(a - b)) <= 1e-12 * max(np.max(np.abs(b)), 1e-300)


def test_batched_matches_single():
    w = random_field(6, 9, (3,))
    batched = nonlinear_term(w).coeffs
    for i in range(3):
        assert np.allclose(batched[i], nonlinear_term(w[i]).coeffs, rtol=0, atol=1e-14)
