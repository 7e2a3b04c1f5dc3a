import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snsweak.flows import (BlowUpError, FlowConfig, ForcingConfig, euler_rhs, ou_exact_step,
                           ou_params, ou_psi_expectation, rk4_flow, rk4_substeps)
from snsweak.spectral import SpectralField, TruncationError, basis_field, max_velocity

# (1 - exp(-0.02)) / 0.02, evaluated with mpmath at 30 digits
SIGMA2_REF = 0.99006633466223488896


def single(q=1.0, k=(1, 0)):
    return ForcingConfig((k,), (q,))


def test_flow_config_validation():
    with pytest.raises(ValueError):
        FlowConfig(nu=0.0, N=4)
    with pytest.raises(ValueError):
        FlowConfig(nu=0.01, N=4, epsilon=0.0)
    with pytest.raises(ValueError):
        FlowConfig(nu=0.01, N=4, cfl_safety=1.5)
    cfg = FlowConfig(nu=0.01, N=4, epsilon=0.25)
    assert cfg.euler_viscosity == pytest.approx(0.0075) and cfg.ou_viscosity == pytest.approx(0.0025)


def test_forcing_config_validation():
    with pytest.raises(ValueError):
        ForcingConfig(((1, 0), (1, 0)), (1.0, 1.0))
    with pytest.raises(TruncationError):
        ForcingConfig(((0, 0),), (1.0,))
    with pytest.raises(TruncationError):
        ForcingConfig(((5, 0),), (1.0,)).check_within(4)
    assert ForcingConfig.standard().d == 4 and ForcingConfig.standard().nondegenerate
    assert not ForcingConfig(((1, 0),), (0.0,)).nondegenerate


def test_euler_rhs_examples():
    f = basis_field((1, 0), 4)
    assert np.max(np.abs(euler_rhs(f, FlowConfig(0.01, 4)).coeffs)) < 1e-16
    r = euler_rhs(f, FlowConfig(0.01, 4, epsilon=0.5))
    assert r.coefficient((1, 0)) == pytest.approx(-0.005, rel=1e-14)
    assert np.count_nonzero(np.abs(r.coeffs) > 1e-16) == 1


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_euler_rhs_skew(N, seed):
    w = SpectralField.random(N, np.random.default_rng(seed))
    r = euler_rhs(w, FlowConfig(0.01, N))
    assert abs(r.inner(w)) <= 1e-10 * w.norm(1) ** 2


def test_rk4_trivial_cases():
    cfg = FlowConfig(0.01, 4)
    assert rk4_flow(SpectralField.zeros(4), 0.7, cfg).norm() == 0.0
    f = basis_field((1, 0), 4)
    out = rk4_flow(f, 1.0, cfg)
    assert np.max(np.abs(out.coeffs - f.coeffs)) < 1e-12
    assert np.array_equal(rk4_flow(f, 0.0, cfg).coeffs, f.coeffs)


def test_rk4_linear_decay_matches_exponential():
    cfg = FlowConfig(0.01, 4, epsilon=0.5)
    w = basis_field((1, 0), 4)
    for _ in range(10):
        w = rk4_flow(w, 0.1, cfg)
    assert w.coefficient((1, 0)) == pytest.approx(0.99501247919268231335, abs=1e-10)


def test_rk4_fourth_order_on_linear_part():
    # decay rate (1 - eps) nu |k|^2 = 5
    cfg = FlowConfig(2.0, 4, epsilon=0.5)
    errs = []
    for h in (0.2, 0.1, 0.05):
        w = basis_field((2, 1), 4)
        for _ in range(round(1 / h)):
            w = rk4_flow(w, h, cfg)
        errs.append(abs(w.coefficient((2, 1)) - math.exp(-5.0)))
    for a, b in zip(errs, errs[1:]):
        assert 8 <= a / b <= 32


def test_substep_rule():
    assert list(rk4_substeps(np.array([0.0, 1.0, 10.0]), 0.5, 8, 0.8)) == [1, 2, 18]
    cfg = FlowConfig(0.01, 8)
    w = SpectralField.random(8, np.random.default_rng(3)) * 30
    _, m = rk4_flow(w, 0.25, cfg, return_substeps=True)
    h = 0.25 / m
    assert 8 * max_velocity(w) * h <= 2.8 * 0.8
    assert 8 * max_velocity(w) * 0.25 / max(m - 1, 1) > 2.8 * 0.8 or m == 1


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1), st.floats(0.01, 2.0), st.floats(0.1, 30.0))
def test_rk4_contractive(N, seed, t, amp):
    w = SpectralField.random(N, np.random.default_rng(seed)) * amp
    out = rk4_flow(w, t, FlowConfig(0.01, N))
    assert out.norm() <= w.norm() * (1 + 1e-8)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_rk4_blow_up_reported():
    c = np.zeros((9, 9))
    c[5, 4] = np.inf
    with pytest.raises(BlowUpError, match="substep|velocity"):
        rk4_flow(SpectralField(4, c), 0.1, FlowConfig(0.01, 4))


def test_rk4_batch_elements_independent():
    cfg = FlowConfig(0.01, 6)
    w = SpectralField.random(6, np.random.default_rng(4), (3,))
    w = SpectralField(6, w.coeffs * np.array([1.0, 10.0, 40.0])[:, None, None])
    out, m = rk4_flow(w, 0.5, cfg, return_substeps=True)
    assert len(set(m.tolist())) > 1
    for i in range(3):
        single_out = rk4_flow(w[i], 0.5, cfg)
        assert np.allclose(out.coeffs[i], single_out.coeffs, rtol=0, atol=1e-13 * w[i].norm())


def test_ou_params_closed_form():
    cfg = FlowConfig(0.01, 6)
    p = ou_params(1.0, cfg, single())
    assert p.sigma[0] ** 2 == pytest.approx(SIGMA2_REF, rel=1e-14)
    assert p.decay[6 + 5, 6 + 5] == pytest.approx(math.exp(-0.5), rel=1e-14)
    with pytest.raises(ValueError):
        ou_params(0.0, cfg, single())


def test_ou_params_limits():
    cfg = FlowConfig(0.01, 4)
    q = 1.7
    p = ou_params(1e-8, cfg, single(q))
    assert p.sigma[0] ** 2 / 1e-8 == pytest.approx(q * q, rel=1e-10)
    p = ou_params(1e8, cfg, single(q, (1, 1)))
    assert p.sigma[0] ** 2 == pytest.approx(q * q / (2 * 0.01 * 2), rel=1e-10)


def test_ou_params_uses_split_viscosity():
    p = ou_params(1.0, FlowConfig(0.02, 4, epsilon=0.5), single())
    assert p.sigma[0] ** 2 == pytest.approx(SIGMA2_REF, rel=1e-14)


def test_ou_variance_against_scalar_sde():
    # Euler-Maruyama of dX = -0.01 X dt + dW on [0, 1]
    rng = np.random.default_rng(11)
    paths, steps = 200_000, 200
    x = np.zeros(paths)
    h = 1.0 / steps
    for _ in range(steps):
        x += -0.01 * x * h + math.sqrt(h) * rng.standard_normal(paths)
    se = x.var() * math.sqrt(2.0 / paths)
    assert abs(x.var() - SIGMA2_REF) < 3 * se + 1e-4


def test_ou_step_deterministic_decay():
    cfg = FlowConfig(0.01, 6)
    p = ou_params(1.0, cfg, single())
    out = ou_exact_step(basis_field((5, 5), 6), 1.0, p, [0.0])
    assert out.coefficient((5, 5)) == pytest.approx(math.exp(-0.5), rel=1e-14)


def test_ou_step_sample_variance():
    cfg = FlowConfig(0.01, 4)
    forcing = ForcingConfig.standard(-1.3)
    p = ou_params(1.0, cfg, forcing)
    g = np.random.default_rng(12).standard_normal((1_000_000, 4))
    out = ou_exact_step(SpectralField.zeros(4, (g.shape[0],)), 1.0, p, g).coeffs[:, p.rows, p.cols]
    var = out.var(axis=0)
    se = p.sigma**2 * math.sqrt(2.0 / g.shape[0])
    assert np.all(np.abs(var - p.sigma**2) < 3 * se)
    assert np.all(np.abs(out.mean(axis=0)) < 3 * p.sigma / math.sqrt(g.shape[0]))


def test_ou_step_affine_in_state():
    cfg = FlowConfig(0.01, 5)
    p = ou_params(0.3, cfg, ForcingConfig.standard())
    rng = np.random.default_rng(13)
    w, v = SpectralField.random(5, rng), SpectralField.random(5, rng)
    g = rng.standard_normal(4)
    lhs = ou_exact_step(w + v, 0.3, p, g)
    rhs = ou_exact_step(w, 0.3, p, g) + ou_exact_step(v, 0.3, p, g) - ou_exact_step(
        SpectralField.zeros(5), 0.3, p, g)
    assert np.max(np.abs(lhs.coeffs - rhs.coeffs)) < 1e-12


def test_ou_two_half_steps_compose():
    cfg = FlowConfig(0.01, 6)
    forcing = ForcingConfig(((1, 0), (3, -2), (-6, 6)), (1.0, 2.0, -0.5))
    full, half = ou_params(1.0, cfg, forcing), ou_params(0.5, cfg, forcing)
    assert np.max(np.abs(half.decay**2 - full.decay)) < 1e-12
    lam_half = half.decay[half.rows, half.cols]
    var2 = lam_half**2 * half.sigma**2 + half.sigma**2
    assert np.max(np.abs(var2 - full.sigma**2)) < 1e-12


def test_ou_step_rejects_bad_draws():
    p = ou_params(1.0, FlowConfig(0.01, 4), ForcingConfig.standard())
    with pytest.raises(ValueError):
        ou_exact_step(SpectralField.zeros(4), 1.0, p, [0.0, 1.0])
    with pytest.raises(ValueError):
        ou_exact_step(SpectralField.zeros(4), 0.5, p, np.zeros(4))


def test_psi_expectation_examples():
    cfg = FlowConfig(0.01, 4)
    p = ou_params(1.0, cfg, single())
    eta = 0.25 / p.sigma[0] ** 2
    assert ou_psi_expectation(SpectralField.zeros(4), 1.0, p, eta) == pytest.approx(math.sqrt(2), rel=1e-14)
    assert ou_psi_expectation(basis_field((2, 1), 4), 1.0, p, 0.0) == 1.0
    with pytest.raises(ValueError, match="mode 0"):
        ou_psi_expectation(SpectralField.zeros(4), 1.0, p, 0.6 / p.sigma[0] ** 2)


@pytest.mark.parametrize("start", ["zero", "forced"])
def test_psi_expectation_against_monte_carlo(start):
    cfg = FlowConfig(0.01, 4)
    forcing = ForcingConfig.standard(0.8)
    p = ou_params(1.0, cfg, forcing)
    w0 = SpectralField.zeros(4) if start == "zero" else (
        basis_field((1, 0), 4) * 0.7 + basis_field((2, 3), 4) * 0.4)
    eta = 0.1
    g = np.random.default_rng(14).standard_normal((1_000_000, 4))
    vals = np.exp(eta * ou_exact_step(w0, 1.0, p, g).norm() ** 2)
    exact = ou_psi_expectation(w0, 1.0, p, eta)
    assert abs(vals.mean() - exact) < 3 * vals.std() / math.sqrt(vals.size)


def test_psi_supermartingale_bound():
    # E psi(w(t, 0)) <= exp(omega t) psi(0) with omega from the closed form at t = 1
    cfg = FlowConfig(0.01, 4)
    forcing = ForcingConfig.standard()
    eta = 0.1
    omega = math.log(ou_psi_expectation(SpectralField.zeros(4), 1.0, ou_params(1.0, cfg, forcing), eta))
    for t in (0.25, 0.5, 1.0):
        val = ou_psi_expectation(SpectralField.zeros(4), t, ou_params(t, cfg, forcing), eta)
        assert val <= math.exp(omega * t) * (1 + 1e-12)
