import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from dancelab.diffusion import (
    SIGMA_MAX,
    SIGMA_MIN,
    GuidanceConfig,
    ScheduleState,
    SigmaRange,
    advance_schedule,
    beta_cdf,
    beta_inverse_cdf,
    beta_pdf,
    cfg_derivative,
    edm_loss,
    ode_derivative,
    sample,
    sample_noise_level,
    sigma_from_level,
    sigma_grid,
)
from dancelab.numerics import Tensor, grad_check, make_rng, mul, precision


def gaussian_denoiser(mu=0.0, s2=1.0):
    # posterior mean for data N(mu, s2) under noise N(0, sigma^2)
    def D(x, sigma):
        return (s2 * x + sigma**2 * mu) / (s2 + sigma**2)

    return D


# -- noise-level schedule -------------------------------------------------------

def test_beta_pdf_integrates_to_one():
    for beta in (1.0, 1.5, 3.0, 7.0):
        total, _ = integrate.quad(lambda x: beta_pdf(x, beta), 0.0, 1.0)
        assert total == pytest.approx(1.0, abs=1e-8)


def test_beta_pdf_matches_scipy():
    for beta in (1.0, 2.0, 3.0):
        for x in (0.0, 0.1, 0.5, 0.9):
            assert beta_pdf(x, beta) == pytest.approx(stats.beta(1, beta).pdf(x), rel=1e-12)


def test_beta_pdf_at_three_is_three_at_zero():
    assert beta_pdf(0.0, 3.0) == 3.0
    assert beta_pdf(0.5, 3.0) == pytest.approx(0.75)


def test_beta_pdf_rejects_bad_inputs():
    with pytest.raises(ValueError):
        beta_pdf(1.2, 3.0)
    with pytest.raises(ValueError):
        beta_pdf(0.5, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(1.0, 10.0))
def test_inverse_cdf_inverts_cdf(v, beta):
    assert beta_cdf(beta_inverse_cdf(v, beta), beta) == pytest.approx(v, abs=1e-9)


def test_beta_decay_endpoints():
    s = ScheduleState(beta0=3.0, total_steps=2000)
    assert s.beta_current == 3.0
    for _ in range(2000):
        s = advance_schedule(s)
    assert s.beta_current <= 1.01
    with pytest.raises(ValueError):
        advance_schedule(s)


def test_beta_decay_is_monotone():
    s = ScheduleState(beta0=3.0, total_steps=100)
    seen = [s.beta_current]
    for _ in range(100):
        s = advance_schedule(s)
        seen.append(s.beta_current)
    assert all(b >= a for a, b in zip(seen[1:], seen[:-1]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleState(beta0=0.5)
    with pytest.raises(ValueError):
        ScheduleState(total_steps=0)
    with pytest.raises(ValueError):
        SigmaRange(1.0, 0.5)


def test_level_zero_and_one_hit_range_ends():
    r = SigmaRange()
    assert sigma_from_level(0.0, r) == pytest.approx(SIGMA_MIN)
    assert sigma_from_level(1.0, r) == pytest.approx(SIGMA_MAX)


def test_beta3_draws_favour_low_noise():
    s = ScheduleState(beta0=3.0)
    sig = sample_noise_level(s, make_rng(0), size=20000)
    med = np.median(np.log(sig))
    # median of Beta(1,3) is 1 - 2^(-1/3)
    u_med = 1 - 2 ** (-1 / 3)
    expected = (1 - u_med) * math.log(SIGMA_MIN) + u_med * math.log(SIGMA_MAX)
    assert med == pytest.approx(expected, abs=0.1)


# -- loss -------------------------------------------------------------------------

def test_perfect_denoiser_has_zero_loss():
    y = make_rng(1).standard_normal((3, 4))
    loss = edm_loss(lambda xn, s: Tensor(y), y, 0.5, np.ones_like(y))
    assert float(loss.data) == 0.0


def test_loss_sums_per_example_and_averages_batch():
    y = np.zeros((2, 3))
    # identity denoiser: error = noise
    noise = np.array([[1.0, 1.0, 1.0], [2.0, 0.0, 0.0]])
    with precision(64):
        loss = edm_loss(lambda xn, s: xn, y, 1.0, noise)
    assert float(loss.data) == pytest.approx((3.0 + 4.0) / 2)


def test_loss_gradient_through_denoiser():
    y = make_rng(2).standard_normal((2, 3))
    n = make_rng(3).standard_normal((2, 3))
    report = grad_check(lambda p: edm_loss(lambda xn, s: mul(xn, p["w"]), y, 1.0, n),
                        {"w": np.array([0.7])})
    assert report.passed


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        edm_loss(lambda xn, s: xn, np.zeros(3), 1.0, np.zeros(4))


# -- ODE and guidance -----------------------------------------------------------

def test_cfg_worked_value():
    out = cfg_derivative(np.array(2.0), np.array(1.0), np.array(0.0), 1.0, GuidanceConfig(6.0))
    assert float(out) == -7.0


def test_cfg_gamma_one_is_conditional_slope():
    rng = make_rng(4)
    dc, du, x = rng.standard_normal((3, 5))
    np.testing.assert_array_equal(cfg_derivative(dc, du, x, 0.7, GuidanceConfig(1.0)), ode_derivative(dc, x, 0.7))


def test_guidance_below_one_rejected():
    with pytest.raises(ValueError):
        GuidanceConfig(0.5)


def test_derivatives_reject_nonpositive_sigma():
    with pytest.raises(ValueError):
        ode_derivative(np.zeros(2), np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        cfg_derivative(np.zeros(2), np.zeros(2), np.zeros(2), -1.0, GuidanceConfig())


def test_sigma_grid_shape_and_ends():
    g = sigma_grid(50)
    assert len(g) == 51
    assert g[0] == SIGMA_MAX and g[-2] == SIGMA_MIN and g[-1] == 0.0
    assert np.all(np.diff(g) < 0)
    np.testing.assert_array_equal(sigma_grid(1), [SIGMA_MAX, 0.0])
    with pytest.raises(ValueError):
        sigma_grid(0)


def test_sampler_validates_grid():
    D = gaussian_denoiser()
    with pytest.raises(ValueError):
        sample(D, (2,), [1.0, 2.0, 0.0], GuidanceConfig(1.0), make_rng(0))
    with pytest.raises(ValueError):
        sample(D, (2,), [2.0, 1.0], GuidanceConfig(1.0), make_rng(0))
    with pytest.raises(ValueError):
        sample((D, None), (2,), [2.0, 0.0], GuidanceConfig(6.0), make_rng(0))


def test_single_point_data_is_reached():
    point = np.array([0.3, -0.7])
    D = lambda x, s: np.broadcast_to(point, x.shape)
    out = sample(D, (4, 2), sigma_grid(50), GuidanceConfig(1.0), make_rng(5))
    np.testing.assert_allclose(out, np.broadcast_to(point, (4, 2)), atol=1e-3)


def test_single_point_error_non_increasing():
    point = np.array([0.5, -0.2, 0.9])
    seen = []

    def D(x, s):
        seen.append(np.abs(x - point).max())
        return np.broadcast_to(point, x.shape)

    out = sample(D, (3,), sigma_grid(30), GuidanceConfig(1.0), make_rng(6))
    errs = seen + [np.abs(out - point).max()]
    assert len(errs) == 31
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_single_point_error_shrinks_as_steps_double(seed):
    point = make_rng(seed).standard_normal(4)
    errs = []
    for n in (10, 20, 40, 80):
        out = sample(lambda x, s: np.broadcast_to(point, x.shape), (4,), sigma_grid(n), GuidanceConfig(1.0),
                     make_rng(seed, 1))
        errs.append(np.abs(out - point).max())
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    assert errs[-1] <= 1e-3


def test_gaussian_euler_contraction_matches_ode_solution():
    # for N(0, 1) data the exact flow scales x by sqrt(1 + s^2) / sqrt(1 + s0^2);
    # Euler undershoots slightly and converges as steps grow
    D = gaussian_denoiser()
    exact = 1.0 / np.sqrt(1.0 + 80.0**2)
    errs = []
    for n in (50, 100, 200):
        factor = sample(D, (1,), sigma_grid(n), GuidanceConfig(1.0), make_rng(0), x_init=np.ones(1))[0]
        errs.append(abs(factor - exact) / exact)
    assert errs[0] > errs[1] > errs[2]
    # at 50 steps the variance of unit-variance data lands near 0.90
    assert errs[0] == pytest.approx(1 - np.sqrt(0.9001), abs=2e-3)


def test_gaussian_oracle_moments():
    D = gaussian_denoiser()
    out = sample((D, D), (2000,), sigma_grid(50), GuidanceConfig(1.0), make_rng(7))
    assert abs(out.mean()) <= 0.05
    assert 0.9 <= out.var() <= 1.1


def test_guidance_pushes_away_from_unconditional():
    cond, uncond = gaussian_denoiser(mu=1.0, s2=0.1), gaussian_denoiser(mu=0.0, s2=0.1)
    g1 = sample((cond, uncond), (500,), sigma_grid(40), GuidanceConfig(1.0), make_rng(8))
    g3 = sample((cond, uncond), (500,), sigma_grid(40), GuidanceConfig(3.0), make_rng(8))
    assert g3.mean() > g1.mean() > 0.8
