import math

import mpmath as mp
import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from hwdiff.schedule import NoiseSchedule, linear_schedule, posterior, predict_mu_from_eps, q_sample

mp.mp.dps = 50

# 50-digit reference values of alpha_bar_t for the default linear schedule
ALPHA_BAR_REF = {
    1: 0.9999,
    250: 0.52408537382536050097,
    500: 0.078587242881778237343,
    999: 0.000041181936381384523621,
    1000: 0.000040358297653756833148,
}


def mp_posterior(ab_prev, a_t, x0, xt):
    """Posterior of x_{t-1} from the product of two Gaussians, in mpmath."""
    ab_prev, a_t = mp.mpf(ab_prev), mp.mpf(a_t)
    b_t = 1 - a_t
    prec = 1 / (1 - ab_prev) + a_t / b_t
    var = 1 / prec
    mean = var * (mp.sqrt(ab_prev) * x0 / (1 - ab_prev) + mp.sqrt(a_t) * xt / b_t)
    return mean, var


def test_default_endpoints():
    s = linear_schedule()
    assert s.T == 1000
    assert s.beta(1) == 1e-4
    assert s.beta(1000) == pytest.approx(0.02, abs=1e-15)
    assert s.alpha_bar(0) == 1.0


@pytest.mark.parametrize("t", sorted(ALPHA_BAR_REF))
def test_alpha_bar_matches_high_precision(t):
    got = linear_schedule().alpha_bar(t)
    assert got == pytest.approx(ALPHA_BAR_REF[t], rel=1e-10)


def test_alpha_bar_T_in_range():
    ab = linear_schedule().alpha_bar(1000)
    assert 1e-5 < ab < 1e-4


def test_two_step_example():
    s = linear_schedule(0.5, 0.5, 2)
    np.testing.assert_array_equal(s.alpha_bars, [0.5, 0.25])


def test_cumulative_product_is_exact():
    s = linear_schedule()
    for t in range(2, s.T + 1):
        assert s.alpha_bar(t) == s.alpha_bar(t - 1) * s.alpha(t)


def test_alpha_bar_strictly_decreasing_in_unit_interval():
    ab = linear_schedule().alpha_bars
    assert np.all(np.diff(ab) < 0)
    assert np.all((ab > 0) & (ab < 1))


@pytest.mark.parametrize("args", [(1e-4, 0.02, 1), (0.02, 1e-4, 100), (0.0, 0.02, 10), (1e-4, 1.0, 10)])
def test_invalid_schedules_rejected(args):
    with pytest.raises(ValueError):
        linear_schedule(*args)


def test_out_of_range_timestep():
    s = linear_schedule()
    x = np.zeros(3)
    for t in (0, 1001):
        with pytest.raises(ValueError):
            q_sample(x, t, x, s)


def test_q_sample_example():
    s = linear_schedule(0.36, 0.36, 2)
    assert s.alpha_bar(1) == pytest.approx(0.64)
    out = q_sample(np.array([1.0]), 1, np.array([0.5]), s)
    assert out[0] == pytest.approx(1.1, abs=1e-12)


def test_q_sample_shape_mismatch():
    with pytest.raises(ValueError):
        q_sample(np.zeros(3), 5, np.zeros(4), linear_schedule())


def test_q_sample_batched_timesteps_match_scalar():
    s = linear_schedule()
    x0 = torch.randn(4, 2, 3, dtype=torch.float64)
    eps = torch.randn(4, 2, 3, dtype=torch.float64)
    ts = torch.tensor([1, 10, 500, 1000])
    out = q_sample(x0, ts, eps, s)
    for i, t in enumerate(ts.tolist()):
        torch.testing.assert_close(out[i], q_sample(x0[i], t, eps[i], s), rtol=0, atol=1e-15)


def test_posterior_at_t1_is_x0_with_zero_variance():
    s = linear_schedule()
    x0 = np.array([0.3, -1.2])
    xt = np.array([5.0, 2.0])
    p = posterior(x0, xt, 1, s)
    np.testing.assert_array_equal(p.mean, x0)
    assert p.variance == 0.0


@given(t=st.integers(2, 1000), x0=st.floats(-3, 3), xt=st.floats(-3, 3))
def test_posterior_matches_gaussian_product(t, x0, xt):
    s = linear_schedule()
    p = posterior(np.array([x0]), np.array([xt]), t, s)
    mean, var = mp_posterior(s.alpha_bar(t - 1), s.alpha(t), mp.mpf(x0), mp.mpf(xt))
    assert p.mean[0] == pytest.approx(float(mean), abs=1e-9)
    assert p.variance == pytest.approx(float(var), rel=1e-8)
    assert 0 < p.variance <= s.beta(t)


@given(t=st.integers(1, 1000), seed=st.integers(0, 2**31))
def test_predict_mu_with_true_noise_is_posterior_mean(t, seed):
    s = linear_schedule()
    g = np.random.default_rng(seed)
    x0, eps = g.standard_normal(16), g.standard_normal(16)
    xt = q_sample(x0, t, eps, s)
    mu = predict_mu_from_eps(xt, eps, t, s)
    np.testing.assert_allclose(mu, posterior(x0, xt, t, s).mean, rtol=0, atol=1e-6)


def test_text_round_trip():
    s = linear_schedule(2e-4, 0.03, 321)
    r = NoiseSchedule.from_text(s.to_text())
    assert (r.beta_start, r.beta_end, r.T) == (s.beta_start, s.beta_end, s.T)
    np.testing.assert_array_equal(r.alpha_bars, s.alpha_bars)
    with pytest.raises(ValueError):
        NoiseSchedule.from_text("T=10\n")


def test_tables_are_read_only():
    s = linear_schedule()
    with pytest.raises(ValueError):
        s.betas[0] = 0.5
