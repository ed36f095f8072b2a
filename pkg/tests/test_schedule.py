import numpy as np
import pytest

from cdlora.rng import substream
from cdlora.schedule import NoiseSchedule, ScheduleError, add_noise, make_schedule


def test_two_step_cumulative_product():
    s = NoiseSchedule(np.array([0.1, 0.2]))
    np.testing.assert_allclose(s.alpha_bar, [0.9, 0.72])
    np.testing.assert_allclose(s.sigma(2), np.sqrt(0.28))


def test_constant_beta_power_law():
    s = NoiseSchedule(np.full(6, 0.3))
    np.testing.assert_allclose(s.alpha_bar, 0.7 ** np.arange(1, 7))


def test_vp_identity_every_step():
    s = make_schedule(50)
    n = np.arange(1, 51)
    np.testing.assert_allclose(s.alpha(n) ** 2 + s.sigma(n) ** 2, 1.0, atol=1e-12)


def test_monotonicity():
    s = make_schedule(50)
    n = np.arange(1, 51)
    assert np.all(np.diff(s.sigma(n)) > 0)
    assert np.all(np.diff(s.alpha(n)) < 0)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[0] < 1.0 and s.alpha_bar[-1] > 0.0


def test_parameter_validation():
    with pytest.raises(ScheduleError):
        make_schedule(1)
    with pytest.raises(ScheduleError):
        make_schedule(10, beta_min=0.0)
    with pytest.raises(ScheduleError):
        make_schedule(10, beta_min=0.5, beta_max=0.1)
    with pytest.raises(ScheduleError):
        make_schedule(10, beta_max=1.0)


def test_add_noise_degenerate_cases():
    s = NoiseSchedule(np.array([0.1, 0.2]))
    z = np.array([[1.0, 0.0]])
    eps = np.array([[0.0, 1.0]])
    np.testing.assert_allclose(add_noise(np.zeros((1, 2)), 2, eps, s), s.sigma(2) * eps)
    np.testing.assert_allclose(add_noise(z, 2, np.zeros((1, 2)), s), s.alpha(2) * z)


def test_add_noise_closed_form():
    s = NoiseSchedule(np.array([0.1, 0.2]))
    out = add_noise(np.array([[1.0, 0.0]]), 2, np.array([[0.0, 1.0]]), s)
    np.testing.assert_allclose(out, [[np.sqrt(0.72), np.sqrt(0.28)]])


def test_add_noise_validation():
    s = make_schedule(10)
    with pytest.raises(ScheduleError):
        add_noise(np.zeros((2, 2)), 11, np.zeros((2, 2)), s)
    with pytest.raises(ScheduleError):
        add_noise(np.zeros((2, 2)), 0, np.zeros((2, 2)), s)
    with pytest.raises(ScheduleError):
        add_noise(np.zeros((2, 2)), 3, np.zeros((2, 3)), s)


def test_add_noise_per_row_indices():
    s = make_schedule(10)
    z = np.ones((3, 2))
    eps = np.ones((3, 2))
    n = np.array([1, 5, 10])
    out = add_noise(z, n, eps, s)
    np.testing.assert_allclose(out, (s.alpha(n) + s.sigma(n))[:, None] * np.ones((3, 2)))


def test_marginal_preservation_monte_carlo():
    # unit-variance data stays unit-variance after noising, within 3 SE
    s = make_schedule(50)
    stream = substream(1234, "test/marginal")
    count = 200_000
    z = stream.normal((count, 1))
    eps = stream.normal((count, 1))
    out = add_noise(z, 25, eps, s)
    var = out.var()
    se = np.sqrt(2.0 / count)  # Var of sample variance of N(0,1) ~ 2/n
    assert abs(var - 1.0) < 3 * se


def test_continuous_extension_matches_grid():
    s = make_schedule(50)
    n = np.arange(1, 51)
    a, sg = s.alpha_sigma_of_t(s.t_of(n))
    np.testing.assert_allclose(a, s.alpha(n), rtol=1e-12)
    np.testing.assert_allclose(sg, s.sigma(n), rtol=1e-12)


def test_log_snr_roundtrip():
    s = make_schedule(50)
    t = np.linspace(s.t_min, 1.0, 37)
    np.testing.assert_allclose(s.t_of_log_snr(s.log_snr_of_t(t)), t, atol=1e-12)


def test_continuous_extension_range_check():
    s = make_schedule(50)
    with pytest.raises(ScheduleError):
        s.log_snr_of_t(0.001)
