import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from holespin.analysis import (
    UncalibratedModelError,
    fit_autocorr_model,
    fit_power_law_field,
    fit_scaling,
    fit_stretched_exp,
    gamma_from_lambda,
    global_alpha_fit,
    lambda_from_gamma,
    predict_T2star,
    residual_sign_test,
    simulate_intensity,
)
from holespin.coherence import DecayCurve, NoiseEnvironment, ff_visibility
from holespin.fitting import InsufficientDataError, StretchedExponential
from holespin.noise import QuasiStaticGaussian, SpectralGaussian, Telegraph, Trajectory, autocorrelation, sample_trajectory
from holespin.sequences import SequenceSpec
from holespin.spin import QDParameters, electrical_detuning

P = QDParameters()


def _stretched(tau, t2, alpha, amp=1.0):
    return amp * np.exp(-((tau / t2) ** alpha))


def _noisy_curve(t2, alpha, rel_noise, seed, amp=1.0, n=60):
    tau = np.geomspace(0.05, 4, n) * t2
    rng = np.random.default_rng(seed)
    v = _stretched(tau, t2, alpha, amp)
    err = np.full(n, rel_noise * amp)
    return DecayCurve(tau, v + rng.normal(0, err), err)


def test_stretched_recovery():
    for seed in range(5):
        fit = fit_stretched_exp(_noisy_curve(1e-6, 1.56, 0.01, seed))
        assert fit["t2"] == pytest.approx(1e-6, rel=0.03)
        assert fit["alpha"] == pytest.approx(1.56, abs=0.06)
        # reported sigmas are honest: deviations within 4 sigma
        assert abs(fit["alpha"] - 1.56) < 4 * fit.sigmas["alpha"]


def test_pure_exponential_gives_unit_alpha():
    tau = np.geomspace(1e-8, 1e-5, 40)
    fit = fit_stretched_exp(DecayCurve(tau, np.exp(-tau / 1e-6), np.zeros_like(tau)))
    assert fit["alpha"] == pytest.approx(1.0, abs=1e-6)
    assert fit["t2"] == pytest.approx(1e-6, rel=1e-6)


def test_ten_pulse_decay_time():
    tau = np.geomspace(0.2, 3, 50) * 4.40e-6
    fit = fit_stretched_exp(DecayCurve(tau, _stretched(tau, 4.40e-6, 1.56), np.zeros_like(tau)))
    assert fit["t2"] == pytest.approx(4.40e-6, rel=0.15)


def test_insufficient_data():
    tau = np.array([1e-7, 2e-7, 3e-7, 4e-7])
    with pytest.raises(InsufficientDataError):
        fit_stretched_exp(DecayCurve(tau, _stretched(tau, 1e-6, 1.5), np.zeros(4)))
    # a curve that never decays cannot fix alpha
    tau = np.geomspace(1e-9, 1e-8, 20)
    with pytest.raises(InsufficientDataError):
        fit_stretched_exp(DecayCurve(tau, _stretched(tau, 1e-6, 1.5), np.zeros(20)))


def test_time_rescaling_invariance():
    curve = _noisy_curve(1e-6, 1.3, 0.01, 7)
    scaled = DecayCurve(curve.delays * 1e3, curve.visibility, curve.stderr)
    a, b = fit_stretched_exp(curve), fit_stretched_exp(scaled)
    assert b["t2"] == pytest.approx(1e3 * a["t2"], rel=1e-6)
    assert b["alpha"] == pytest.approx(a["alpha"], rel=1e-6)


def test_global_fit_and_heterogeneity():
    shared = [_noisy_curve(t2, 1.56, 0.005, s) for s, t2 in enumerate([1e-6, 2e-6, 4e-6])]
    fit = global_alpha_fit(shared, labels=["1", "2", "4"])
    assert fit["alpha"] == pytest.approx(1.56, abs=0.03)
    assert fit["t2[2]"] == pytest.approx(2e-6, rel=0.02)
    assert not fit.diagnostics["alpha_heterogeneous"]
    mixed = [_noisy_curve(1e-6, 1.0, 0.005, 1), _noisy_curve(2e-6, 2.0, 0.005, 2)]
    assert global_alpha_fit(mixed).diagnostics["alpha_heterogeneous"]
    with pytest.raises(InsufficientDataError):
        global_alpha_fit(shared[:1])


def test_fit_scaling_exact():
    n = np.array([1, 2, 4, 8, 16])
    fit = fit_scaling(np.column_stack([n, 1.2e-6 * n**0.36]))
    assert fit["gamma"] == pytest.approx(0.36, abs=1e-6)
    assert fit["t2_0"] == pytest.approx(1.2e-6, rel=1e-6)
    flat = fit_scaling(np.column_stack([n, np.full(5, 3e-6)]))
    assert flat["gamma"] == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(InsufficientDataError):
        fit_scaling([[1, 1e-6], [2, 2e-6]])


def test_field_power_law_exact():
    b = np.array([1.0, 2.0, 4.0, 6.5, 8.0])
    assert fit_power_law_field(np.column_stack([b, 5e-8 / b]))["exponent"] == pytest.approx(-1, abs=1e-9)
    assert fit_power_law_field(np.column_stack([b, np.full(5, 5e-8)]))["exponent"] == pytest.approx(0, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(gamma=st.floats(0.0, 0.95))
def test_lambda_gamma_round_trip(gamma):
    assert gamma_from_lambda(lambda_from_gamma(gamma)) == pytest.approx(gamma, abs=1e-12)


def test_lambda_gamma_values_and_domain():
    assert lambda_from_gamma(0.36) == pytest.approx(0.5625)
    with pytest.raises(ValueError):
        lambda_from_gamma(1.0)
    with pytest.raises(ValueError):
        gamma_from_lambda(-0.1)


def test_simulate_intensity_special_values():
    field = Trajectory(1e-6, np.array([0.0, 1.0, -1.0]), 0)
    out = simulate_intensity(field, linewidth_hz=2.0, k_stark=1.0, intensity0=3.0)
    # shifts of half a linewidth halve the signal
    np.testing.assert_allclose(out.samples, [3.0, 1.5, 1.5])
    with pytest.raises(ValueError):
        simulate_intensity(field, linewidth_hz=0.0, k_stark=1.0)


def test_telegraph_intensity_bunching():
    # two equally occupied intensity levels: g(t) = (dI / 2)**2 / mean**2 * exp(-2 rate t)
    rate, a = 2e3, 50.0
    field = sample_trajectory(Telegraph(a, rate, rate), 1e-6, 4_000_000, seed=3)
    trace = simulate_intensity(field, linewidth_hz=2e5, k_stark=1e3, laser_detuning_hz=1e5)
    ac = autocorrelation(trace, 1e-3)
    hi = 1 / (1 + (2 * (a * 1e3 + 1e5) / 2e5) ** 2)
    lo = 1 / (1 + (2 * (-a * 1e3 + 1e5) / 2e5) ** 2)
    contrast = ((hi - lo) / 2) ** 2 / ((hi + lo) / 2) ** 2
    expected = contrast * np.exp(-2 * rate * ac.lags)
    assert np.max(np.abs(ac.values - expected)) < 0.05 * contrast


LAGS = np.geomspace(1e-6, 1e-1, 120)
RATES = np.array([2e1, 3e2, 5e3, 8e4])


def _synthetic_autocorr(lam=0.56, power=0.3):
    exps = sum(0.25 * np.exp(-r * LAGS) for r in RATES)
    return exps + power * (LAGS / LAGS[0]) ** (lam - 1)


def test_autocorr_fit_recovers_components():
    fit = fit_autocorr_model(LAGS, _synthetic_autocorr())
    assert fit["lambda"] == pytest.approx(0.56, abs=0.01)
    est = fit.estimator
    np.testing.assert_allclose(est.rates_, RATES, rtol=0.05)
    assert not fit.diagnostics["degenerate_time_constants"]


def test_autocorr_fit_amplitude_invariance():
    a = fit_autocorr_model(LAGS, _synthetic_autocorr())
    b = fit_autocorr_model(LAGS, 5 * _synthetic_autocorr())
    assert b["lambda"] == pytest.approx(a["lambda"], abs=1e-4)
    np.testing.assert_allclose(b.estimator.rates_, a.estimator.rates_, rtol=1e-3)
    assert b["power_amplitude"] == pytest.approx(5 * a["power_amplitude"], rel=1e-3)


def test_autocorr_fit_without_power_law_component():
    g = sum(0.25 * np.exp(-r * LAGS) for r in RATES)
    fit = fit_autocorr_model(LAGS, g)
    assert abs(fit["power_amplitude"]) < 1e-3
    with pytest.raises(InsufficientDataError):
        fit_autocorr_model(LAGS[:30], g[:30])


def test_residual_sign_test():
    changes, pairs, p = residual_sign_test(np.tile([1.0, -1.0], 20))
    assert (changes, pairs) == (39, 39) and p == pytest.approx(1.0)
    _, _, p = residual_sign_test(np.sin(np.linspace(0, 2 * np.pi, 60)) + 0.01)
    assert p < 1e-6
    rng = np.random.default_rng(0)
    _, _, p = residual_sign_test(rng.normal(size=200))
    assert p > 0.01
    with pytest.raises(InsufficientDataError):
        residual_sign_test([1.0, 0.0, -1.0])


def test_predict_t2star_requires_calibration():
    env = NoiseEnvironment(electrical=QuasiStaticGaussian(1000.0))
    with pytest.raises(UncalibratedModelError):
        predict_T2star(env, P, 5.0, calibration=None)


def test_predict_t2star_quasi_static_inverse_field():
    env = NoiseEnvironment(electrical=QuasiStaticGaussian(1000.0))
    values = [b * predict_T2star(env, P, b, calibration=1.0) for b in (2.0, 4.0, 8.0)]
    np.testing.assert_allclose(values, values[0], rtol=1e-6)
    # Gaussian decay: T2* = sqrt(2) / sigma_omega
    sigma_omega = 2 * np.pi * electrical_detuning(P, 1000.0, 2.0)
    assert values[0] / 2.0 == pytest.approx(math.sqrt(2) / sigma_omega, rel=1e-4)


def test_predict_t2star_power_doubling():
    lam = 0.56
    env = NoiseEnvironment(electrical=SpectralGaussian(lam, 6.65))
    base = predict_T2star(env, P, 5.0, calibration=1.0)
    double = predict_T2star(env, P, 5.0, calibration=2.0)
    assert double / base == pytest.approx(2 ** (-1 / (1 + lam)), rel=0.01)


def test_estimators_follow_sklearn_protocol():
    est = StretchedExponential(alpha=1.5, fit_amplitude=False)
    assert est.get_params() == {"alpha": 1.5, "fit_amplitude": False, "absolute_sigma": False, "check_range": True}
    copy = clone(est)
    assert copy.get_params() == est.get_params() and copy is not est
    tau = np.geomspace(1e-8, 1e-5, 30)
    y = _stretched(tau, 1e-6, 1.5)
    np.testing.assert_allclose(est.fit(tau, y).predict(tau), y, rtol=1e-6, atol=1e-12)
    assert est.score(tau, y) == pytest.approx(1.0)


def test_ff_curve_fit_reports_json():
    tau = np.geomspace(1e-7, 1e-5, 40)
    curve = ff_visibility(SequenceSpec.hahn(), SpectralGaussian(0.56, 1e10), tau)
    keep = (curve.visibility > 0.02) & (curve.visibility < 0.99)
    fit = fit_stretched_exp(DecayCurve(tau[keep], curve.visibility[keep], np.zeros(keep.sum())))
    d = fit.to_dict()
    assert [p["name"] for p in d["parameters"]] == ["amplitude", "t2", "alpha"]
    assert math.isfinite(d["residual_norm"])
