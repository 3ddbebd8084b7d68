"""Exponent extraction from decay curves, sweeps and intensity autocorrelations.

Thin functional layer over the estimators in :mod:`holespin.fitting`, plus
the optical intensity model and the Ramsey-time prediction from a
calibrated noise environment.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.optimize import brentq
from scipy.stats import binomtest

from .coherence import DecayCurve, NoiseEnvironment, _default_band, ff_chi, ff_visibility, detuning_spectrum
from .fitting import (
    AutocorrelationModel,
    FitResult,
    GlobalStretchedExponential,
    InsufficientDataError,
    PowerLaw,
    StretchedExponential,
)
from .noise import QuasiStaticGaussian, Trajectory
from .sequences import SequenceSpec

__all__ = [
    "UncalibratedModelError",
    "fit_stretched_exp",
    "global_alpha_fit",
    "fit_scaling",
    "fit_power_law_field",
    "lambda_from_gamma",
    "gamma_from_lambda",
    "simulate_intensity",
    "fit_autocorr_model",
    "residual_sign_test",
    "chi_at",
    "decay_time",
    "calibrate_amplitude",
    "predict_T2star",
]


class UncalibratedModelError(ValueError):
    """A prediction was requested without a coupling calibration."""


def _sigma(curve: DecayCurve):
    return curve.stderr if np.all(curve.stderr > 0) else None


def fit_stretched_exp(curve: DecayCurve, fix_alpha=None, fit_amplitude=True) -> FitResult:
    """Fit ``V0 exp(-(tau/T2)**alpha)`` to a decay curve, weighting by its standard errors.

    Curves without standard errors (all zero) are fitted unweighted.
    """
    est = StretchedExponential(alpha=fix_alpha, fit_amplitude=fit_amplitude)
    est.fit(curve.delays, curve.visibility, sigma=_sigma(curve))
    res = est.result_
    res.estimator = est
    return res


def global_alpha_fit(curves, labels=None, fit_amplitude=True) -> FitResult:
    """Joint fit of several decay curves with one shared stretch exponent.

    ``labels`` name the curves (default: their index). The diagnostics
    carry the independent-fit alphas and the heterogeneity flag.
    """
    curves = list(curves)
    if len(curves) < 2:
        raise InsufficientDataError("a global fit needs at least two curves")
    if labels is None:
        labels = [str(i) for i in range(len(curves))]
    tau = np.concatenate([c.delays for c in curves])
    v = np.concatenate([c.visibility for c in curves])
    groups = np.concatenate([[str(lab)] * len(c.delays) for lab, c in zip(labels, curves)])
    weighted = all(np.all(c.stderr > 0) for c in curves)
    sigma = np.concatenate([c.stderr for c in curves]) if weighted else None
    est = GlobalStretchedExponential(fit_amplitude=fit_amplitude)
    est.fit(tau, v, groups, sigma=sigma)
    res = est.result_
    res.estimator = est
    return res


def _points(points):
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise ValueError("points must be (x, y) or (x, y, sigma_y) rows")
    sigma = arr[:, 2] if arr.shape[1] == 3 else None
    return arr[:, 0], arr[:, 1], sigma


def _power_law(points, model, names):
    x, y, sigma = _points(points)
    if np.unique(x).size < 3:
        raise InsufficientDataError("need at least 3 distinct abscissae")
    if np.any(y <= 0):
        raise ValueError("times must be > 0")
    est = PowerLaw().fit(x, y, sigma=sigma)
    res = est.result_
    res.model = model
    pre, exp = names
    res.params = {pre: res.params["prefactor"], exp: res.params["exponent"]}
    res.sigmas = {pre: res.sigmas["prefactor"], exp: res.sigmas["exponent"]}
    res.estimator = est
    return res


def fit_scaling(points) -> FitResult:
    """``T2(N) = T2_0 * N**gamma`` from (n_pi, T2[, sigma]) rows."""
    return _power_law(points, "decoupling_scaling", ("t2_0", "gamma"))


def fit_power_law_field(points) -> FitResult:
    """``T(B) = prefactor * B**exponent`` from (b_ext, T[, sigma]) rows."""
    return _power_law(points, "field_scaling", ("prefactor", "exponent"))


def lambda_from_gamma(gamma):
    """Noise exponent from the decoupling exponent, ``lambda = gamma / (1 - gamma)``."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma < 0) or np.any(gamma >= 1):
        raise ValueError("gamma must lie in [0, 1)")
    out = gamma / (1 - gamma)
    return float(out) if out.ndim == 0 else out


def gamma_from_lambda(lam):
    """Decoupling exponent from the noise exponent, ``gamma = lambda / (1 + lambda)``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("lambda must be >= 0")
    out = lam / (1 + lam)
    return float(out) if out.ndim == 0 else out


def simulate_intensity(delta_f, linewidth_hz, k_stark, intensity0=1.0, laser_detuning_hz=0.0) -> Trajectory:
    """Resonance-fluorescence intensity under Stark-shift noise.

    ``I = I0 / (1 + (2 (k_stark dF + laser_detuning) / linewidth)**2)``: a
    Lorentzian line of full width ``linewidth_hz`` whose centre moves by
    ``k_stark`` Hz per V/m. ``delta_f`` is a
    :class:`~holespin.noise.Trajectory` in V/m. A laser detuned to the flank
    of the line turns small shifts into a linear intensity response; on
    resonance the response is quadratic.
    """
    if linewidth_hz <= 0:
        raise ValueError("linewidth_hz must be > 0")
    shift = k_stark * np.asarray(delta_f.samples, dtype=float) + laser_detuning_hz
    intensity = intensity0 / (1 + (2 * shift / linewidth_hz) ** 2)
    return Trajectory(dt=delta_f.dt, samples=intensity, seed=delta_f.seed)


def fit_autocorr_model(lags, g, n_exponentials=4, power_law=True, sigma=None, n_starts=8, offset=False) -> FitResult:
    """Fit exponentials plus a ``tau**(lambda - 1)`` term to an autocorrelation curve.

    Lags are expected on a log-spaced grid spanning several decades.
    Near-coincident fitted time constants are flagged in the diagnostics.
    ``offset`` adds a constant baseline to the model.
    """
    lags = np.asarray(lags, dtype=float)
    if n_exponentials == 0 and not power_law:
        raise ValueError("model has no components")
    if lags.size and lags.min() > 0 and math.log10(lags.max() / lags.min()) < 4 and power_law and n_exponentials:
        raise InsufficientDataError("lags must span at least 4 decades to separate the components")
    est = AutocorrelationModel(n_exponentials=n_exponentials, power_law=power_law, n_starts=n_starts, offset=offset)
    est.fit(lags, g, sigma=sigma)
    res = est.result_
    if power_law and n_exponentials == 0 and est.power_amplitude_ == 0:
        raise InsufficientDataError("zero power-law amplitude with no exponentials")
    res.estimator = est
    return res


def residual_sign_test(residuals):
    """Binomial sign test for serial structure in fit residuals.

    Counts sign changes between neighbouring residuals. Independent
    residuals change sign with probability 1/2; a missing model component
    leaves long same-sign runs and hence few changes. Returns
    ``(n_changes, n_pairs, p_value)`` with a one-sided p-value.
    """
    r = np.asarray(residuals, dtype=float)
    signs = np.sign(r[r != 0])
    if signs.size < 3:
        raise InsufficientDataError("need at least 3 non-zero residuals")
    changes = int(np.count_nonzero(signs[1:] != signs[:-1]))
    pairs = signs.size - 1
    return changes, pairs, float(binomtest(changes, pairs, 0.5, alternative="less").pvalue)


# ---------------------------------------------------------------------------
# Calibration and prediction


def chi_at(sequence: SequenceSpec, environment: NoiseEnvironment, params, b_ext, tau, gaussian_approximation=True):
    """Filter-function phase variance exponent at a single delay (band cutoffs must be set)."""
    spectrum = detuning_spectrum(environment, params, b_ext, gaussian_approximation)
    return ff_chi(sequence.at(tau), spectrum)


def _fixed_band(environment, t_lo=1e-11, t_hi=1e-1):
    return environment.with_band(*_default_band(np.array([t_lo, t_hi])))


def decay_time(sequence: SequenceSpec, environment: NoiseEnvironment, params, b_ext, gaussian_approximation=True,
               t_lo=1e-11, t_hi=1e-1):
    """Delay at which the filter-function visibility falls to 1/e.

    Unset spectral cutoffs are fixed from the bracket ``[t_lo, t_hi]`` so
    that the answer does not depend on a delay grid.
    """
    env = _fixed_band(environment, t_lo, t_hi)
    spectrum = detuning_spectrum(env, params, b_ext, gaussian_approximation)

    def f(log_tau):
        return ff_chi(sequence.at(math.exp(log_tau)), spectrum) - 1.0

    a, b = math.log(t_lo), math.log(t_hi)
    if f(a) > 0 or f(b) < 0:
        raise ValueError("1/e time lies outside the search bracket")
    return math.exp(brentq(f, a, b, xtol=1e-10))


def calibrate_amplitude(environment: NoiseEnvironment, params, b_ext, target_time, sequence=None,
                        channels=("electrical",)):
    """Power factor that puts the decay time of ``sequence`` (Hahn by default) at ``target_time``.

    The phase variance is linear in the noise power, so the factor is
    ``1 / chi(target_time)`` of the unscaled environment, with ``chi``
    restricted to the selected channels.
    """
    if target_time <= 0:
        raise ValueError("target_time must be > 0")
    sequence = sequence or SequenceSpec.hahn()
    env = _fixed_band(environment)
    selected = NoiseEnvironment(**{c: m for c, m in env.channels().items() if c in channels})
    if not selected.channels():
        raise ValueError(f"no noise on channels {channels}")
    others = NoiseEnvironment(**{c: m for c, m in env.channels().items() if c not in channels})
    chi_sel = chi_at(sequence, selected, params, b_ext, target_time)
    chi_other = chi_at(sequence, others, params, b_ext, target_time) if others.channels() else 0.0
    if chi_sel <= 0:
        raise ValueError("selected channels do not dephase this sequence")
    if chi_other >= 1:
        raise ValueError("the remaining channels alone decay faster than the target")
    return (1.0 - chi_other) / chi_sel


def _all_quasi_static(environment):
    def qs(m):
        members = getattr(m, "members", None)
        if members:
            return all(qs(x) for x in members)
        return isinstance(m, QuasiStaticGaussian)

    return all(qs(m) for m in environment.channels().values())


def predict_T2star(environment: NoiseEnvironment, params, b_ext, calibration, channels=("electrical",),
                   n_delays=40, return_fit=False):
    """Ramsey 1/e time predicted by a calibrated noise environment.

    ``calibration`` is the power factor applied to ``channels`` (see
    :func:`calibrate_amplitude`). A filter-function Ramsey curve is
    computed around the decay and fitted with a stretched exponential
    (alpha fixed at 2 when every source is quasi-static); the fitted ``T2``
    is returned.
    """
    if calibration is None:
        raise UncalibratedModelError("a coupling calibration factor is required")
    if not (calibration > 0 and math.isfinite(calibration)):
        raise ValueError("calibration must be finite and > 0")
    env = _fixed_band(environment).scaled(calibration, channels=channels)
    seq = SequenceSpec.ramsey()
    t_e = decay_time(seq, env, params, b_ext)
    delays = np.geomspace(0.15 * t_e, 2.5 * t_e, n_delays)
    curve = ff_visibility(seq, env, delays, params, b_ext, gaussian_approximation=True)
    alpha = 2.0 if _all_quasi_static(env) else None
    fit = fit_stretched_exp(curve, fix_alpha=alpha)
    if return_fit:
        return fit["t2"], fit
    return fit["t2"]
