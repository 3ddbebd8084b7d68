"""Least-squares estimators for decay curves, scaling laws and autocorrelations.

The estimators follow the scikit-learn conventions: hyper-parameters go to
``__init__``, ``fit`` returns ``self`` and sets trailing-underscore
attributes, ``predict`` evaluates the fitted model. Each fitted estimator
also carries a :class:`FitResult` in ``result_``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_consistent_length, check_is_fitted, column_or_1d

__all__ = [
    "FitResult",
    "FitError",
    "InsufficientDataError",
    "StretchedExponential",
    "GlobalStretchedExponential",
    "PowerLaw",
    "AutocorrelationModel",
]

#: Optimizer stopping rule: relative parameter change or iteration cap.
XTOL = 1e-8
MAX_ITER = 200


class FitError(RuntimeError):
    """The optimizer did not converge."""


class InsufficientDataError(ValueError):
    """The data cannot constrain the requested model."""


@dataclass
class FitResult:
    """Parameter estimates with 1-sigma uncertainties from the local curvature."""

    model: str
    params: dict
    sigmas: dict
    covariance: np.ndarray | None
    residual_norm: float
    converged: bool
    n_points: int = 0
    diagnostics: dict = field(default_factory=dict)
    estimator: object = field(default=None, repr=False, compare=False)

    def __getitem__(self, name):
        return self.params[name]

    def to_dict(self, covariance=False):
        d = {
            "model": self.model,
            "converged": self.converged,
            "residual_norm": self.residual_norm,
            "n_points": self.n_points,
            "parameters": [
                {"name": k, "estimate": v, "sigma": self.sigmas.get(k)} for k, v in self.params.items()
            ],
            "diagnostics": self.diagnostics,
        }
        if covariance and self.covariance is not None:
            d["covariance"] = np.asarray(self.covariance).tolist()
        return d

    def to_json(self, covariance=False):
        return json.dumps(_jsonable(self.to_dict(covariance)), indent=2, sort_keys=True) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def _prepare(x, y, sigma):
    x = column_or_1d(np.asarray(x, dtype=float), warn=True)
    y = column_or_1d(np.asarray(y, dtype=float))
    check_consistent_length(x, y)
    if sigma is None:
        w = np.ones_like(y)
        weighted = False
    else:
        sigma = column_or_1d(np.asarray(sigma, dtype=float))
        check_consistent_length(x, sigma)
        if np.all(sigma > 0):
            w = 1.0 / sigma
            weighted = True
        else:
            w = np.ones_like(y)
            weighted = False
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("inputs must be finite")
    return x, y, w, weighted


def _covariance(jac, cost, n, absolute_sigma):
    """Covariance from the Gauss-Newton Hessian; scaled by the reduced chi**2 unless absolute."""
    jtj = jac.T @ jac
    cov = np.linalg.pinv(jtj)
    dof = n - jac.shape[1]
    if not absolute_sigma:
        cov = cov * (2 * cost / dof if dof > 0 else np.inf)
    return cov


def _solve(fun, x0, jac, bounds=(-np.inf, np.inf), method=None):
    if method is None:
        method = "lm" if np.all(np.isinf(bounds[0])) and np.all(np.isinf(bounds[1])) else "trf"
    n = len(x0)
    return optimize.least_squares(
        fun,
        x0,
        jac=jac,
        bounds=bounds,
        method=method,
        xtol=XTOL,
        ftol=1e-12,
        gtol=1e-12,
        max_nfev=MAX_ITER * (n + 1),
        x_scale="jac" if method == "trf" else 1.0,
    )


def _stretched(tau, amplitude, t2, alpha):
    return amplitude * np.exp(-((tau / t2) ** alpha))


def _initial_stretched(tau, v, alpha=None):
    v0 = float(np.max(v[: max(2, len(v) // 10)]))
    if v0 <= 0:
        v0 = float(np.max(v))
    r = v / v0
    below = np.nonzero(r < np.exp(-1))[0]
    if below.size:
        i = below[0]
        if i == 0:
            t2 = float(tau[0])
        else:
            # crossing of log(r) = -1 between neighbouring delays
            lr = np.log(np.clip(r[[i - 1, i]], 1e-300, None))
            frac = (-1 - lr[0]) / (lr[1] - lr[0])
            t2 = float(np.exp(np.log(tau[i - 1]) + frac * np.log(tau[i] / tau[i - 1])))
    else:
        t2 = float(tau[-1]) * 2
    if alpha is None:
        ok = (r > 0.05) & (r < 0.95)
        if ok.sum() >= 2:
            alpha = float(np.polyfit(np.log(tau[ok]), np.log(-np.log(r[ok])), 1)[0])
            alpha = min(max(alpha, 0.3), 4.0)
        else:
            alpha = 1.5
    return v0, t2, alpha


class StretchedExponential(RegressorMixin, BaseEstimator):
    """Fit ``V(tau) = amplitude * exp(-(tau / t2) ** alpha)``.

    Parameters
    ----------
    alpha : float or None
        Fixed stretch exponent; ``None`` fits it.
    fit_amplitude : bool
        Fit the prefactor ``amplitude``; otherwise it is held at 1.
    absolute_sigma : bool
        Treat ``sigma`` as absolute errors instead of relative weights.
    check_range : bool
        Require the data to span from above 0.8 to below 0.3 of the
        prefactor when ``alpha`` is free.
    """

    def __init__(self, alpha=None, fit_amplitude=True, absolute_sigma=False, check_range=True):
        self.alpha = alpha
        self.fit_amplitude = fit_amplitude
        self.absolute_sigma = absolute_sigma
        self.check_range = check_range

    def _names(self):
        names = []
        if self.fit_amplitude:
            names.append("amplitude")
        names.append("t2")
        if self.alpha is None:
            names.append("alpha")
        return names

    def fit(self, X, y, sigma=None):
        tau, v, w, weighted = _prepare(X, y, sigma)
        if np.any(tau <= 0):
            raise ValueError("delays must be > 0")
        if self.alpha is None:
            if tau.size < 5:
                raise InsufficientDataError("a free-alpha fit needs at least 5 points")
            v_ref = np.max(v)
            if self.check_range and not (np.any(v > 0.8 * v_ref) and np.any(v < 0.3 * v_ref)):
                raise InsufficientDataError("data must span from > 0.8 to < 0.3 of the initial visibility")
        elif tau.size < (2 if self.fit_amplitude else 1):
            raise InsufficientDataError("not enough points")
        a0, t0, al0 = _initial_stretched(tau, v, self.alpha)
        fixed_alpha = self.alpha

        def unpack(p):
            i = 0
            amp = 1.0
            if self.fit_amplitude:
                amp = p[i]
                i += 1
            log_t2 = p[i]
            i += 1
            alpha = p[i] if fixed_alpha is None else fixed_alpha
            return amp, log_t2, alpha

        def resid(p):
            amp, log_t2, alpha = unpack(p)
            return w * (_stretched(tau, amp, math.exp(log_t2), alpha) - v)

        def jac(p):
            amp, log_t2, alpha = unpack(p)
            x = tau / math.exp(log_t2)
            xa = x**alpha
            e = np.exp(-xa)
            cols = []
            if self.fit_amplitude:
                cols.append(e)
            cols.append(amp * e * xa * alpha)
            if fixed_alpha is None:
                cols.append(-amp * e * xa * np.log(x))
            return w[:, None] * np.column_stack(cols)

        p0 = ([a0] if self.fit_amplitude else []) + [math.log(t0)] + ([al0] if fixed_alpha is None else [])
        res = _solve(resid, np.array(p0), jac)
        if not res.success:
            raise FitError(res.message)
        amp, log_t2, alpha = unpack(res.x)
        cov_p = _covariance(res.jac, res.cost, tau.size, self.absolute_sigma and weighted)
        # log(t2) -> t2
        t2 = math.exp(log_t2)
        scale = np.ones(len(res.x))
        scale[1 if self.fit_amplitude else 0] = t2
        cov = cov_p * np.outer(scale, scale)
        names = self._names()
        values = {"amplitude": amp, "t2": t2, "alpha": alpha}
        sig = np.sqrt(np.clip(np.diag(cov), 0, None))
        self.amplitude_ = amp
        self.t2_ = t2
        self.alpha_ = alpha
        self.covariance_ = cov
        self.n_iter_ = res.nfev
        self.result_ = FitResult(
            model="stretched_exponential",
            params={k: values[k] for k in names},
            sigmas=dict(zip(names, sig)),
            covariance=cov,
            residual_norm=float(np.sqrt(2 * res.cost)),
            converged=True,
            n_points=int(tau.size),
            diagnostics={"fixed_alpha": fixed_alpha} if fixed_alpha is not None else {},
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "t2_")
        tau = column_or_1d(np.asarray(X, dtype=float), warn=True)
        return _stretched(tau, self.amplitude_, self.t2_, self.alpha_)


class GlobalStretchedExponential(BaseEstimator):
    """Joint stretched-exponential fit of several curves sharing one ``alpha``.

    ``groups`` labels the curve each point belongs to. Every group gets its
    own ``t2`` (and amplitude when ``fit_amplitude``). After fitting, the
    shared-alpha residual is compared with independent free-alpha fits by an
    F-test; ``alpha_heterogeneous_`` is set when the shared model is rejected
    at ``heterogeneity_level``.
    """

    def __init__(self, fit_amplitude=True, absolute_sigma=False, heterogeneity_level=0.01):
        self.fit_amplitude = fit_amplitude
        self.absolute_sigma = absolute_sigma
        self.heterogeneity_level = heterogeneity_level

    def fit(self, X, y, groups, sigma=None):
        tau, v, w, weighted = _prepare(X, y, sigma)
        groups = column_or_1d(np.asarray(groups))
        check_consistent_length(tau, groups)
        labels = list(dict.fromkeys(groups.tolist()))
        if len(labels) < 2:
            raise InsufficientDataError("a global fit needs at least two curves")
        index = np.array([labels.index(g) for g in groups.tolist()])
        n_g = len(labels)
        singles = []
        for g in range(n_g):
            m = index == g
            est = StretchedExponential(fit_amplitude=self.fit_amplitude, check_range=False)
            est.fit(tau[m], v[m], None if not weighted else 1.0 / w[m])
            singles.append(est)
        alpha0 = float(np.median([s.alpha_ for s in singles]))

        def unpack(p):
            alpha = p[0]
            log_t2 = p[1 : 1 + n_g]
            amp = p[1 + n_g :] if self.fit_amplitude else np.ones(n_g)
            return alpha, log_t2, amp

        def resid(p):
            alpha, log_t2, amp = unpack(p)
            return w * (_stretched(tau, amp[index], np.exp(log_t2[index]), alpha) - v)

        def jac(p):
            alpha, log_t2, amp = unpack(p)
            x = tau / np.exp(log_t2[index])
            xa = x**alpha
            e = np.exp(-xa)
            J = np.zeros((tau.size, len(p)))
            J[:, 0] = -amp[index] * e * xa * np.log(x)
            rows = np.arange(tau.size)
            J[rows, 1 + index] = amp[index] * e * xa * alpha
            if self.fit_amplitude:
                J[rows, 1 + n_g + index] = e
            return w[:, None] * J

        p0 = [alpha0] + [math.log(s.t2_) for s in singles]
        if self.fit_amplitude:
            p0 += [s.amplitude_ for s in singles]
        res = _solve(resid, np.array(p0), jac)
        if not res.success:
            raise FitError(res.message)
        alpha, log_t2, amp = unpack(res.x)
        cov = _covariance(res.jac, res.cost, tau.size, self.absolute_sigma and weighted)
        t2 = np.exp(log_t2)
        scale = np.ones(len(res.x))
        scale[1 : 1 + n_g] = t2
        cov = cov * np.outer(scale, scale)
        sig = np.sqrt(np.clip(np.diag(cov), 0, None))

        rss_shared = 2 * res.cost
        rss_free = sum(float(np.sum((w[index == g] * (s.predict(tau[index == g]) - v[index == g])) ** 2)) for g, s in enumerate(singles))
        n_free = n_g * (3 if self.fit_amplitude else 2)
        dof_free = tau.size - n_free
        extra = n_g - 1
        scale_rss = max(rss_free, 1e-300)
        if dof_free > 0 and rss_shared > rss_free:
            f_stat = ((rss_shared - rss_free) / extra) / (scale_rss / dof_free)
            p_value = float(stats.f.sf(f_stat, extra, dof_free))
        else:
            f_stat, p_value = 0.0, 1.0
        self.alpha_ = float(alpha)
        self.t2_ = dict(zip(labels, t2.tolist()))
        self.amplitude_ = dict(zip(labels, np.asarray(amp, dtype=float).tolist()))
        self.groups_ = labels
        self.covariance_ = cov
        self.heterogeneity_pvalue_ = p_value
        self.alpha_heterogeneous_ = bool(p_value < self.heterogeneity_level)
        params = {"alpha": float(alpha)}
        sigmas = {"alpha": float(sig[0])}
        for i, g in enumerate(labels):
            params[f"t2[{g}]"] = float(t2[i])
            sigmas[f"t2[{g}]"] = float(sig[1 + i])
            if self.fit_amplitude:
                params[f"amplitude[{g}]"] = float(amp[i])
                sigmas[f"amplitude[{g}]"] = float(sig[1 + n_g + i])
        self.result_ = FitResult(
            model="global_stretched_exponential",
            params=params,
            sigmas=sigmas,
            covariance=cov,
            residual_norm=float(np.sqrt(rss_shared)),
            converged=True,
            n_points=int(tau.size),
            diagnostics={
                "independent_residual_norm": float(np.sqrt(rss_free)),
                "independent_alphas": {str(g): s.alpha_ for g, s in zip(labels, singles)},
                "f_statistic": float(f_stat),
                "heterogeneity_pvalue": p_value,
                "alpha_heterogeneous": self.alpha_heterogeneous_,
            },
        )
        return self

    def predict(self, X, groups):
        check_is_fitted(self, "alpha_")
        tau = column_or_1d(np.asarray(X, dtype=float), warn=True)
        groups = column_or_1d(np.asarray(groups)).tolist()
        t2 = np.array([self.t2_[g] for g in groups])
        amp = np.array([self.amplitude_[g] for g in groups])
        return _stretched(tau, amp, t2, self.alpha_)


class PowerLaw(RegressorMixin, BaseEstimator):
    """``y = prefactor * x ** exponent`` by weighted linear regression in log-log space."""

    def __init__(self, absolute_sigma=False):
        self.absolute_sigma = absolute_sigma

    def fit(self, X, y, sigma=None):
        x, y, w, weighted = _prepare(X, y, sigma)
        if x.size < 3:
            raise InsufficientDataError("need at least 3 points")
        if np.unique(x).size < 2:
            raise InsufficientDataError("need at least 2 distinct x values")
        if np.any(x <= 0) or np.any(y <= 0):
            raise ValueError("power-law fits need positive x and y")
        lx, ly = np.log(x), np.log(y)
        # sigma_log(y) = sigma_y / y
        wl = w * y if weighted else np.ones_like(y)
        A = np.column_stack([np.ones_like(lx), lx]) * wl[:, None]
        b = ly * wl
        coef, *_ = np.linalg.lstsq(A, b, rcond=None)
        r = A @ coef - b
        rss = float(r @ r)
        cov = np.linalg.inv(A.T @ A)
        dof = x.size - 2
        if not (self.absolute_sigma and weighted):
            cov = cov * (rss / dof)
        sig = np.sqrt(np.clip(np.diag(cov), 0, None))
        self.exponent_ = float(coef[1])
        self.prefactor_ = float(math.exp(coef[0]))
        self.exponent_sigma_ = float(sig[1])
        self.covariance_ = cov
        self.result_ = FitResult(
            model="power_law",
            params={"prefactor": self.prefactor_, "exponent": self.exponent_},
            sigmas={"prefactor": self.prefactor_ * float(sig[0]), "exponent": self.exponent_sigma_},
            covariance=cov,
            residual_norm=math.sqrt(rss),
            converged=True,
            n_points=int(x.size),
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "exponent_")
        x = column_or_1d(np.asarray(X, dtype=float), warn=True)
        return self.prefactor_ * x**self.exponent_


class AutocorrelationModel(BaseEstimator):
    """Sum of exponentials plus a power law, ``sum_i a_i exp(-k_i t) + b (t/t0)**(lambda - 1)``.

    ``t0`` is the smallest lag in the data. The landscape is multimodal, so
    the fit restarts from ``n_starts`` log-spaced sets of initial rates; the
    linear amplitudes of each start come from non-negative least squares.

    Parameters
    ----------
    n_exponentials : int
        Number of exponential components.
    power_law : bool
        Include the power-law component.
    n_starts : int
        Number of multi-start initializations.
    offset : bool
        Add a constant baseline (of either sign). Mean subtraction over a
        finite record biases the estimated autocorrelation of long-memory
        noise by a nearly lag-independent amount, which the baseline absorbs.
    """

    def __init__(self, n_exponentials=4, power_law=True, n_starts=8, absolute_sigma=False, offset=False):
        self.n_exponentials = n_exponentials
        self.power_law = power_law
        self.n_starts = n_starts
        self.absolute_sigma = absolute_sigma
        self.offset = offset

    @property
    def _n_par(self):
        return 2 * self.n_exponentials + (2 if self.power_law else 0) + (1 if self.offset else 0)

    def _model(self, p, x):
        k = self.n_exponentials
        amps, log_rates = p[:k], p[k : 2 * k]
        out = (amps[None, :] * np.exp(-np.exp(log_rates)[None, :] * x[:, None])).sum(axis=1) if k else np.zeros_like(x)
        if self.power_law:
            b, lam = p[2 * k], p[2 * k + 1]
            out = out + b * x ** (lam - 1)
        if self.offset:
            out = out + p[-1]
        return out

    def _jac(self, p, x):
        k = self.n_exponentials
        cols = []
        rates = np.exp(p[k : 2 * k])
        e = np.exp(-rates[None, :] * x[:, None])
        for i in range(k):
            cols.append(e[:, i])
        for i in range(k):
            cols.append(-p[i] * e[:, i] * rates[i] * x)
        if self.power_law:
            b, lam = p[2 * k], p[2 * k + 1]
            xp = x ** (lam - 1)
            cols.append(xp)
            cols.append(b * xp * np.log(x))
        if self.offset:
            cols.append(np.ones_like(x))
        return np.column_stack(cols)

    def fit(self, X, y, sigma=None):
        lags, g, w, weighted = _prepare(X, y, sigma)
        k = self.n_exponentials
        if k == 0 and not self.power_law:
            raise ValueError("model has no components")
        if np.any(lags <= 0):
            raise ValueError("lags must be > 0")
        if not weighted:
            # relative weighting keeps the long-lag tail from being ignored
            w = 1.0 / (np.abs(g) + 1e-3 * np.max(np.abs(g)))
        t0 = float(lags.min())
        x = lags / t0
        x_max = float(x.max())
        lo_rate, hi_rate = 0.01 / x_max, 100.0
        n_par = self._n_par
        lower = np.full(n_par, -np.inf)
        upper = np.full(n_par, np.inf)
        lower[:k] = 0.0
        lower[k : 2 * k] = math.log(lo_rate)
        upper[k : 2 * k] = math.log(hi_rate)
        if self.power_law:
            lower[2 * k] = 0.0
            lower[2 * k + 1], upper[2 * k + 1] = 1e-3, 0.999

        def resid(p):
            return w * (self._model(p, x) - g)

        def jac(p):
            return w[:, None] * self._jac(p, x)

        best = None
        span = math.log(x_max)
        for s in range(max(1, self.n_starts)):
            shift = (s + 0.5) / max(1, self.n_starts)
            # rates spread across the lag window, staggered between starts
            log_rates = -(np.arange(k) + shift) * span / max(k, 1) if k else np.empty(0)
            lam0 = (0.3, 0.5, 0.7)[s % 3] if self.power_law else 0.5
            basis = [np.exp(-np.exp(lr) * x) for lr in log_rates]
            if self.power_law:
                basis.append(x ** (lam0 - 1))
            B = np.column_stack(basis) * w[:, None]
            lin, _ = optimize.nnls(B, g * w)
            p0 = np.concatenate([lin[:k], log_rates])
            if self.power_law:
                p0 = np.concatenate([p0, [lin[k], lam0]])
            if self.offset:
                p0 = np.concatenate([p0, [0.0]])
            p0 = np.clip(p0, lower + 1e-12, upper - 1e-12)
            res = _solve(resid, p0, jac, bounds=(lower, upper), method="trf")
            if best is None or res.cost < best.cost:
                best = res
        res = best
        if res.status <= 0:
            raise FitError(res.message)
        p = res.x
        cov = _covariance(res.jac, res.cost, lags.size, self.absolute_sigma and weighted)
        sig = np.sqrt(np.clip(np.diag(cov), 0, None))
        rates = np.exp(p[k : 2 * k]) / t0
        rate_sig = rates * sig[k : 2 * k]
        order = np.argsort(rates)
        self.amplitudes_ = p[:k][order]
        self.rates_ = rates[order]
        self.time_constants_ = 1.0 / self.rates_
        self.amplitude_sigmas_ = sig[:k][order]
        self.rate_sigmas_ = rate_sig[order]
        self.t0_ = t0
        params, sigmas = {}, {}
        for i, j in enumerate(order):
            params[f"amplitude_{i}"] = float(p[j])
            sigmas[f"amplitude_{i}"] = float(sig[j])
            params[f"rate_{i}"] = float(rates[j])
            sigmas[f"rate_{i}"] = float(rate_sig[j])
        if self.power_law:
            self.power_amplitude_ = float(p[2 * k])
            self.power_amplitude_sigma_ = float(sig[2 * k])
            self.lambda_ = float(p[2 * k + 1])
            self.lambda_sigma_ = float(sig[2 * k + 1])
            params["power_amplitude"] = self.power_amplitude_
            sigmas["power_amplitude"] = self.power_amplitude_sigma_
            params["lambda"] = self.lambda_
            sigmas["lambda"] = self.lambda_sigma_
        if self.offset:
            self.offset_ = float(p[-1])
            params["offset"] = self.offset_
            sigmas["offset"] = float(sig[-1])
        self._p = p
        self.residuals_ = self._model(p, x) - g
        ratios = self.rates_[1:] / self.rates_[:-1] if k > 1 else np.array([])
        degenerate = bool(np.any(ratios < 1.2))
        at_bounds = bool(np.any(np.isclose(p[k : 2 * k], lower[k : 2 * k])) or np.any(np.isclose(p[k : 2 * k], upper[k : 2 * k])))
        self.result_ = FitResult(
            model="autocorrelation",
            params=params,
            sigmas=sigmas,
            covariance=cov,
            residual_norm=float(np.sqrt(2 * res.cost)),
            converged=True,
            n_points=int(lags.size),
            diagnostics={
                "reference_lag_s": t0,
                "degenerate_time_constants": degenerate,
                "rate_at_bound": at_bounds,
                "n_exponentials": k,
                "power_law": self.power_law,
            },
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "rates_")
        lags = column_or_1d(np.asarray(X, dtype=float), warn=True)
        return self._model(self._p, lags / self.t0_)

    def exponential_part(self, X):
        check_is_fitted(self, "rates_")
        lags = column_or_1d(np.asarray(X, dtype=float), warn=True)
        return (self.amplitudes_[None, :] * np.exp(-self.rates_[None, :] * lags[:, None])).sum(axis=1)
