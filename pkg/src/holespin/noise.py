"""Classical stochastic noise sources and their spectral properties.

Every model exposes

* ``sample(rng, dt, n, size)`` returning a ``(size, n)`` array of realizations,
* ``psd(f)``, the one-sided power spectral density (units**2 / Hz) where a
  density exists,
* ``spectral_lines()``, the discrete part of the spectrum as
  ``(frequency_hz, variance)`` pairs (quasi-static offsets sit at 0 Hz).

The module-level functions :func:`sample_trajectory`, :func:`analytic_psd`,
:func:`periodogram` and :func:`autocorrelation` are the public entry points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import ClassVar, NamedTuple

import numpy as np
from scipy import fft as sp_fft
from scipy import signal
from scipy.signal import lfilter
from scipy.special import ndtri

__all__ = [
    "NoiseModel",
    "Telegraph",
    "OrnsteinUhlenbeck",
    "SpectralGaussian",
    "QuasiStaticGaussian",
    "PrecessingField",
    "Composite",
    "Trajectory",
    "PSDCurve",
    "Autocorrelation",
    "NoAnalyticPSD",
    "telegraph_ensemble",
    "sample_trajectory",
    "analytic_psd",
    "periodogram",
    "autocorrelation",
    "noise_from_dict",
]


class NoAnalyticPSD(ValueError):
    """Raised when a model has no continuous spectral density."""


def _check_finite(**values):
    for name, value in values.items():
        if value is None:
            continue
        if not np.isfinite(value):
            raise ValueError(f"{name} must be finite, got {value!r}")


def _check_nonnegative(**values):
    _check_finite(**values)
    for name, value in values.items():
        if value is not None and value < 0:
            raise ValueError(f"{name} must be >= 0, got {value!r}")


def _as_frequency(f):
    f = np.asarray(f, dtype=float)
    if np.any(~np.isfinite(f)) or np.any(f <= 0):
        raise ValueError("frequencies must be finite and > 0")
    return f


class NoiseModel:
    """Base class of the stationary noise processes."""

    kind: ClassVar[str] = ""
    gaussian: ClassVar[bool] = True

    def sample(self, rng, dt, n, size=1, stratify=False):
        raise NotImplementedError

    def psd(self, f):
        raise NotImplementedError

    def spectral_lines(self):
        return []

    def variance(self):
        raise NotImplementedError

    def band_edges(self):
        """Frequencies where the density is discontinuous."""
        return []

    def scaled(self, factor):
        """Return a copy with the total power multiplied by ``factor``."""
        raise NotImplementedError

    def with_band(self, f_min=None, f_max=None):
        """Fill unset spectral cutoffs; models without cutoffs are unchanged."""
        return self

    def gaussianized(self):
        """Gaussian process with the same second-order statistics."""
        return self

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True)
class Telegraph(NoiseModel):
    """Two-level fluctuator switching with Poisson rates.

    ``rate_up`` is the low->high rate and ``rate_down`` the high->low rate.
    With ``levels="symmetric"`` the process takes values -a/+a, with
    ``levels="offset"`` it takes 0/a.
    """

    amplitude: float
    rate_up: float
    rate_down: float
    levels: str = "symmetric"

    kind: ClassVar[str] = "telegraph"
    gaussian: ClassVar[bool] = False

    def __post_init__(self):
        _check_nonnegative(amplitude=self.amplitude, rate_up=self.rate_up, rate_down=self.rate_down)
        if self.levels not in ("symmetric", "offset"):
            raise ValueError("levels must be 'symmetric' or 'offset'")
        if self.rate_up + self.rate_down <= 0:
            raise ValueError("at least one switching rate must be > 0")

    @property
    def total_rate(self):
        return self.rate_up + self.rate_down

    @property
    def p_high(self):
        return self.rate_up / self.total_rate

    @property
    def _span(self):
        return 2 * self.amplitude if self.levels == "symmetric" else self.amplitude

    @property
    def _low(self):
        return -self.amplitude if self.levels == "symmetric" else 0.0

    def mean(self):
        return self._low + self._span * self.p_high

    def variance(self):
        p = self.p_high
        return self._span**2 * p * (1 - p)

    def psd(self, f):
        f = _as_frequency(f)
        k = self.total_rate
        return 4 * self.variance() * k / (k**2 + (2 * np.pi * f) ** 2)

    def sample(self, rng, dt, n, size=1, stratify=False):
        duration = n * dt
        t = np.arange(n) * dt
        k_up, k_down = self.rate_up, self.rate_down
        mean_switch_rate = 2 * k_up * k_down / self.total_rate
        chunk = int(duration * mean_switch_rate + 10 * math.sqrt(duration * mean_switch_rate + 1) + 16)
        out = np.empty((size, n))
        for row in range(size):
            high = rng.random() < self.p_high
            # leaving rates alternate starting from the initial state
            first, second = (k_down, k_up) if high else (k_up, k_down)
            switches = []
            elapsed = 0.0
            while elapsed <= duration:
                draws = rng.standard_exponential(chunk)
                rates = np.where(np.arange(chunk) % 2 == 0, first, second)
                with np.errstate(divide="ignore"):
                    dwell = draws / rates
                if chunk % 2:
                    first, second = second, first
                times = elapsed + np.cumsum(dwell)
                switches.append(times)
                elapsed = times[-1]
            switch_times = np.concatenate(switches)
            parity = np.searchsorted(switch_times, t, side="right") % 2
            state = np.logical_xor(high, parity.astype(bool))
            out[row] = self._low + self._span * state
        return out

    def scaled(self, factor):
        return replace(self, amplitude=self.amplitude * math.sqrt(factor))

    def gaussianized(self):
        return OrnsteinUhlenbeck(sigma=math.sqrt(self.variance()), tau_c=1.0 / self.total_rate)

    def to_dict(self):
        return {
            "type": self.kind,
            "amplitude": self.amplitude,
            "rate_up_per_s": self.rate_up,
            "rate_down_per_s": self.rate_down,
            "levels": self.levels,
        }


@dataclass(frozen=True)
class OrnsteinUhlenbeck(NoiseModel):
    """Gaussian Markov process with exponential covariance sigma**2 exp(-|t|/tau_c)."""

    sigma: float
    tau_c: float

    kind: ClassVar[str] = "ornstein_uhlenbeck"

    def __post_init__(self):
        _check_nonnegative(sigma=self.sigma, tau_c=self.tau_c)
        if self.tau_c <= 0:
            raise ValueError("tau_c must be > 0")

    def variance(self):
        return self.sigma**2

    def psd(self, f):
        f = _as_frequency(f)
        return 4 * self.sigma**2 * self.tau_c / (1 + (2 * np.pi * f * self.tau_c) ** 2)

    def sample(self, rng, dt, n, size=1, stratify=False):
        rho = math.exp(-dt / self.tau_c)
        w = rng.standard_normal((size, n))
        w[:, 1:] *= self.sigma * math.sqrt(-math.expm1(-2 * dt / self.tau_c))
        w[:, 0] *= self.sigma
        return lfilter([1.0], [1.0, -rho], w, axis=-1)

    def scaled(self, factor):
        return replace(self, sigma=self.sigma * math.sqrt(factor))

    def to_dict(self):
        return {"type": self.kind, "sigma": self.sigma, "tau_c_s": self.tau_c}


@dataclass(frozen=True)
class SpectralGaussian(NoiseModel):
    """Gaussian noise with one-sided density ``amplitude / f**exponent`` on [f_min, f_max].

    Cutoffs left as ``None`` are filled in by the simulation engines
    (see :meth:`with_band`). Realizations are synthesized in the frequency
    domain; each FFT bin receives the exact band-limited power of its
    frequency interval.
    """

    exponent: float
    amplitude: float
    f_min: float | None = None
    f_max: float | None = None

    kind: ClassVar[str] = "spectral_gaussian"

    def __post_init__(self):
        _check_nonnegative(amplitude=self.amplitude, f_min=self.f_min, f_max=self.f_max)
        _check_finite(exponent=self.exponent)
        if not 0 < self.exponent < 1:
            raise ValueError(f"exponent must lie in (0, 1), got {self.exponent}")
        if self.f_min is not None and self.f_max is not None and not self.f_min < self.f_max:
            raise ValueError("f_min must be < f_max")

    def with_band(self, f_min=None, f_max=None):
        lo = self.f_min if self.f_min is not None else f_min
        hi = self.f_max if self.f_max is not None else f_max
        if lo is not None and hi is not None and lo >= hi:
            lo = hi / 10
        return replace(self, f_min=lo, f_max=hi)

    def _lo(self):
        return 0.0 if self.f_min is None else self.f_min

    def _hi(self):
        return math.inf if self.f_max is None else self.f_max

    def band_power(self, lo, hi):
        """Integrated density over [lo, hi] intersected with the band."""
        lo = np.maximum(np.asarray(lo, dtype=float), self._lo())
        hi = np.minimum(np.asarray(hi, dtype=float), self._hi())
        q = 1 - self.exponent
        power = self.amplitude / q * (hi**q - lo**q)
        return np.where(hi > lo, power, 0.0)

    def variance(self):
        if self.f_max is None:
            return math.inf
        return float(self.band_power(self._lo(), self._hi()))

    def psd(self, f):
        f = _as_frequency(f)
        inside = (f >= self._lo()) & (f <= self._hi())
        return np.where(inside, self.amplitude * f ** (-self.exponent), 0.0)

    def band_edges(self):
        return [e for e in (self.f_min, self.f_max) if e is not None and e > 0]

    def sample(self, rng, dt, n, size=1, stratify=False):
        n_fft = n
        if self.f_min is not None and self.f_min > 0:
            n_fft = max(n, math.ceil(1.0 / (self.f_min * dt)))
        n_fft = sp_fft.next_fast_len(n_fft + (n_fft % 2), real=True)
        if n_fft % 2:
            n_fft += 1
        df = 1.0 / (n_fft * dt)
        k = np.arange(n_fft // 2 + 1)
        lo = np.maximum(k - 0.5, 0) * df
        hi = np.minimum(k + 0.5, n_fft / 2) * df
        power = self.band_power(lo, hi)
        std = np.sqrt(power)
        re = rng.standard_normal((size, k.size)) * std
        im = rng.standard_normal((size, k.size)) * std
        spec = (n_fft / 2) * (re - 1j * im)
        spec[:, 0] = n_fft * re[:, 0]
        spec[:, -1] = n_fft * re[:, -1]
        x = sp_fft.irfft(spec, n=n_fft, axis=-1)
        return x[:, :n]

    def scaled(self, factor):
        return replace(self, amplitude=self.amplitude * factor)

    def to_dict(self):
        return {
            "type": self.kind,
            "exponent": self.exponent,
            "amplitude": self.amplitude,
            "f_min_hz": self.f_min,
            "f_max_hz": self.f_max,
        }


@dataclass(frozen=True)
class QuasiStaticGaussian(NoiseModel):
    """Gaussian offset frozen within a shot and redrawn between shots."""

    sigma: float

    kind: ClassVar[str] = "quasi_static"

    def __post_init__(self):
        _check_nonnegative(sigma=self.sigma)

    def variance(self):
        return self.sigma**2

    def psd(self, f):
        return np.zeros_like(_as_frequency(f))

    def spectral_lines(self):
        return [(0.0, self.sigma**2)]

    def sample(self, rng, dt, n, size=1, stratify=False):
        if stratify and size > 1:
            u = (rng.permutation(size) + rng.random(size)) / size
            z = ndtri(u)
        else:
            z = rng.standard_normal(size)
        return np.repeat((self.sigma * z)[:, None], n, axis=1)

    def scaled(self, factor):
        return replace(self, sigma=self.sigma * math.sqrt(factor))

    def to_dict(self):
        return {"type": self.kind, "sigma": self.sigma}


@dataclass(frozen=True)
class PrecessingField(NoiseModel):
    """Sum of randomly phased cosines, one per ``(rms, angular_frequency)`` pair.

    Each component is ``A cos(w t + phi)`` with Rayleigh ``A`` and uniform
    ``phi`` so that its value at any instant is Gaussian with standard
    deviation ``rms``.
    """

    components: tuple = ()

    kind: ClassVar[str] = "precessing"

    def __post_init__(self):
        comps = tuple((float(r), float(w)) for r, w in self.components)
        for rms, omega in comps:
            _check_nonnegative(rms=rms, angular_frequency=omega)
        object.__setattr__(self, "components", comps)

    def variance(self):
        return sum(r**2 for r, _ in self.components)

    def psd(self, f):
        raise NoAnalyticPSD("precessing fields have a line spectrum; use spectral_lines()")

    def spectral_lines(self):
        return [(w / (2 * np.pi), r**2) for r, w in self.components]

    def max_frequency(self):
        return max((w / (2 * np.pi) for _, w in self.components), default=0.0)

    def sample(self, rng, dt, n, size=1, stratify=False):
        t = np.arange(n) * dt
        out = np.zeros((size, n))
        for rms, omega in self.components:
            a = rms * rng.standard_normal(size)
            b = rms * rng.standard_normal(size)
            out += a[:, None] * np.cos(omega * t) + b[:, None] * np.sin(omega * t)
        return out

    def scaled(self, factor):
        s = math.sqrt(factor)
        return replace(self, components=tuple((r * s, w) for r, w in self.components))

    def to_dict(self):
        return {
            "type": self.kind,
            "components": [{"rms": r, "angular_frequency_rad_per_s": w} for r, w in self.components],
        }


@dataclass(frozen=True)
class Composite(NoiseModel):
    """Sum of independent member processes."""

    members: tuple = field(default_factory=tuple)

    kind: ClassVar[str] = "composite"

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("Composite needs at least one member")
        object.__setattr__(self, "members", members)

    @property
    def gaussian(self):
        return all(m.gaussian for m in self.members)

    def variance(self):
        return sum(m.variance() for m in self.members)

    def psd(self, f):
        f = _as_frequency(f)
        total = np.zeros_like(f)
        for m in self.members:
            if isinstance(m, (PrecessingField, QuasiStaticGaussian)):
                continue
            total = total + m.psd(f)
        return total

    def spectral_lines(self):
        return [line for m in self.members for line in m.spectral_lines()]

    def band_edges(self):
        return sorted({e for m in self.members for e in m.band_edges()})

    def sample(self, rng, dt, n, size=1, stratify=False):
        out = np.zeros((size, n))
        for m in self.members:
            out += m.sample(rng, dt, n, size, stratify=stratify)
        return out

    def scaled(self, factor):
        return replace(self, members=tuple(m.scaled(factor) for m in self.members))

    def with_band(self, f_min=None, f_max=None):
        return replace(self, members=tuple(m.with_band(f_min, f_max) for m in self.members))

    def gaussianized(self):
        return replace(self, members=tuple(m.gaussianized() for m in self.members))

    def to_dict(self):
        return {"type": self.kind, "members": [m.to_dict() for m in self.members]}


def telegraph_ensemble(exponent, variance, rate_min, rate_max, n_fluctuators=40):
    """Non-Gaussian 1/f**exponent noise built from symmetric fluctuators.

    Switching rates are log-spaced over ``[rate_min, rate_max]`` and weighted
    so that the summed Lorentzians follow ``f**-exponent`` between the two
    corner frequencies.
    """
    if not 0 < exponent < 1:
        raise ValueError("exponent must lie in (0, 1)")
    if not 0 < rate_min < rate_max:
        raise ValueError("need 0 < rate_min < rate_max")
    rates = np.geomspace(rate_min, rate_max, n_fluctuators)
    weights = rates ** (1 - exponent)
    variances = variance * weights / weights.sum()
    # symmetric telegraph: total rate 2*gamma, variance amplitude**2
    return Composite(
        tuple(
            Telegraph(amplitude=math.sqrt(v), rate_up=k / 2, rate_down=k / 2)
            for v, k in zip(variances, rates)
        )
    )


_REGISTRY = {
    "telegraph": lambda d: Telegraph(
        amplitude=d["amplitude"],
        rate_up=d["rate_up_per_s"],
        rate_down=d["rate_down_per_s"],
        levels=d.get("levels", "symmetric"),
    ),
    "ornstein_uhlenbeck": lambda d: OrnsteinUhlenbeck(sigma=d["sigma"], tau_c=d["tau_c_s"]),
    "spectral_gaussian": lambda d: SpectralGaussian(
        exponent=d["exponent"],
        amplitude=d["amplitude"],
        f_min=d.get("f_min_hz"),
        f_max=d.get("f_max_hz"),
    ),
    "quasi_static": lambda d: QuasiStaticGaussian(sigma=d["sigma"]),
    "precessing": lambda d: PrecessingField(
        tuple((c["rms"], c["angular_frequency_rad_per_s"]) for c in d["components"])
    ),
    "composite": lambda d: Composite(tuple(noise_from_dict(m) for m in d["members"])),
    "telegraph_ensemble": lambda d: telegraph_ensemble(
        d["exponent"], d["variance"], d["rate_min_per_s"], d["rate_max_per_s"], d.get("n_fluctuators", 40)
    ),
}


def noise_from_dict(d):
    """Build a :class:`NoiseModel` from its JSON representation."""
    try:
        factory = _REGISTRY[d["type"]]
    except KeyError:
        raise ValueError(f"unknown noise model type {d.get('type')!r}") from None
    return factory(d)


@dataclass(frozen=True)
class Trajectory:
    dt: float
    samples: np.ndarray
    seed: int

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if np.asarray(self.samples).size < 1:
            raise ValueError("trajectory must have at least one sample")

    def __len__(self):
        return len(self.samples)

    @property
    def times(self):
        return np.arange(len(self.samples)) * self.dt

    @property
    def duration(self):
        return len(self.samples) * self.dt


@dataclass(frozen=True)
class PSDCurve:
    frequencies: np.ndarray
    density: np.ndarray
    analytic: bool


class Autocorrelation(NamedTuple):
    lags: np.ndarray
    values: np.ndarray


def sample_trajectory(model: NoiseModel, dt: float, n: int, seed: int) -> Trajectory:
    """Draw one realization of ``model`` on ``n`` samples spaced ``dt`` apart.

    The same ``(model, dt, n, seed)`` always yields identical samples.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise ValueError("n must be a positive integer")
    if not (np.isfinite(dt) and dt > 0):
        raise ValueError("dt must be finite and > 0")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    samples = model.sample(rng, dt, int(n), size=1)[0]
    return Trajectory(dt=dt, samples=samples, seed=seed)


def analytic_psd(model: NoiseModel, f) -> np.ndarray:
    """One-sided spectral density of ``model`` at frequencies ``f`` > 0."""
    return model.psd(f)


def periodogram(traj: Trajectory, segment_length: int, window="hann", overlap=0.5) -> PSDCurve:
    """Welch estimate of the one-sided PSD of a trajectory.

    Segments are mean-detrended, so a constant trajectory gives zero density.
    The zero-frequency bin is dropped.
    """
    x = np.asarray(traj.samples, dtype=float)
    if x.size == 0:
        raise ValueError("empty trajectory")
    if segment_length < 2:
        raise ValueError("segment_length must be >= 2")
    if segment_length > x.size:
        raise ValueError("segment_length exceeds trajectory length")
    f, p = signal.welch(
        x,
        fs=1.0 / traj.dt,
        window=window,
        nperseg=segment_length,
        noverlap=int(segment_length * overlap),
        detrend="constant",
        scaling="density",
    )
    keep = f > 0
    return PSDCurve(frequencies=f[keep], density=np.maximum(p[keep], 0.0), analytic=False)


def autocorrelation(traj: Trajectory, max_lag: float, mode="normalized", lags=None) -> Autocorrelation:
    """Unbiased lag estimate of the autocorrelation of ``traj``.

    ``mode="normalized"`` returns <x(t)x(0)>/<x>**2 - 1 (intensity-style
    bunching, needs a non-zero mean); ``mode="covariance"`` returns the
    autocovariance divided by the variance. ``lags`` may select a subset of
    lags (seconds, rounded to the sample grid); by default every lag up to
    ``max_lag`` is returned.
    """
    x = np.asarray(traj.samples, dtype=float)
    n = x.size
    if max_lag >= traj.duration:
        raise ValueError("max_lag must be shorter than the trajectory duration")
    if mode not in ("normalized", "covariance"):
        raise ValueError("mode must be 'normalized' or 'covariance'")
    mean = x.mean()
    xc = x - mean
    var = xc.var()
    if mode == "normalized" and mean == 0:
        raise ValueError("normalized mode needs a non-zero mean")
    if mode == "covariance" and var == 0:
        raise ValueError("covariance mode needs non-zero variance")
    k_max = int(np.floor(max_lag / traj.dt + 1e-9))
    n_fft = sp_fft.next_fast_len(2 * n, real=True)
    spec = sp_fft.rfft(xc, n=n_fft)
    acov = sp_fft.irfft(spec * np.conj(spec), n=n_fft)[: k_max + 1]
    acov /= n - np.arange(k_max + 1)
    norm = mean**2 if mode == "normalized" else var
    values = acov / norm
    index = np.arange(k_max + 1)
    if lags is not None:
        index = np.unique(np.clip(np.rint(np.asarray(lags) / traj.dt).astype(int), 0, k_max))
        values = values[index]
    return Autocorrelation(lags=index * traj.dt, values=values)
