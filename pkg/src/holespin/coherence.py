"""Visibility decay curves by Monte-Carlo phase accumulation and filter functions.

Two engines compute the same quantity, ``V(tau) = |<exp(i phi)>|`` with
``phi = int_0^tau y(t) dw(t) dt``:

* :func:`mc_visibility` samples noise trajectories and integrates the phase
  numerically. It handles any noise model and imperfect pulses.
* :func:`ff_visibility` evaluates ``V = exp(-chi)`` with
  ``chi = 1/2 int_0^inf S_w(f) |Y(f)|**2 df`` for Gaussian noise, where
  ``S_w`` is the one-sided detuning density in (rad/s)**2/Hz and ``|Y|**2``
  is :func:`~holespin.sequences.filter_weight`. This normalization is the one
  for which quasi-static noise of variance ``s**2`` gives ``exp(-s**2 tau**2 / 2)``
  under Ramsey.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import simpson

from .noise import NoiseModel, PrecessingField, SpectralGaussian, noise_from_dict
from .sequences import (
    SequenceSpec,
    _cumulative_phase,
    _evolve,
    filter_weight,
    segment_phases,
    toggling_function,
)
from .spin import MU_B_OVER_H, DetuningTrajectory, QDParameters, build_detuning

__all__ = [
    "CHANNELS",
    "NoiseEnvironment",
    "DecayCurve",
    "EngineRejection",
    "DetuningSpectrum",
    "mc_visibility",
    "ff_visibility",
    "ff_chi",
    "detuning_spectrum",
    "echo_with_nuclear_precession",
    "precession_environment",
]

CHANNELS = ("detuning", "electrical", "nuclear_x", "nuclear_z")

#: Target number of samples held per Monte-Carlo block.
_BLOCK_BUDGET = 4_000_000
_MIN_BATCHES = 20


class EngineRejection(ValueError):
    """The requested engine cannot treat this noise configuration."""


@dataclass(frozen=True)
class NoiseEnvironment:
    """Noise sources feeding the spin, one optional model per channel.

    Units: ``detuning`` in rad/s, ``electrical`` in V/m, ``nuclear_x`` and
    ``nuclear_z`` (Overhauser field along the external field / growth axis)
    in Tesla.
    """

    detuning: NoiseModel | None = None
    electrical: NoiseModel | None = None
    nuclear_x: NoiseModel | None = None
    nuclear_z: NoiseModel | None = None

    def channels(self):
        return {c: getattr(self, c) for c in CHANNELS if getattr(self, c) is not None}

    def scaled(self, factor, channels=("electrical",)):
        """Multiply the power of the selected channels by ``factor``."""
        kwargs = self.channels()
        for c in channels:
            if kwargs.get(c) is not None:
                kwargs[c] = kwargs[c].scaled(factor)
        return NoiseEnvironment(**kwargs)

    def replace(self, **models):
        kwargs = self.channels()
        kwargs.update(models)
        return NoiseEnvironment(**kwargs)

    def with_band(self, f_min, f_max):
        return NoiseEnvironment(**{c: m.with_band(f_min, f_max) for c, m in self.channels().items()})

    def gaussianized(self):
        return NoiseEnvironment(**{c: m.gaussianized() for c, m in self.channels().items()})

    @property
    def max_line_frequency(self):
        lines = [f for m in self.channels().values() for f, _ in m.spectral_lines()]
        return max(lines, default=0.0)

    def to_dict(self):
        return [{"channel": c, "model": m.to_dict()} for c, m in self.channels().items()]

    @classmethod
    def from_dict(cls, items):
        kwargs = {}
        for item in items:
            channel = item["channel"]
            if channel not in CHANNELS:
                raise ValueError(f"unknown noise channel {channel!r}")
            model = noise_from_dict(item["model"])
            if channel in kwargs:
                from .noise import Composite

                model = Composite((kwargs[channel], model))
            kwargs[channel] = model
        return cls(**kwargs)


@dataclass
class DecayCurve:
    delays: np.ndarray
    visibility: np.ndarray
    stderr: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.delays = np.asarray(self.delays, dtype=float)
        self.visibility = np.asarray(self.visibility, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        if not (self.delays.shape == self.visibility.shape == self.stderr.shape):
            raise ValueError("delays, visibility and stderr must have equal shapes")
        if np.any(np.diff(self.delays) <= 0):
            raise ValueError("delays must be strictly increasing")
        if np.any(self.stderr < 0):
            raise ValueError("standard errors must be >= 0")
        if not np.all(np.isfinite(self.visibility)):
            raise ValueError("visibilities must be finite")

    def to_csv_text(self):
        buf = io.StringIO()
        buf.write("tau_s,visibility,stderr\n")
        for row in zip(self.delays, self.visibility, self.stderr):
            buf.write(",".join(f"{v:.17g}" for v in row) + "\n")
        return buf.getvalue()

    def save(self, path):
        """Write ``path`` (CSV) and the metadata sidecar ``path`` with a .json suffix."""
        path = Path(path)
        path.write_text(self.to_csv_text())
        path.with_suffix(".json").write_text(json.dumps(self.metadata, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        path = Path(path)
        with path.open() as fh:
            rows = list(csv.DictReader(fh))
        sidecar = path.with_suffix(".json")
        metadata = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(
            delays=[float(r["tau_s"]) for r in rows],
            visibility=[float(r["visibility"]) for r in rows],
            stderr=[float(r["stderr"]) for r in rows],
            metadata=metadata,
        )


def _couplings(params, b_ext):
    """Linear rad/s-per-unit couplings of each Gaussian-treatable channel."""
    return {
        "detuning": 1.0,
        "electrical": 2 * np.pi * params.dgdf * MU_B_OVER_H * b_ext,
        "nuclear_x": 2 * np.pi * MU_B_OVER_H * params.first_order_g,
    }


def _check_delays(delays):
    delays = np.asarray(delays, dtype=float)
    if delays.ndim != 1 or delays.size == 0:
        raise ValueError("delays must be a non-empty 1-d sequence")
    if np.any(~np.isfinite(delays)) or np.any(delays <= 0):
        raise ValueError("delays must be finite and > 0")
    if np.any(np.diff(delays) <= 0):
        raise ValueError("delays must be strictly increasing")
    return delays


def _default_band(delays):
    tau_min, tau_max = float(delays[0]), float(delays[-1])
    return 1.0 / (10 * tau_max), 2.0 / (tau_min / 20)


# ---------------------------------------------------------------------------
# Monte Carlo


def _padded_length(model, dt, n):
    if isinstance(model, SpectralGaussian) and model.f_min:
        return max(n, math.ceil(1.0 / (model.f_min * dt)))
    members = getattr(model, "members", ())
    return max([n] + [_padded_length(m, dt, n) for m in members])


def _block_sizes(n_traj, per_traj):
    n_batches = max(_MIN_BATCHES, math.ceil(n_traj * per_traj / _BLOCK_BUDGET))
    n_batches = min(n_batches, n_traj)
    base, extra = divmod(n_traj, n_batches)
    return [base + (1 if i < extra else 0) for i in range(n_batches)]


def _mc_block(job):
    spec, env, params, b_ext, delays, dt, n, seed, index, size, stratify = job
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
    draws = {c: m.sample(rng, dt, n, size, stratify=stratify) for c, m in env.channels().items()}
    if any(c in draws for c in ("electrical", "nuclear_x", "nuclear_z")):
        omega = build_detuning(
            params,
            b_ext,
            nuclear_x=draws.get("nuclear_x"),
            nuclear_z=draws.get("nuclear_z"),
            electrical=draws.get("electrical"),
            dt=dt,
        ).samples
    else:
        omega = np.zeros((size, n))
    if "detuning" in draws:
        omega = omega + draws["detuning"]
    phi = _cumulative_phase(DetuningTrajectory(dt=dt, samples=omega))
    sums = np.empty(len(delays), dtype=complex)
    for i, tau in enumerate(delays):
        seq = spec.at(tau)
        phases = segment_phases(seq, phi, dt)
        if spec.pulse_model.ideal:
            total = phases @ toggling_function(seq).signs
            sums[i] = np.exp(1j * total).sum()
        else:
            final = _evolve(spec, phases, (1.0, 0.0, 0.0))
            sums[i] = (final[:, 0] + 1j * final[:, 1]).sum()
    return sums


def mc_visibility(
    sequence: SequenceSpec,
    environment: NoiseEnvironment,
    params: QDParameters,
    b_ext: float,
    delays,
    n_traj: int,
    seed: int,
    dt: float | None = None,
    n_workers: int = 1,
    stratify: bool = True,
) -> DecayCurve:
    """Monte-Carlo visibility ``|<exp(i phi)>|`` over ``n_traj`` noise realizations.

    Trajectories are generated in fixed blocks whose random streams derive
    from ``(seed, block index)``; block sums are reduced in index order, so
    the result does not depend on ``n_workers``. Standard errors come from
    the spread of the block means. Quasi-static components are drawn with
    stratified sampling when ``stratify`` is set.
    """
    delays = _check_delays(delays)
    if n_traj < 100:
        raise ValueError("n_traj must be >= 100")
    f_line = environment.max_line_frequency
    dt_limit = delays[0] / 20
    if f_line > 0:
        dt_limit = min(dt_limit, 1.0 / (20 * f_line))
    if dt is None:
        dt = dt_limit
    elif dt > dt_limit * (1 + 1e-12):
        raise ValueError(f"dt = {dt:.3g} s under-resolves the delays or precession (need <= {dt_limit:.3g} s)")
    n = int(math.ceil(delays[-1] / dt)) + 2
    env = environment.with_band(*_default_band(delays))
    per_traj = max(_padded_length(m, dt, n) for m in env.channels().values()) if env.channels() else n
    sizes = _block_sizes(int(n_traj), per_traj)
    jobs = [
        (sequence, env, params, b_ext, delays, dt, n, seed, i, size, stratify) for i, size in enumerate(sizes)
    ]
    if n_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            block_sums = list(pool.map(_mc_block, jobs))
    else:
        block_sums = [_mc_block(job) for job in jobs]
    block_sums = np.array(block_sums)
    w = np.asarray(sizes, dtype=float)[:, None]
    block_means = block_sums / w
    z = block_sums.sum(axis=0) / w.sum()
    vis = np.abs(z)
    unit = np.where(vis > 0, z / np.where(vis > 0, vis, 1), 1.0)
    proj = (block_means * np.conj(unit)).real
    n_b = len(sizes)
    stderr = np.sqrt(np.sum(w**2 * (proj - vis) ** 2, axis=0) / w.sum() ** 2 * n_b / (n_b - 1))
    meta = {
        "engine": "mc",
        "sequence": sequence.to_dict(),
        "b_ext_tesla": b_ext,
        "noise": environment.to_dict(),
        "n_trajectories": int(n_traj),
        "seed": int(seed),
        "dt_s": dt,
    }
    return DecayCurve(delays, vis, stderr, meta)


# ---------------------------------------------------------------------------
# Filter functions


@dataclass(frozen=True)
class DetuningSpectrum:
    """One-sided detuning spectrum: scaled continuous members plus discrete lines."""

    continuous: tuple = ()  # (model, scale**2) pairs
    lines: tuple = ()  # (frequency_hz, variance (rad/s)**2) pairs

    def psd(self, f):
        f = np.asarray(f, dtype=float)
        total = np.zeros_like(f)
        for model, scale2 in self.continuous:
            total = total + scale2 * model.psd(f)
        return total

    def support(self):
        lo, hi = math.inf, 0.0
        for model, _ in self.continuous:
            m_lo, m_hi = _support(model)
            lo, hi = min(lo, m_lo), max(hi, m_hi)
        return lo, hi

    def edges(self):
        return sorted({e for model, _ in self.continuous for e in model.band_edges()})

    def scaled(self, factor):
        return DetuningSpectrum(
            tuple((m, s * factor) for m, s in self.continuous), tuple((f, v * factor) for f, v in self.lines)
        )


def _support(model):
    if isinstance(model, SpectralGaussian):
        return model._lo(), model._hi()
    members = getattr(model, "members", None)
    if members:
        spans = [_support(m) for m in members if not m.spectral_lines()]
        if spans:
            return min(s[0] for s in spans), max(s[1] for s in spans)
        return math.inf, 0.0
    if model.spectral_lines():
        return math.inf, 0.0
    return 0.0, math.inf


def _split(model):
    """Separate a model into continuous members and line-spectrum members."""
    members = getattr(model, "members", None)
    if members:
        cont, lines = [], []
        for m in members:
            c, l = _split(m)
            cont += c
            lines += l
        return cont, lines
    if model.spectral_lines():
        return [], list(model.spectral_lines())
    return [model], []


def detuning_spectrum(environment, params=None, b_ext=None, gaussian_approximation=False) -> DetuningSpectrum:
    """Detuning spectrum seen by the spin for a Gaussian, linearly coupled environment.

    ``environment`` may be a bare :class:`NoiseModel`, interpreted as
    detuning noise in rad/s.
    """
    if isinstance(environment, NoiseModel):
        environment = NoiseEnvironment(detuning=environment)
    if environment.nuclear_z is not None:
        raise EngineRejection(
            "the second-order nuclear term gives non-Gaussian phase noise; use the Monte-Carlo engine"
        )
    channels = environment.channels()
    if (set(channels) - {"detuning"}) and params is None:
        raise ValueError("params and b_ext are required for physical noise channels")
    couplings = _couplings(params, b_ext) if params is not None else {"detuning": 1.0}
    continuous, lines = [], []
    for channel, model in channels.items():
        if not model.gaussian:
            if not gaussian_approximation:
                raise EngineRejection(f"{channel} noise is non-Gaussian; use the Monte-Carlo engine")
            model = model.gaussianized()
        scale2 = couplings[channel] ** 2
        cont, line = _split(model)
        continuous += [(m, scale2) for m in cont]
        lines += [(f, v * scale2) for f, v in line]
    return DetuningSpectrum(tuple(continuous), tuple(lines))


def _log_integral(func, a, b, per_decade=96):
    n = max(9, int(math.ceil(per_decade * math.log10(b / a))) | 1)
    u = np.linspace(math.log(a), math.log(b), n)
    f = np.exp(u)
    return simpson(func(f) * f, x=u)


def _lin_integral(func, a, b, step):
    n = max(9, int(math.ceil((b - a) / step)) | 1)
    f = np.linspace(a, b, n)
    return simpson(func(f), x=f)


def ff_chi(seq, spectrum: DetuningSpectrum):
    """Decay exponent chi for one sequence instance."""
    tau = seq.tau
    n_pi = seq.n_pi
    chi = 0.0
    for f_line, var in spectrum.lines:
        chi += var * float(filter_weight(seq, f_line))
    if spectrum.continuous:
        lo, hi = spectrum.support()
        lo = max(lo, 1e-12 / tau)
        if hi > lo:
            f_osc = 1.0 / tau
            f_tail = 40.0 * (n_pi + 1) / tau
            hi_eff = min(hi, 1e8 * f_tail)
            marks = {lo, hi_eff, f_osc, f_tail} | set(spectrum.edges())
            marks = sorted(m for m in marks if lo <= m <= hi_eff)
            tail_weight = 2.0 + 4.0 * n_pi
            total = 0.0
            for a, b in zip(marks[:-1], marks[1:]):
                if b <= a * (1 + 1e-12):
                    continue
                if b <= f_osc:
                    total += _log_integral(lambda f: spectrum.psd(f) * filter_weight(seq, f), a, b)
                elif a >= f_tail:
                    total += _log_integral(
                        lambda f: spectrum.psd(f) * tail_weight / (2 * np.pi * f) ** 2, a, b
                    )
                else:
                    total += _lin_integral(
                        lambda f: spectrum.psd(f) * filter_weight(seq, f), a, b, 1.0 / (64 * tau)
                    )
            chi += total
    return 0.5 * chi


def ff_visibility(sequence: SequenceSpec, noise, delays, params=None, b_ext=None, gaussian_approximation=False):
    """Filter-function visibility ``exp(-chi(tau))`` for Gaussian noise.

    ``noise`` is a :class:`NoiseEnvironment` (with ``params`` and ``b_ext``),
    a :class:`NoiseModel` in detuning units (rad/s), or a prepared
    :class:`DetuningSpectrum`. Unset spectral cutoffs default to
    ``1/(10 tau_max)`` and ``40/tau_min``.
    """
    delays = _check_delays(delays)
    if not sequence.pulse_model.ideal:
        raise EngineRejection("filter functions assume ideal pulses; use the Monte-Carlo engine")
    if isinstance(noise, DetuningSpectrum):
        spectrum = noise
        description = None
    else:
        if isinstance(noise, NoiseModel):
            noise = NoiseEnvironment(detuning=noise)
        description = noise.to_dict()
        noise = noise.with_band(*_default_band(delays))
        spectrum = detuning_spectrum(noise, params, b_ext, gaussian_approximation)
    chi = np.array([ff_chi(sequence.at(tau), spectrum) for tau in delays])
    if np.any(~np.isfinite(chi)):
        raise EngineRejection("phase variance diverges for this spectrum and sequence")
    meta = {"engine": "ff", "sequence": sequence.to_dict(), "b_ext_tesla": b_ext, "noise": description}
    return DecayCurve(delays, np.exp(-chi), np.zeros_like(chi), meta)


# ---------------------------------------------------------------------------
# Nuclear precession


def precession_environment(params: QDParameters, b_ext):
    """Transverse Overhauser field precessing at each species' Larmor frequency."""
    if not params.species:
        raise ValueError("no nuclear species configured")
    comps = tuple((s.rms_field, 2 * np.pi * s.gyromagnetic_ratio * b_ext) for s in params.species)
    return PrecessingField(comps)


def echo_with_nuclear_precession(
    params: QDParameters,
    b_ext: float,
    delays,
    n_traj: int,
    seed: int,
    dt: float | None = None,
    environment: NoiseEnvironment | None = None,
    n_workers: int = 1,
) -> DecayCurve:
    """Hahn-echo Monte Carlo with the transverse Overhauser field precessing.

    Each species contributes ``A cos(2 pi f t + phase)`` with ``f`` its Larmor
    frequency and Rayleigh ``A`` of the configured rms; coupling is first
    order. Extra noise channels can be added through ``environment``.
    """
    if b_ext <= 0:
        raise ValueError("b_ext must be > 0")
    field_model = precession_environment(params, b_ext)
    f_max = field_model.max_frequency()
    if dt is not None and f_max > 0 and dt > 1.0 / (20 * f_max):
        raise ValueError("dt under-resolves the fastest Larmor period")
    env = (environment or NoiseEnvironment()).replace(nuclear_x=field_model)
    curve = mc_visibility(SequenceSpec.hahn(), env, params, b_ext, delays, n_traj, seed, dt=dt, n_workers=n_workers)
    curve.metadata["model"] = "nuclear_precession"
    return curve
