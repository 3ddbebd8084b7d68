"""Ramsey, Hahn-echo and Carr-Purcell sequences.

Pulses are instantaneous. A sequence of total free-evolution time ``tau``
with ``n_pi`` refocusing pulses places them at ``(2k - 1) tau / (2 n_pi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import cumulative_trapezoid

__all__ = [
    "PulseModel",
    "IDEAL",
    "SequenceSpec",
    "PulseSequence",
    "TogglingFunction",
    "toggling_function",
    "filter_weight",
    "segment_phases",
    "apply_sequence_bloch",
    "rotation_matrix",
]

_KINDS = ("ramsey", "hahn", "cp")


@dataclass(frozen=True)
class PulseModel:
    """Refocusing-pulse imperfections.

    In ``"rotation"`` mode each pi pulse over-rotates by ``angle_error`` rad
    (every sub-rotation is scaled by ``1 + angle_error / pi``) about an axis
    tilted out of the equatorial plane by ``axis_tilt`` rad. With
    ``composite=True`` each pi pulse is replaced by 90-180-90 rotations
    about alternating in-plane axes.
    """

    mode: str = "ideal"
    angle_error: float = 0.0
    axis_tilt: float = 0.0
    composite: bool = False

    def __post_init__(self):
        if self.mode not in ("ideal", "rotation"):
            raise ValueError("mode must be 'ideal' or 'rotation'")
        if self.mode == "ideal" and (self.angle_error or self.axis_tilt):
            raise ValueError("ideal pulses cannot carry rotation errors")

    @property
    def ideal(self):
        return self.mode == "ideal"

    def to_dict(self):
        return {
            "mode": self.mode,
            "angle_error_rad": self.angle_error,
            "axis_tilt_rad": self.axis_tilt,
            "composite": self.composite,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            mode=d.get("mode", "ideal"),
            angle_error=d.get("angle_error_rad", 0.0),
            axis_tilt=d.get("axis_tilt_rad", 0.0),
            composite=d.get("composite", False),
        )


IDEAL = PulseModel()


@dataclass(frozen=True)
class SequenceSpec:
    """A sequence family: everything but the total delay.

    ``phase`` picks the refocusing axis: ``"cp"`` rotates about y
    (perpendicular to the initial +x state), ``"cpmg"`` about x.
    """

    kind: str
    n_pi: int = 0
    pulse_model: PulseModel = field(default=IDEAL)
    phase: str = "cp"

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in _KINDS:
            raise ValueError(f"kind must be one of {_KINDS}")
        object.__setattr__(self, "kind", kind)
        n_pi = int(self.n_pi)
        if kind == "ramsey" and n_pi != 0:
            raise ValueError("Ramsey has no refocusing pulses")
        if kind == "hahn":
            if n_pi not in (0, 1):
                raise ValueError("Hahn echo has exactly one refocusing pulse")
            n_pi = 1
        if kind == "cp" and n_pi < 1:
            raise ValueError("Carr-Purcell needs n_pi >= 1")
        object.__setattr__(self, "n_pi", n_pi)
        if self.phase not in ("cp", "cpmg"):
            raise ValueError("phase must be 'cp' or 'cpmg'")

    @classmethod
    def ramsey(cls):
        return cls("ramsey", 0)

    @classmethod
    def hahn(cls, pulse_model=IDEAL):
        return cls("hahn", 1, pulse_model)

    @classmethod
    def cp(cls, n_pi, pulse_model=IDEAL, phase="cp"):
        return cls("cp", n_pi, pulse_model, phase)

    def at(self, tau):
        return PulseSequence(self, tau)

    def to_dict(self):
        return {"kind": self.kind, "n_pi": self.n_pi, "phase": self.phase, "pulse": self.pulse_model.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            n_pi=d.get("n_pi", 0 if d["kind"] == "ramsey" else 1),
            pulse_model=PulseModel.from_dict(d.get("pulse", {})),
            phase=d.get("phase", "cp"),
        )


@dataclass(frozen=True)
class PulseSequence:
    spec: SequenceSpec
    tau: float

    def __post_init__(self):
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise ValueError("tau must be finite and > 0")

    @property
    def kind(self):
        return self.spec.kind

    @property
    def n_pi(self):
        return self.spec.n_pi

    @property
    def pulse_model(self):
        return self.spec.pulse_model

    def with_delay(self, tau):
        return replace(self, tau=tau)


@dataclass(frozen=True)
class TogglingFunction:
    """Piecewise-constant +-1 sign history, starting at +1."""

    switch_times: np.ndarray
    tau: float

    @property
    def boundaries(self):
        return np.concatenate(([0.0], self.switch_times, [self.tau]))

    @property
    def signs(self):
        return (-1.0) ** np.arange(len(self.switch_times) + 1)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        return (-1.0) ** np.searchsorted(self.switch_times, t, side="right")

    def integral(self):
        return float(np.sum(self.signs * np.diff(self.boundaries)))


def toggling_function(seq: PulseSequence) -> TogglingFunction:
    n = seq.n_pi
    k = np.arange(1, n + 1)
    return TogglingFunction(switch_times=(2 * k - 1) * seq.tau / (2 * n) if n else np.empty(0), tau=seq.tau)


def filter_weight(seq: PulseSequence, f):
    """Squared magnitude of the Fourier transform of the toggling function (s**2)."""
    f = np.asarray(f, dtype=float)
    if np.any(f < 0):
        raise ValueError("f must be >= 0")
    y = toggling_function(seq)
    edges = y.boundaries
    width = np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    omega = 2 * np.pi * f[..., None]
    # each segment contributes width * sinc(omega width / 2) * exp(-i omega mid)
    terms = y.signs * width * np.sinc(omega * width / (2 * np.pi)) * np.exp(-1j * omega * mid)
    return np.abs(terms.sum(axis=-1)) ** 2


def _cumulative_phase(detuning):
    samples = np.atleast_2d(np.asarray(detuning.samples, dtype=float))
    return cumulative_trapezoid(samples, dx=detuning.dt, axis=-1, initial=0.0)


def _interp_uniform(phi, dt, t):
    """Linear interpolation of the cumulative phase at times ``t`` (vectorized over rows)."""
    pos = np.asarray(t, dtype=float) / dt
    idx = np.clip(np.floor(pos).astype(int), 0, phi.shape[-1] - 2)
    frac = pos - idx
    return phi[:, idx] * (1 - frac) + phi[:, idx + 1] * frac


def segment_phases(seq: PulseSequence, cumulative_phase, dt):
    """Phase accumulated in each free-evolution segment, shape ``(n_traj, n_pi + 1)``."""
    edges = toggling_function(seq).boundaries
    at = _interp_uniform(cumulative_phase, dt, edges)
    return np.diff(at, axis=-1)


def rotation_matrix(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = math.cos(angle), math.sin(angle)
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return c * np.eye(3) + s * k + (1 - c) * np.outer(axis, axis)


def _pulse_operator(spec: SequenceSpec):
    pm = spec.pulse_model
    in_plane = np.array([0.0, 1.0, 0.0]) if spec.phase == "cp" else np.array([1.0, 0.0, 0.0])
    other = np.array([1.0, 0.0, 0.0]) if spec.phase == "cp" else np.array([0.0, 1.0, 0.0])
    if pm.ideal:
        return rotation_matrix(in_plane, math.pi)
    scale = 1 + pm.angle_error / math.pi
    tilt = np.array([0.0, 0.0, math.sin(pm.axis_tilt)])
    main = math.cos(pm.axis_tilt) * in_plane + tilt
    aux = math.cos(pm.axis_tilt) * other + tilt
    if not pm.composite:
        return rotation_matrix(main, math.pi * scale)
    half = rotation_matrix(aux, math.pi / 2 * scale)
    return half @ rotation_matrix(main, math.pi * scale) @ half


def _rotate_z(vectors, angle):
    c, s = np.cos(angle), np.sin(angle)
    x, y = vectors[:, 0].copy(), vectors[:, 1].copy()
    vectors[:, 0] = c * x - s * y
    vectors[:, 1] = s * x + c * y
    return vectors


def _evolve(spec: SequenceSpec, phases, initial):
    vectors = np.tile(np.asarray(initial, dtype=float), (phases.shape[0], 1))
    pulse = _pulse_operator(spec)
    for j in range(phases.shape[1]):
        if j:
            vectors = vectors @ pulse.T
        vectors = _rotate_z(vectors, phases[:, j])
    return vectors


def apply_sequence_bloch(seq: PulseSequence, detuning, initial=(1.0, 0.0, 0.0), pulse_model=None):
    """Integrate the Bloch vector through free precession and refocusing pulses.

    ``detuning`` is a :class:`~holespin.spin.DetuningTrajectory` (one row or a
    batch) covering ``[0, tau]``. Free evolution rotates about z by the
    accumulated phase; pulses act as rotation matrices. With ideal pulses and
    toggling phase ``phi`` the final state is ``(cos phi, sin phi, 0)`` for
    even ``n_pi``; odd ``n_pi`` mirrors it to ``(-cos phi, sin phi, 0)``
    (``phase="cp"``) or ``(cos phi, -sin phi, 0)`` (``phase="cpmg"``).
    Returns an array of shape ``(3,)`` or ``(n_traj, 3)``.
    """
    if pulse_model is not None:
        seq = replace(seq, spec=replace(seq.spec, pulse_model=pulse_model))
    samples = np.asarray(detuning.samples)
    n = samples.shape[-1]
    if (n - 1) * detuning.dt < seq.tau * (1 - 1e-12):
        raise ValueError("detuning trajectory is shorter than the sequence")
    phi = _cumulative_phase(detuning)
    phases = segment_phases(seq, phi, detuning.dt)
    out = _evolve(seq.spec, phases, initial)
    return out[0] if samples.ndim == 1 else out
