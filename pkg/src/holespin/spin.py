"""Coupling of magnetic and electric fluctuations to the hole-spin splitting.

All public functions take fields in Tesla and return frequencies in Hz.
Angular frequencies (rad/s) appear only inside :class:`DetuningTrajectory`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.constants import physical_constants
from scipy.special import erfcx

__all__ = [
    "MU_B_OVER_H",
    "DEFAULT_SPECIES",
    "Species",
    "QDParameters",
    "DetuningTrajectory",
    "SingularFieldError",
    "zeeman_splitting",
    "nuclear_detuning",
    "electrical_detuning",
    "build_detuning",
    "second_order_dominance",
    "entanglement_fidelity_bound",
    "larmor_frequencies",
]

#: Bohr magneton over Planck constant, Hz/T (CODATA via scipy.constants).
MU_B_OVER_H = physical_constants["Bohr magneton in Hz/T"][0]

_IN_PLANE = 2 / math.sqrt(3)


class SingularFieldError(ValueError):
    """The second-order hyperfine term is undefined at zero external field."""


@dataclass(frozen=True)
class Species:
    label: str
    gyromagnetic_ratio: float  # Hz/T
    rms_field: float  # T


# Tabulated nuclear gyromagnetic ratios (gamma / 2 pi) in Hz/T.
DEFAULT_SPECIES = (
    ("In-115", 9.3295e6),
    ("Ga-69", 10.2478e6),
    ("Ga-71", 13.0208e6),
    ("As-75", 7.3150e6),
)


def _default_g_h(beta=0.08, slope=2.3e9):
    return slope / (_IN_PLANE * beta * MU_B_OVER_H)


@dataclass(frozen=True)
class QDParameters:
    """Physical constants of the quantum-dot hole spin.

    Defaults describe a dot with a 2.3 GHz/T in-plane splitting and a
    light-hole admixture of 0.08, from which ``g_h`` (about 1.78) follows.
    ``dgdf`` is the electrical g-factor sensitivity including the 2/sqrt(3)
    in-plane factor, in (V/m)**-1; only its product with the electric-field
    noise amplitude matters.

    ``first_order_coupling`` selects the g-factor multiplying the transverse
    Overhauser field: ``"g_h"`` uses ``g_h`` as written in the hyperfine
    expansion, ``"in_plane"`` uses (2/sqrt(3)) * beta * g_h.
    """

    g_h: float = field(default_factory=_default_g_h)
    beta: float = 0.08
    dgdf: float = 4.5e-8
    delta_bx_nuc: float = 0.07e-3
    delta_bz_nuc: float = 0.8e-3
    gamma_opt: float = 1 / 0.7e-9
    species: tuple = None
    calibration: float | None = 2.3e9
    first_order_coupling: str = "g_h"

    def __post_init__(self):
        if not 0 < self.beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        for name in ("delta_bx_nuc", "delta_bz_nuc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.gamma_opt <= 0:
            raise ValueError("gamma_opt must be > 0")
        if self.first_order_coupling not in ("g_h", "in_plane"):
            raise ValueError("first_order_coupling must be 'g_h' or 'in_plane'")
        if self.species is None:
            share = self.delta_bx_nuc / math.sqrt(len(DEFAULT_SPECIES))
            species = tuple(Species(label, gamma, share) for label, gamma in DEFAULT_SPECIES)
        else:
            species = tuple(s if isinstance(s, Species) else Species(*s) for s in self.species)
        for s in species:
            if s.rms_field < 0:
                raise ValueError(f"species {s.label} has negative rms field")
        object.__setattr__(self, "species", species)
        if self.calibration is not None:
            slope = _IN_PLANE * self.beta * self.g_h * MU_B_OVER_H
            if abs(slope - self.calibration) > 0.01 * self.calibration:
                raise ValueError(
                    f"in-plane splitting slope {slope:.4g} Hz/T disagrees with "
                    f"calibration {self.calibration:.4g} Hz/T by more than 1%"
                )

    @property
    def first_order_g(self):
        if self.first_order_coupling == "in_plane":
            return _IN_PLANE * self.beta * self.g_h
        return self.g_h

    def with_species_rms(self, rms):
        """Copy with every species' rms field replaced (scalar or sequence)."""
        rms = np.broadcast_to(np.asarray(rms, dtype=float), (len(self.species),))
        species = tuple(Species(s.label, s.gyromagnetic_ratio, float(r)) for s, r in zip(self.species, rms))
        return replace(self, species=species)

    def to_dict(self):
        d = asdict(self)
        return {
            "g_h": d["g_h"],
            "beta": d["beta"],
            "dgdf_per_v_per_m": d["dgdf"],
            "delta_bx_nuc_tesla": d["delta_bx_nuc"],
            "delta_bz_nuc_tesla": d["delta_bz_nuc"],
            "gamma_opt_per_s": d["gamma_opt"],
            "calibration_hz_per_tesla": d["calibration"],
            "first_order_coupling": d["first_order_coupling"],
            "species": [
                {"label": s.label, "gyromagnetic_ratio_hz_per_tesla": s.gyromagnetic_ratio, "rms_tesla": s.rms_field}
                for s in self.species
            ],
        }

    @classmethod
    def from_dict(cls, d):
        kwargs = {}
        mapping = {
            "g_h": "g_h",
            "beta": "beta",
            "dgdf_per_v_per_m": "dgdf",
            "delta_bx_nuc_tesla": "delta_bx_nuc",
            "delta_bz_nuc_tesla": "delta_bz_nuc",
            "gamma_opt_per_s": "gamma_opt",
            "calibration_hz_per_tesla": "calibration",
            "first_order_coupling": "first_order_coupling",
        }
        for key, attr in mapping.items():
            if key in d:
                kwargs[attr] = d[key]
        if "g_h" not in kwargs and "beta" in kwargs:
            kwargs["g_h"] = _default_g_h(kwargs["beta"], kwargs.get("calibration") or 2.3e9)
        if d.get("species") is not None:
            kwargs["species"] = tuple(
                Species(s["label"], s["gyromagnetic_ratio_hz_per_tesla"], s["rms_tesla"]) for s in d["species"]
            )
        return cls(**kwargs)


@dataclass(frozen=True)
class DetuningTrajectory:
    """Angular detuning samples (rad/s), shape ``(n,)`` or ``(n_traj, n)``."""

    dt: float
    samples: np.ndarray
    sources: tuple = ()

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("detuning samples must be finite")


def zeeman_splitting(params: QDParameters, b_ext):
    """In-plane ground-state splitting in Hz."""
    b_ext = np.asarray(b_ext, dtype=float)
    if np.any(b_ext < 0):
        raise ValueError("b_ext must be >= 0")
    return _IN_PLANE * params.beta * params.g_h * MU_B_OVER_H * b_ext


def nuclear_detuning(params: QDParameters, delta_bx, delta_bz, b_ext):
    """Overhauser-field shift of the splitting (Hz), first plus second order."""
    delta_bx = np.asarray(delta_bx, dtype=float)
    delta_bz = np.asarray(delta_bz, dtype=float)
    b_ext = float(b_ext)
    first = MU_B_OVER_H * params.first_order_g * delta_bx
    if b_ext == 0:
        if np.any(delta_bz != 0):
            raise SingularFieldError("second-order hyperfine term diverges at b_ext = 0")
        return first + 0.0 * delta_bz
    if b_ext < 0:
        raise ValueError("b_ext must be > 0")
    second = MU_B_OVER_H * params.g_h * delta_bz**2 / (2 * params.beta * b_ext)
    return first + second


def electrical_detuning(params: QDParameters, delta_f, b_ext):
    """Electric-field-induced shift of the splitting (Hz); linear in both arguments."""
    return params.dgdf * np.asarray(delta_f, dtype=float) * MU_B_OVER_H * b_ext


def _values(traj):
    if traj is None:
        return None
    return np.asarray(getattr(traj, "samples", traj), dtype=float)


def build_detuning(params, b_ext, nuclear_x=None, nuclear_z=None, electrical=None, dt=None) -> DetuningTrajectory:
    """Sum the nuclear and electrical shifts sample by sample, in rad/s.

    Inputs may be :class:`~holespin.noise.Trajectory` objects or raw arrays
    (then ``dt`` is required). Missing channels contribute nothing.
    """
    trajs = {"nuclear_x": nuclear_x, "nuclear_z": nuclear_z, "electrical": electrical}
    dts = {getattr(t, "dt", None) for t in trajs.values() if t is not None} - {None}
    if dt is not None:
        dts.add(dt)
    if len(dts) > 1:
        raise ValueError(f"trajectories have mismatched dt: {sorted(dts)}")
    if not dts:
        raise ValueError("dt is required when no Trajectory objects are passed")
    dt = dts.pop()
    values = {k: _values(v) for k, v in trajs.items()}
    shapes = {v.shape for v in values.values() if v is not None}
    if len(shapes) > 1:
        raise ValueError(f"trajectories have mismatched shapes: {sorted(shapes)}")
    if not shapes:
        raise ValueError("at least one trajectory is required")
    shape = shapes.pop()
    zeros = np.zeros(shape)
    hz = np.zeros(shape)
    sources = []
    if values["nuclear_x"] is not None or values["nuclear_z"] is not None:
        bx = values["nuclear_x"] if values["nuclear_x"] is not None else zeros
        bz = values["nuclear_z"] if values["nuclear_z"] is not None else zeros
        hz += nuclear_detuning(params, bx, bz, b_ext)
        sources += [k for k in ("nuclear_x", "nuclear_z") if values[k] is not None]
    if values["electrical"] is not None:
        hz += electrical_detuning(params, values["electrical"], b_ext)
        sources.append("electrical")
    return DetuningTrajectory(dt=dt, samples=2 * np.pi * hz, sources=tuple(sources))


def second_order_dominance(params: QDParameters, b_ext):
    """Ratio delta_Bz / (2 beta**2 B); the second-order term dominates when >> 1."""
    if b_ext <= 0:
        raise ValueError("b_ext must be > 0")
    return params.delta_bz_nuc / (2 * params.beta**2 * b_ext)


def entanglement_fidelity_bound(t2star, gamma_opt, form="coherence"):
    """Upper bound on spin-photon entanglement fidelity from ground-state dephasing.

    The spin dephases during the random photon emission time ``t``
    (exponential with rate ``gamma_opt``). With ``form="coherence"`` the bound
    is the emission-averaged Gaussian coherence
    ``W = E[exp(-t**2 / (2 T2*^2))]``. ``form="bell"`` returns ``(1 + W') / 2``
    with ``W' = E[exp(-(t/T2*)**2)]``.
    """
    if t2star <= 0 or gamma_opt <= 0:
        raise ValueError("t2star and gamma_opt must be > 0")
    if math.isinf(t2star):
        return 1.0
    if form == "coherence":
        x = gamma_opt * t2star / math.sqrt(2)
        return float(math.sqrt(math.pi) * x * erfcx(x))
    if form == "bell":
        x = gamma_opt * t2star / 2
        return float((1 + math.sqrt(math.pi) * x * erfcx(x)) / 2)
    raise ValueError("form must be 'coherence' or 'bell'")


def larmor_frequencies(params: QDParameters, b_ext):
    """Nuclear Zeeman frequencies (Hz) of each configured species."""
    if b_ext < 0:
        raise ValueError("b_ext must be >= 0")
    return [(s.label, s.gyromagnetic_ratio * b_ext) for s in params.species]
