"""Experiment configuration: JSON loading, schema validation and object construction."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .coherence import NoiseEnvironment
from .sequences import SequenceSpec
from .spin import QDParameters

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "config_schema", "preset_names", "config_hash"]

AXES = {"b_ext": "b_ext_tesla", "n_pi": "n_pi_values", "noise_amplitude": "noise_amplitude_values"}

DEFAULTS = {
    "experiment": "decay",
    "n_traj": 2000,
    "engine": "auto",
    "gaussian_approximation": False,
    "fit": {},
}


class ConfigError(ValueError):
    """The configuration does not validate; the message names the field."""


def config_schema():
    return json.loads(resources.files("holespin").joinpath("schema/config.schema.json").read_text())


def preset_names():
    folder = resources.files("holespin").joinpath("presets")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def _field(path):
    out = ""
    for part in path:
        out += f"[{part}]" if isinstance(part, int) else (f".{part}" if out else str(part))
    return out or "<root>"


def _strip_comments(obj):
    if isinstance(obj, dict):
        return {k: _strip_comments(v) for k, v in obj.items() if not k.startswith("_")}
    if isinstance(obj, list):
        return [_strip_comments(v) for v in obj]
    return obj


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON form of a configuration (comments excluded)."""
    canonical = json.dumps(_strip_comments(raw), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class ExperimentConfig:
    raw: dict
    source: str

    def __getitem__(self, key):
        return self.raw[key]

    def get(self, key, default=None):
        return self.raw.get(key, default)

    @property
    def name(self):
        return self.raw["name"]

    @property
    def experiment(self):
        return self.raw["experiment"]

    @property
    def hash(self):
        return config_hash(self.raw)

    def params(self):
        return QDParameters.from_dict(self.raw.get("qd_parameters", {}))

    def environment(self):
        return NoiseEnvironment.from_dict(self.raw["noise"])

    def sequence(self):
        return SequenceSpec.from_dict(self.raw.get("sequence", {"kind": "ramsey"}))

    def delays(self):
        d = self.raw["delays"]
        if d.get("spacing", "log") == "log":
            return np.geomspace(d["min_s"], d["max_s"], d["count"])
        return np.linspace(d["min_s"], d["max_s"], d["count"])

    def axis_values(self, axis):
        key = AXES[axis]
        if axis == "b_ext":
            return list(self.raw[key])
        if key in self.raw:
            return list(self.raw[key])
        if axis == "n_pi":
            return [self.sequence().n_pi]
        return [1.0]

    def output_dir(self, override=None):
        if override is not None:
            return Path(override)
        return Path(self.raw.get("output_dir", f"results/{self.name}"))


def _check_semantics(cfg: dict):
    def attempt(field, fn):
        try:
            fn()
        except KeyError as exc:
            raise ConfigError(f"{field}: missing field {exc}") from None
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{field}: {exc}") from None

    attempt("qd_parameters", lambda: QDParameters.from_dict(cfg.get("qd_parameters", {})))
    for i, item in enumerate(cfg["noise"]):
        attempt(f"noise[{i}].model", lambda item=item: NoiseEnvironment.from_dict([item]))
    if "sequence" in cfg:
        attempt("sequence", lambda: SequenceSpec.from_dict(cfg["sequence"]))
    exp = cfg["experiment"]
    if exp in ("decay", "nuclear_precession"):
        if "delays" not in cfg:
            raise ConfigError("delays: required for decay experiments")
        d = cfg["delays"]
        if d["max_s"] <= d["min_s"]:
            raise ConfigError("delays.max_s: must exceed delays.min_s")
    if exp == "decay" and "sequence" not in cfg:
        raise ConfigError("sequence: required for decay experiments")
    if exp == "intensity_autocorrelation":
        if "intensity" not in cfg:
            raise ConfigError("intensity: required for intensity_autocorrelation experiments")
        lags = cfg["intensity"]["lags"]
        if lags["max_s"] <= lags["min_s"]:
            raise ConfigError("intensity.lags.max_s: must exceed intensity.lags.min_s")
        if lags["max_s"] >= cfg["intensity"]["dt_s"] * cfg["intensity"]["n_samples"]:
            raise ConfigError("intensity.lags.max_s: must be shorter than the trace duration")
    if cfg.get("n_pi_values") and cfg.get("sequence", {}).get("kind") != "cp":
        raise ConfigError("n_pi_values: only Carr-Purcell sequences take a pulse-number axis")


def validate(raw: dict) -> dict:
    """Validate against the schema and fill defaults; returns the completed dict."""
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = errors[0]
        # report the innermost failure of a oneOf branch when possible
        while err.context:
            err = sorted(err.context, key=lambda e: -len(e.absolute_path))[0]
        raise ConfigError(f"{_field(err.absolute_path)}: {err.message}")
    cfg = copy.deepcopy(raw)
    for key, value in DEFAULTS.items():
        cfg.setdefault(key, copy.deepcopy(value))
    _check_semantics(cfg)
    return cfg


def load_config(source) -> ExperimentConfig:
    """Read a configuration from a path or a shipped preset name."""
    path = Path(source)
    if path.exists():
        text = path.read_text()
    elif str(source) in preset_names():
        text = resources.files("holespin").joinpath(f"presets/{source}.json").read_text()
    else:
        raise FileNotFoundError(f"no config file or preset named {source!r}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"<root>: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>: configuration must be a JSON object")
    return ExperimentConfig(raw=validate(raw), source=str(source))


def from_dict(raw: dict) -> ExperimentConfig:
    return ExperimentConfig(raw=validate(raw), source="<dict>")
