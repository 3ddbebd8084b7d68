"""Configuration-driven runs, sweeps and plot-data export.

Work is split into tasks keyed by their indices on the configured axes
(field, pulse number, noise amplitude) or by trace number. Each task's
random stream derives from ``(seed, task key)``, so results do not depend
on the number of workers or on the order tasks finish. Every output file is
written atomically and recorded in ``manifest.json`` with its SHA-256; a
rerun of the same configuration skips tasks whose files are intact.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import itertools
import json
import os
import shutil
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    fit_autocorr_model,
    fit_power_law_field,
    fit_scaling,
    fit_stretched_exp,
    global_alpha_fit,
    lambda_from_gamma,
    residual_sign_test,
    simulate_intensity,
)
from .coherence import DecayCurve, EngineRejection, echo_with_nuclear_precession, ff_visibility, mc_visibility
from .config import AXES, ConfigError, ExperimentConfig, config_hash
from .config import from_dict as config_from_dict
from .fitting import _jsonable
from .noise import Trajectory, autocorrelation

__all__ = [
    "WORKERS_ENV",
    "MissingResults",
    "worker_count",
    "run",
    "sweep",
    "emit_plots",
    "choose_engine",
]

WORKERS_ENV = "HOLESPIN_WORKERS"
MANIFEST = "manifest.json"
AXIS_COLUMNS = {"b_ext": "b_ext_tesla", "n_pi": "n_pi", "noise_amplitude": "noise_amplitude"}


class MissingResults(FileNotFoundError):
    """No completed results to export."""


def worker_count(override=None):
    """Worker processes from ``override`` or the ``HOLESPIN_WORKERS`` variable (default 1)."""
    if override is not None:
        n = int(override)
    else:
        text = os.environ.get(WORKERS_ENV, "1").strip() or "1"
        try:
            n = int(text)
        except ValueError:
            raise ConfigError(f"{WORKERS_ENV}: expected an integer, got {text!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV}: must be >= 1")
    return n


# ---------------------------------------------------------------------------
# File helpers


def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return hashlib.sha256(text.encode()).hexdigest()


def _sha(path: Path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_text(obj):
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


def _csv_text(header, rows):
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(_fmt(v) for v in row) + "\n")
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return f"{float(v):.17g}"


# ---------------------------------------------------------------------------
# Tasks


@dataclass(frozen=True)
class Task:
    id: str
    key: tuple
    seed: int
    b_ext: float = 0.0
    n_pi: int = 0
    amplitude: float = 1.0


def _task_seed(master, key):
    return int(np.random.SeedSequence(master, spawn_key=tuple(key)).generate_state(1, dtype=np.uint32)[0])


def _decay_tasks(cfg: ExperimentConfig, axis=None):
    values = {a: cfg.axis_values(a) for a in AXES}
    ranges = {a: range(len(v)) if (axis is None or a == axis) else range(1) for a, v in values.items()}
    tasks = []
    for ib, ipi, ia in itertools.product(ranges["b_ext"], ranges["n_pi"], ranges["noise_amplitude"]):
        key = (ib, ipi, ia)
        tasks.append(
            Task(
                id=f"b{ib}-n{ipi}-a{ia}",
                key=key,
                seed=_task_seed(cfg["seed"], key),
                b_ext=float(values["b_ext"][ib]),
                n_pi=int(values["n_pi"][ipi]),
                amplitude=float(values["noise_amplitude"][ia]),
            )
        )
    return tasks


def _intensity_tasks(cfg: ExperimentConfig):
    n = cfg["intensity"]["n_traces"]
    return [Task(id=f"trace{i:04d}", key=(i,), seed=_task_seed(cfg["seed"], (i,))) for i in range(n)]


def _is_gaussian(model):
    return bool(model.gaussian)


def choose_engine(cfg: ExperimentConfig, environment, sequence):
    """Resolve ``engine: auto`` to ``ff`` when the filter-function engine applies."""
    engine = cfg["engine"]
    if engine != "auto":
        return engine
    if not sequence.pulse_model.ideal or environment.nuclear_z is not None:
        return "mc"
    if all(_is_gaussian(m) for m in environment.channels().values()) or cfg["gaussian_approximation"]:
        return "ff"
    return "mc"


def _decay_task(raw, task: Task, n_workers):
    cfg = config_from_dict(raw)
    params = cfg.params()
    env = cfg.environment()
    if task.amplitude != 1.0:
        env = env.scaled(task.amplitude, channels=("electrical",))
    delays = cfg.delays()
    if cfg.experiment == "nuclear_precession":
        extra = env.replace(nuclear_x=None) if env.nuclear_x is not None else env
        curve = echo_with_nuclear_precession(
            params, task.b_ext, delays, cfg["n_traj"], task.seed, dt=cfg.get("dt_s"),
            environment=extra, n_workers=n_workers,
        )
    else:
        seq = cfg.sequence()
        if seq.kind == "cp" and task.n_pi != seq.n_pi:
            seq = replace(seq, n_pi=task.n_pi)
        engine = choose_engine(cfg, env, seq)
        if engine == "ff":
            curve = ff_visibility(seq, env, delays, params, task.b_ext, cfg["gaussian_approximation"])
        else:
            curve = mc_visibility(
                seq, env, params, task.b_ext, delays, cfg["n_traj"], task.seed, dt=cfg.get("dt_s"),
                n_workers=n_workers,
            )
    curve.metadata.update(
        {"task": task.id, "task_seed": task.seed, "n_pi": task.n_pi, "noise_amplitude": task.amplitude,
         "b_ext_tesla": task.b_ext, "experiment": cfg.experiment}
    )
    return curve


def _intensity_lags(cfg: ExperimentConfig):
    spec = cfg["intensity"]
    dt = spec["dt_s"]
    lg = spec["lags"]
    steps = np.unique(np.rint(np.geomspace(lg["min_s"], lg["max_s"], lg["count"]) / dt).astype(np.int64))
    steps = steps[steps >= 1]
    return steps * dt


def _intensity_task(raw, task: Task, n_workers):
    cfg = config_from_dict(raw)
    spec = cfg["intensity"]
    env = cfg.environment()
    if env.electrical is None:
        raise ConfigError("noise: intensity experiments need an electrical channel")
    rng = np.random.default_rng(np.random.SeedSequence(task.seed))
    x = env.electrical.sample(rng, spec["dt_s"], spec["n_samples"], 1)[0]
    field = Trajectory(dt=spec["dt_s"], samples=x, seed=task.seed)
    intensity = simulate_intensity(
        field, spec["linewidth_hz"], spec["k_stark_hz_per_v_per_m"],
        laser_detuning_hz=spec.get("laser_detuning_hz", 0.0),
    )
    lags = _intensity_lags(cfg)
    return autocorrelation(intensity, lags[-1] + 0.5 * spec["dt_s"], lags=lags).values


# ---------------------------------------------------------------------------
# Manifest


class _Manifest:
    def __init__(self, outdir: Path, cfg: ExperimentConfig, mode: str, tasks):
        self.path = outdir / MANIFEST
        self.outdir = outdir
        old = None
        if self.path.exists():
            try:
                old = json.loads(self.path.read_text())
            except json.JSONDecodeError:
                old = None
        same = old is not None and old.get("config_hash") == cfg.hash and old.get("mode") == mode
        previous = {t["id"]: t for t in old.get("tasks", [])} if same else {}
        self.data = {
            "config_hash": cfg.hash,
            "toolkit_version": __version__,
            "created_utc": old["created_utc"] if same else _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "mode": mode,
            "experiment": cfg.experiment,
            "config": cfg.raw,
            "complete": False,
            "tasks": [],
            "collated_files": {},
        }
        for t in tasks:
            entry = previous.get(t.id)
            ok = entry is not None and entry.get("status") == "complete" and entry.get("seed") == t.seed
            ok = ok and all((outdir / f).exists() and _sha(outdir / f) == h for f, h in entry["files"].items())
            self.data["tasks"].append(
                {"id": t.id, "key": list(t.key), "seed": t.seed, "status": "complete" if ok else "pending",
                 "files": entry["files"] if ok else {}}
            )
        self.write()

    def entry(self, task_id):
        return next(t for t in self.data["tasks"] if t["id"] == task_id)

    def done(self, task_id):
        return self.entry(task_id)["status"] == "complete"

    def finish(self, task_id, files):
        e = self.entry(task_id)
        e["status"] = "complete"
        e["files"] = files
        self.write()

    def write(self):
        _atomic_write(self.path, _json_text(self.data))


# ---------------------------------------------------------------------------
# Execution


def _execute(fn, raw, tasks, workers, on_result):
    if not tasks:
        return
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            futures = [pool.submit(fn, raw, t, 1) for t in tasks]
            for t, fut in zip(tasks, futures):
                on_result(t, fut.result())
    else:
        for t in tasks:
            on_result(t, fn(raw, t, workers))


def _fit_options(cfg):
    fit = cfg["fit"]
    if fit is None:
        return None
    return {"alpha": fit.get("alpha"), "fit_amplitude": fit.get("fit_amplitude", True),
            "global_alpha": fit.get("global_alpha", False)}


def _run_decay(cfg: ExperimentConfig, outdir: Path, mode, axis, workers):
    tasks = _decay_tasks(cfg, axis)
    manifest = _Manifest(outdir, cfg, mode, tasks)
    todo = [t for t in tasks if not manifest.done(t.id)]
    opts = _fit_options(cfg)
    global_fit = opts is not None and opts["global_alpha"]

    def store(task, curve):
        files = {}
        rel = f"curves/{task.id}.csv"
        files[rel] = _atomic_write(outdir / rel, curve.to_csv_text())
        meta = f"curves/{task.id}.json"
        files[meta] = _atomic_write(outdir / meta, _json_text(curve.metadata))
        if opts is not None and not global_fit:
            fit = fit_stretched_exp(curve, fix_alpha=opts["alpha"], fit_amplitude=opts["fit_amplitude"])
            frel = f"fits/{task.id}.json"
            files[frel] = _atomic_write(outdir / frel, fit.to_json(covariance=True))
        manifest.finish(task.id, files)

    _execute(_decay_task, cfg.raw, todo, workers, store)
    curves = {t.id: DecayCurve.load(outdir / f"curves/{t.id}.csv") for t in tasks}
    collate = axis or cfg.get("collate_axis")
    if collate and opts is not None:
        manifest.data["collated_files"] = _collate(cfg, outdir, tasks, curves, collate, opts)
    manifest.data["complete"] = True
    manifest.write()
    return manifest.data


def _collate(cfg, outdir, tasks, curves, axis, opts):
    """Tabulate T2 along ``axis`` and fit its trend; other axes must be single-valued."""
    others = [a for a in AXES if a != axis]
    for a in others:
        if len({getattr(t, _task_attr(a)) for t in tasks}) > 1:
            raise ConfigError(f"{AXES[a]}: collating along {axis} needs a single value here (use sweep)")
    ordered = sorted(tasks, key=lambda t: t.key)
    xs = [getattr(t, _task_attr(axis)) for t in ordered]
    files = {}
    rows = []
    if opts["global_alpha"]:
        g = global_alpha_fit([curves[t.id] for t in ordered], labels=[t.id for t in ordered],
                             fit_amplitude=opts["fit_amplitude"])
        files["global_alpha_fit.json"] = _atomic_write(outdir / "global_alpha_fit.json", g.to_json(covariance=True))
        for x, t in zip(xs, ordered):
            rows.append((x, g[f"t2[{t.id}]"], g.sigmas[f"t2[{t.id}]"], g["alpha"], g.sigmas["alpha"],
                         g.params.get(f"amplitude[{t.id}]", 1.0), g.sigmas.get(f"amplitude[{t.id}]", 0.0)))
    else:
        for x, t in zip(xs, ordered):
            f = json.loads((outdir / f"fits/{t.id}.json").read_text())
            p = {q["name"]: (q["estimate"], q["sigma"]) for q in f["parameters"]}
            alpha = p.get("alpha", (opts["alpha"], 0.0))
            amp = p.get("amplitude", (1.0, 0.0))
            rows.append((x, p["t2"][0], p["t2"][1], alpha[0], alpha[1], amp[0], amp[1]))
    header = [AXIS_COLUMNS[axis], "t2_s", "t2_sigma_s", "alpha", "alpha_sigma", "amplitude", "amplitude_sigma"]
    name = f"sweep_{axis}.csv"
    files[name] = _atomic_write(outdir / name, _csv_text(header, rows))
    points = np.array([[r[0], r[1], r[2]] for r in rows], dtype=float)
    if not np.all(np.isfinite(points[:, 2]) & (points[:, 2] > 0)):
        points = points[:, :2]
    if len({r[0] for r in rows}) >= 3:
        if axis == "n_pi":
            trend = fit_scaling(points)
            gamma = trend["gamma"]
            if 0 <= gamma < 1:
                trend.diagnostics["lambda_from_gamma"] = lambda_from_gamma(gamma)
        else:
            trend = fit_power_law_field(points)
        trend.diagnostics["axis"] = axis
        fname = f"sweep_{axis}_fit.json"
        files[fname] = _atomic_write(outdir / fname, trend.to_json(covariance=True))
    return files


def _task_attr(axis):
    return {"b_ext": "b_ext", "n_pi": "n_pi", "noise_amplitude": "amplitude"}[axis]


def _run_intensity(cfg: ExperimentConfig, outdir: Path, mode, workers):
    tasks = _intensity_tasks(cfg)
    manifest = _Manifest(outdir, cfg, mode, tasks)
    todo = [t for t in tasks if not manifest.done(t.id)]
    lags = _intensity_lags(cfg)

    def store(task, values):
        rel = f"traces/{task.id}.csv"
        files = {rel: _atomic_write(outdir / rel, _csv_text(["lag_s", "g"], zip(lags, values)))}
        manifest.finish(task.id, files)

    _execute(_intensity_task, cfg.raw, todo, workers, store)
    stack = []
    for t in tasks:
        with (outdir / f"traces/{t.id}.csv").open() as fh:
            stack.append([float(r["g"]) for r in csv.DictReader(fh)])
    stack = np.array(stack)
    g = stack.mean(axis=0)
    sem = stack.std(axis=0, ddof=1) / np.sqrt(stack.shape[0])
    spec = cfg["intensity"]
    k = spec.get("n_exponentials", 4)
    n_starts = spec.get("n_starts", 8)
    offset = spec.get("offset", True)
    full = fit_autocorr_model(lags, g, n_exponentials=k, power_law=True, sigma=sem, n_starts=n_starts, offset=offset)
    only = fit_autocorr_model(lags, g, n_exponentials=k, power_law=False, sigma=sem, n_starts=n_starts, offset=offset)
    window = lags < spec.get("residual_window_s", 1e-3)
    for res in (full, only):
        changes, pairs, p = residual_sign_test(res.estimator.residuals_[window])
        res.diagnostics["residual_sign_changes"] = changes
        res.diagnostics["residual_pairs"] = pairs
        res.diagnostics["residual_sign_test_p"] = p
        res.diagnostics["residual_window_s"] = spec.get("residual_window_s", 1e-3)
    rows = zip(lags, g, sem, full.estimator.predict(lags), full.estimator.exponential_part(lags),
               only.estimator.predict(lags), g - only.estimator.predict(lags))
    header = ["lag_s", "g", "sem", "full_model", "exponential_part", "exponentials_only_model",
              "residual_exponentials_only"]
    files = {
        "autocorrelation.csv": _atomic_write(outdir / "autocorrelation.csv", _csv_text(header, rows)),
        "fit_full.json": _atomic_write(outdir / "fit_full.json", full.to_json(covariance=True)),
        "fit_exponentials_only.json": _atomic_write(outdir / "fit_exponentials_only.json", only.to_json(covariance=True)),
    }
    manifest.data["collated_files"] = files
    manifest.data["complete"] = True
    manifest.write()
    return manifest.data


def run(config: ExperimentConfig, out=None, workers=None):
    """Execute every task of ``config``; returns the manifest dictionary."""
    workers = worker_count(workers)
    outdir = config.output_dir(out)
    outdir.mkdir(parents=True, exist_ok=True)
    if config.experiment == "intensity_autocorrelation":
        return _run_intensity(config, outdir, "run", workers)
    return _run_decay(config, outdir, "run", None, workers)


def _normalize_axis(axis):
    name = axis.replace("-", "_")
    if name == "b_ext_tesla":
        name = "b_ext"
    if name not in AXES:
        raise ConfigError(f"axis: unknown sweep axis {axis!r} (choose from {', '.join(AXES)})")
    return name


def sweep(config: ExperimentConfig, axis, out=None, workers=None):
    """One sub-run per value of ``axis`` with the other axes at their first value.

    Results go to ``<output_dir>/sweep_<axis>``; the collated table and the
    trend fit (field exponent or decoupling exponent) are written there.
    """
    axis = _normalize_axis(axis)
    if config.experiment == "intensity_autocorrelation":
        raise ConfigError("experiment: intensity runs have no sweep axes")
    if config.experiment == "nuclear_precession" and axis != "b_ext":
        raise ConfigError(f"axis: {axis} does not apply to nuclear_precession experiments")
    values = config.axis_values(axis)
    if len(values) < 2:
        raise ConfigError(f"{AXES[axis]}: a sweep needs at least 2 values")
    if config["fit"] is None:
        raise ConfigError("fit: sweeps need a fit section to extract decay times")
    workers = worker_count(workers)
    outdir = config.output_dir(out) / f"sweep_{axis}"
    outdir.mkdir(parents=True, exist_ok=True)
    return _run_decay(config, outdir, f"sweep:{axis}", axis, workers)


# ---------------------------------------------------------------------------
# Plot data


PLOT_COLUMNS = {
    "decay": "tau_s, visibility, stderr",
    "decay_fit": "tau_s, fit_visibility",
    "t2_vs_axis": "axis value, t2_s, t2_sigma_s",
    "autocorrelation": "lag_s, g, sem, full_model, exponential_part, exponentials_only_model",
}


def emit_plots(results_dir):
    """Write gnuplot/CSV-ready tables for a results directory into ``<dir>/plots``.

    The directory is assembled elsewhere and moved into place, so a failure
    leaves no partial output.
    """
    results_dir = Path(results_dir)
    manifest_path = results_dir / MANIFEST
    if not manifest_path.exists():
        raise MissingResults(f"{results_dir}: no {MANIFEST}; nothing to export")
    manifest = json.loads(manifest_path.read_text())
    done = [t for t in manifest.get("tasks", []) if t.get("status") == "complete"]
    if not done:
        raise MissingResults(f"{results_dir}: no completed tasks")
    staging = Path(tempfile.mkdtemp(dir=results_dir, prefix=".plots-"))
    try:
        index = {}
        for t in done:
            csv_rel = f"curves/{t['id']}.csv"
            if csv_rel not in t["files"]:
                continue
            curve = DecayCurve.load(results_dir / csv_rel)
            name = f"decay_{t['id']}.csv"
            (staging / name).write_text(curve.to_csv_text())
            index[name] = {"columns": ["tau_s", "visibility", "stderr"], "task": t["id"]}
            fit_path = results_dir / f"fits/{t['id']}.json"
            if fit_path.exists():
                fit = json.loads(fit_path.read_text())
                p = {q["name"]: q["estimate"] for q in fit["parameters"]}
                alpha = p.get("alpha", manifest["config"].get("fit", {}).get("alpha"))
                amp = p.get("amplitude", 1.0)
                tau = np.geomspace(curve.delays[0], curve.delays[-1], 200)
                vis = amp * np.exp(-((tau / p["t2"]) ** alpha))
                fname = f"decay_fit_{t['id']}.csv"
                (staging / fname).write_text(_csv_text(["tau_s", "fit_visibility"], zip(tau, vis)))
                index[fname] = {"columns": ["tau_s", "fit_visibility"], "task": t["id"]}
        for name in sorted(manifest.get("collated_files", {})):
            src = results_dir / name
            if name.startswith("sweep_") and name.endswith(".csv"):
                with src.open() as fh:
                    reader = csv.reader(fh)
                    header = next(reader)
                    rows = [r[:3] for r in reader]
                axis = name[len("sweep_"):-len(".csv")]
                out = f"t2_vs_{axis}.csv"
                (staging / out).write_text(",".join(header[:3]) + "\n" + "".join(",".join(r) + "\n" for r in rows))
                index[out] = {"columns": header[:3]}
            elif name == "autocorrelation.csv":
                shutil.copyfile(src, staging / name)
                with src.open() as fh:
                    index[name] = {"columns": next(csv.reader(fh))}
        if not index:
            raise MissingResults(f"{results_dir}: no plottable results")
        (staging / "index.json").write_text(_json_text(index))
        final = results_dir / "plots"
        if final.exists():
            shutil.rmtree(final)
        os.replace(staging, final)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return sorted(str(final / n) for n in index) + [str(final / "index.json")]
