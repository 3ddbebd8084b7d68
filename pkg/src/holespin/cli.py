"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration or missing inputs, 3 a
requested engine cannot handle the configuration, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .coherence import EngineRejection
from .config import ConfigError, config_schema, load_config, preset_names
from .fitting import FitError, InsufficientDataError
from .harness import WORKERS_ENV, MissingResults, emit_plots, run, sweep

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ENGINE = 3
EXIT_NUMERICAL = 4


def _parser():
    p = argparse.ArgumentParser(prog="holespin", description="Hole-spin decoherence simulations and fits.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="config JSON path or preset name")
        sp.add_argument("--out", help="output directory (default: output_dir from the config)")
        sp.add_argument("--workers", type=int, help=f"worker processes (default: ${WORKERS_ENV} or 1)")

    common(sub.add_parser("run", help="run every task of a configuration"))
    sp = sub.add_parser("sweep", help="run one axis of a configuration and fit its trend")
    common(sp)
    sp.add_argument("--axis", required=True, help="b_ext, n_pi or noise_amplitude")
    ep = sub.add_parser("emit-plots", help="write plot-ready CSV tables for a results directory")
    ep.add_argument("results_dir")
    sub.add_parser("presets", help="list shipped preset configurations")
    sub.add_parser("schema", help="print the configuration JSON schema")
    return p


def _dispatch(args):
    if args.command == "presets":
        print("\n".join(preset_names()))
        return
    if args.command == "schema":
        print(json.dumps(config_schema(), indent=2))
        return
    if args.command == "emit-plots":
        for path in emit_plots(args.results_dir):
            print(path)
        return
    cfg = load_config(args.config)
    if args.command == "run":
        manifest = run(cfg, out=args.out, workers=args.workers)
        out = cfg.output_dir(args.out)
    else:
        manifest = sweep(cfg, args.axis, out=args.out, workers=args.workers)
        out = cfg.output_dir(args.out) / f"sweep_{args.axis.replace('-', '_')}"
    n = len(manifest["tasks"])
    print(f"{cfg.name}: {n} task(s) complete in {out}")


def main(argv=None):
    args = _parser().parse_args(argv)
    try:
        _dispatch(args)
    except (ConfigError, MissingResults, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EngineRejection as exc:
        print(f"engine rejected configuration: {exc}", file=sys.stderr)
        return EXIT_ENGINE
    except (FitError, InsufficientDataError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
