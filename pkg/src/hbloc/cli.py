"""Command line interface: ``hbloc {simulate,map,mcmc,leadfield,summarize}``.

Exit codes: 0 on success, 2 for invalid configuration or inputs, 1 for
runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .experiment import (
    PRESETS,
    ConfigError,
    cmd_leadfield,
    cmd_map,
    cmd_mcmc,
    cmd_simulate,
    cmd_summarize,
    resolve_config,
)
from .io import RunLockedError, read_json

log = logging.getLogger("hbloc")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hbloc", description="Hierarchical Bayesian source localization experiments.")
    p.add_argument("--version", action="version", version=f"hbloc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "build the forward model and synthetic data",
        "map": "IAS MAP estimate",
        "mcmc": "Gibbs sampling over the ROI",
        "leadfield": "electric and magnetic lead fields of a mesh model",
        "summarize": "localization report of a run directory",
    }
    for name, h in helps.items():
        sp = sub.add_parser(name, help=h)
        sp.add_argument("--out", required=True, type=Path, help="run directory")
        sp.add_argument("--config", type=Path, help="JSON config (overrides the preset)")
        sp.add_argument("--preset", choices=PRESETS, help="named preset")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("-v", "--verbose", action="store_true", help="progress and debug logging")
    return p


def _config_for(args):
    """Explicit config or preset; otherwise the one stored in the run directory."""
    if args.config is None and args.preset is None:
        stored = args.out / "config.json"
        if args.command == "summarize":
            return None
        if not stored.exists():
            raise ConfigError(f"no --config/--preset given and {stored} does not exist")
        cfg = read_json(stored)
        if args.seed is not None:
            cfg["seed"] = args.seed
        return cfg
    return resolve_config(args.preset, args.config, args.seed)


def _progress(n):
    every = max(1, n // 10)

    def cb(i):
        if i % every == 0 or i == n:
            log.info("sweep %d / %d", i, n)
    return cb


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_for(args)
        if args.command == "simulate":
            res = cmd_simulate(cfg, args.out)
            res = {"outputs": res["outputs"], "sigma": res["sigma"], "n_data": res["n_data"]}
        elif args.command == "map":
            res = cmd_map(cfg, args.out)
        elif args.command == "mcmc":
            n = cfg["mcmc"]["sample_size"]
            res = cmd_mcmc(cfg, args.out, progress=_progress(n) if args.verbose else None)
        elif args.command == "leadfield":
            res = cmd_leadfield(cfg, args.out)
        else:
            res = cmd_summarize(cfg, args.out)
    except ConfigError as exc:
        print(f"hbloc {args.command}: configuration error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RunLockedError as exc:
        print(f"hbloc {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - reported with the command name
        log.debug("failure", exc_info=True)
        print(f"hbloc {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(res, indent=2, sort_keys=True, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
