"""Command-line entry point: ``dbr-lab <subcommand> [--config PATH] [--out DIR] ...``.

Exit codes: 0 success, 1 criterion or config failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, DbrLabError
from .harness import ExperimentConfig, run_experiment

SUBCOMMANDS = {
    "regress": ("regression_sweep", {}),
    "lowerbound": ("lower_bound", {}),
    "adaptive": ("adaptive_tau", {}),
    "star": ("star_linf", {"parts": ["star"]}),
    "linf": ("star_linf", {"parts": ["linf"], "linf_scenario": "linf_singleton"}),
    "offline": ("offline_rl", {}),
    "online": ("online_rl", {}),
    "verify": ("verify", {}),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dbr-lab", description="Seeded experiments for disagreement-based regression.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (kind, _) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=f"run a {kind} experiment")
        p.add_argument("--config", help="JSON experiment config (defaults to the built-in scenario)")
        p.add_argument("--out", help="output directory (overrides output_path)")
        p.add_argument("--replicates", type=int)
        p.add_argument("--base-seed", type=int)
        p.add_argument("--quiet", action="store_true")
    return parser


def make_config(args) -> ExperimentConfig:
    kind, defaults = SUBCOMMANDS[args.command]
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if cfg.kind != kind:
            raise ConfigError(f"config kind {cfg.kind!r} does not match subcommand {args.command!r}")
        for key, value in defaults.items():
            cfg.params.setdefault(key, value)
    else:
        cfg = ExperimentConfig(kind=kind, params=dict(defaults))
        if kind == "star_linf" and args.command == "linf":
            cfg.n_grid = [200]
    if args.out:
        cfg.output_path = args.out
    overrides = {}
    if args.replicates is not None:
        overrides["replicates"] = args.replicates
    if args.base_seed is not None:
        overrides["base_seed"] = args.base_seed
    if overrides:
        base_dir = getattr(cfg, "_base_dir", None)
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), **overrides})
        if base_dir:
            cfg._base_dir = base_dir
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    echo = (lambda *_: None) if args.quiet else print
    try:
        cfg = make_config(args)
        out = run_experiment(cfg, echo=echo)
    except OSError as exc:
        print(f"dbr-lab: I/O error: {exc}", file=sys.stderr)
        return 2
    except DbrLabError as exc:
        print(f"dbr-lab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    echo(f"wrote {out / 'results.csv'} and {out / 'manifest.json'}")
    if cfg.kind == "verify":
        import json
        if not json.loads((out / "manifest.json").read_text())["all_passed"]:
            return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
