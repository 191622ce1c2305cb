"""``lab`` command line: run experiment configs, the acceptance suite, or Table 1.

Exit status is 0 iff every requested check passes, 1 if any check fails and 2
for invalid configurations or arguments.
"""
from __future__ import annotations

import argparse
import sys
from importlib import resources
from pathlib import Path

from . import acceptance, experiments
from .experiments import ConfigError, ExperimentConfig, output_root


def bundled_configs() -> dict:
    folder = resources.files("advlab") / "configs"
    return {Path(p.name).stem: Path(str(p)) for p in folder.iterdir() if p.name.endswith(".ini")}


def resolve_config(name: str) -> Path:
    path = Path(name)
    if path.exists():
        return path
    known = bundled_configs()
    if name in known:
        return known[name]
    raise ConfigError(f"{name}: no such file or bundled config (bundled: {', '.join(sorted(known))})")


def _progress(job):
    print(f"  trained {job.group()} seed {job.cfg.seed}", file=sys.stderr, flush=True)


def cmd_run(args) -> int:
    try:
        cfg = experiments.load_config(resolve_config(args.config))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    outcome = experiments.run_experiment(cfg, args.output_root, args.workers, None if args.quiet else _progress)
    for path in outcome.artifacts:
        print(f"wrote {path}")
    for check in outcome.checks:
        print(check.line())
    return 0 if outcome.passed else 1


def cmd_check(args) -> int:
    only = set(args.only.split(",")) if args.only else None
    results = acceptance.run_suite(args.output_root, args.workers, only, progress=None if args.quiet else _progress)
    passed = sum(c.passed for c in results)
    print(f"{passed}/{len(results)} criteria passed")
    return 0 if results and passed == len(results) else 1


def cmd_table1(args) -> int:
    cfg = ExperimentConfig("table1", "table1", gamma=args.gamma)
    outcome = experiments.run_experiment(cfg, args.output_root)
    for path in outcome.artifacts:
        print(f"wrote {path}")
    for check in outcome.checks:
        print(check.line())
    return 0 if outcome.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lab", description=__doc__.splitlines()[0])
    parser.add_argument("--output-root", default=None,
                        help=f"artifact directory (default: ${experiments.OUTPUT_ENV_VAR} or ./{experiments.DEFAULT_OUTPUT})")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment config (INI file or bundled name)")
    run.add_argument("config")
    run.add_argument("--workers", type=int, default=1, help="parallel training processes")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=cmd_run)

    check = sub.add_parser("check", help="run the acceptance suite")
    check.add_argument("--workers", type=int, default=1)
    check.add_argument("--only", default=None, help="comma-separated criterion numbers or keys")
    check.add_argument("--quiet", action="store_true")
    check.set_defaults(func=cmd_check)

    tab = sub.add_parser("table1", help="regenerate the Key2Door value/advantage table")
    tab.add_argument("--gamma", type=float, default=None, help="discount (default: calibrate over 0.99, 1.0)")
    tab.set_defaults(func=cmd_table1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("--workers must be >= 1", file=sys.stderr)
        return 2
    args.output_root = output_root(args.output_root)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
