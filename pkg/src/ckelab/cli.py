"""Command line: ``ckelab {solve,deform,futaki,kernel,expand}``."""

from __future__ import annotations

import argparse
import sys

from . import harness
from .config import list_presets, load_config
from .errors import CKEError, ConfigError, NoConvergence


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ckelab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH",
                        help=f"JSON config file or preset name ({', '.join(list_presets())})")
    common.add_argument("--out", metavar="DIR", help="output directory (default: the config's 'output')")
    common.add_argument("--resolution", type=int, metavar="M", help="Gauss–Legendre nodes per axis")
    common.add_argument("--tol-newton", type=float, metavar="X", help="Newton residual tolerance")
    common.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes")
    for name, help_ in [("solve", "build the start tuple and report its cKE residual"),
                        ("deform", "continue the start tuple along t eta"),
                        ("futaki", "coupled Futaki invariant against the barycenter formula"),
                        ("kernel", "singular-value check of the linearised operator")]:
        sub.add_parser(name, parents=[common], help=help_)
    ex = sub.add_parser("expand", parents=[common], help="fit the expansion order of a stored trace")
    ex.add_argument("--trace", required=True, metavar="CSV", help="trace.csv written by 'deform'")
    ex.add_argument("--order", type=int, help="candidate order k (default: rounded fitted order)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args.config, resolution=args.resolution)
        if args.tol_newton is not None:
            if not args.tol_newton > 0:
                raise ConfigError("--tol-newton must be positive")
            cfg.tolerances["newton"] = args.tol_newton
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        out = args.out or cfg.output
        if args.command == "solve":
            return harness.cmd_solve(cfg, out)
        if args.command == "deform":
            return harness.cmd_deform(cfg, out, jobs=args.jobs)
        if args.command == "futaki":
            return harness.cmd_futaki(cfg, out)
        if args.command == "kernel":
            return harness.cmd_kernel(cfg, out)
        return harness.cmd_expand(args.trace, out, args.order, cfg.tolerances["newton"], cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    except NoConvergence as exc:
        print(f"no convergence: {exc}", file=sys.stderr)
        return harness.EXIT_NONCONVERGENCE
    except CKEError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return harness.EXIT_NONCONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
