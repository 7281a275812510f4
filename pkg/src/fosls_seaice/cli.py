"""Command line entry point: ``fosls-seaice run|verify|mesh-info|config``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import driver
from .mesh import build_structured, mesh_quality
from .verification import SUITES


def _cmd_run(args) -> int:
    try:
        cfg = driver.load_config(args.config, args.set)
    except driver.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        runlog = driver.run(cfg)
    except driver.RunError as exc:
        print(f"run aborted at step {exc.step}: {exc}", file=sys.stderr)
        return 1
    n_bad = sum(not r.gn_converged for r in runlog.records)
    print(f"{len(runlog.records)} steps, {len(runlog.snapshots)} snapshots, output in {cfg.output_dir}")
    if n_bad:
        print(f"warning: {n_bad} steps ended without Gauss-Newton convergence", file=sys.stderr)
        return 3
    return 0


def _cmd_verify(args) -> int:
    names = list(SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in names:
        print(f"== {name}")
        for check in SUITES[name]():
            print(check.line())
            ok &= check.passed
    return 0 if ok else 1


def _cmd_mesh_info(args) -> int:
    m = build_structured(args.n)
    q = mesh_quality(m)
    print(f"vertices   {m.n_vertices}")
    print(f"edges      {m.n_edges} ({int(m.boundary_edge_flags.sum())} on the boundary)")
    print(f"triangles  {m.n_triangles}")
    print(f"min angle  {q.min_angle_deg:.6g} deg")
    print(f"max aspect {q.max_aspect_ratio:.6g}")
    print(f"min area   {q.min_area:.6g}")
    print(f"valid      {q.valid}")
    return 0


def _cmd_config(args) -> int:
    try:
        cfg = driver.load_config(None, args.set)
    except driver.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(driver.default_config_text(cfg), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fosls-seaice", description="Least-squares finite elements for viscous-plastic sea ice")
    p.add_argument("-v", "--verbose", action="store_true", help="log every time step")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the benchmark")
    r.add_argument("config", nargs="?", default=None, help="INI config file (defaults used if omitted)")
    r.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config entry")
    r.set_defaults(func=_cmd_run)

    v = sub.add_parser("verify", help="run a verification suite")
    v.add_argument("suite", choices=[*SUITES, "all"])
    v.set_defaults(func=_cmd_verify)

    m = sub.add_parser("mesh-info", help="report size and quality of the structured n x n mesh")
    m.add_argument("n", type=int)
    m.set_defaults(func=_cmd_mesh_info)

    c = sub.add_parser("config", help="print the default configuration file")
    c.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    c.set_defaults(func=_cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
