"""Command line interface: ``thbch run|project|compare|check-mesh``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .adaptivity import check_admissible
from .driver import Snapshot, compare_runs, initial_state, load_config, run, write_outputs
from .errors import ConfigError, StepFailure, StructureError
from .hierarchy import HierarchicalMesh, HierarchicalSpace


def _out_dir(args, config, config_path):
    if args.output:
        return args.output
    if config.output_dir:
        return config.output_dir
    stem = os.path.splitext(os.path.basename(config_path))[0]
    return os.path.join("runs", stem)


def cmd_run(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config, args.config)
    try:
        result = run(config, out_dir=out, check_mu=args.check_mu)
    except StepFailure as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        print(f"partial outputs written to {out}", file=sys.stderr)
        return 2
    last = result.records[-1]
    print(f"completed {len(result.records)} steps, t={last.time:.6g}, dofs={last.dofs}, outputs in {out}")
    return 0


def cmd_project(args) -> int:
    config = load_config(args.config)
    out = _out_dir(args, config, args.config)
    state = initial_state(config)
    write_outputs(out, config, [], [Snapshot(0, 0.0, state.space, state.u, state.v)])
    print(f"initial condition with {state.space.ndof} dofs written to {out}")
    return 0


def cmd_compare(args) -> int:
    rows = compare_runs(args.run_dir, args.ref_dir)
    if not rows:
        print("no common snapshots", file=sys.stderr)
        return 1
    print("time,error")
    for t, err in rows:
        print(f"{t!r},{err!r}")
    return 0


def cmd_check_mesh(args) -> int:
    with open(args.dump, encoding="ascii") as fh:
        mesh = HierarchicalMesh.from_dump(fh.read())
    mesh.validate()
    mu = args.mu if args.mu is not None else mesh.degree
    ok, bad = check_admissible(HierarchicalSpace(mesh), mu)
    if ok:
        print(f"admissible (mu={mu}), {mesh.num_active} active cells")
        return 0
    print(f"NOT admissible (mu={mu}): {len(bad)} offending cells")
    for lev, i, j in bad:
        print(f"{lev} {i} {j}")
    return 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="thbch", description="Adaptive THB-spline Cahn-Hilliard solver")
    ap.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a simulation from a config file")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="output directory (overrides output_dir)")
    p.add_argument("--check-mu", action="store_true", help="assert mesh admissibility after every step")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("project", help="write only the initial condition")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="output directory (overrides output_dir)")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("compare", help="relative L2 error per common snapshot")
    p.add_argument("run_dir")
    p.add_argument("ref_dir")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("check-mesh", help="verify admissibility of a mesh dump")
    p.add_argument("dump")
    p.add_argument("--mu", type=int, default=None, help="admissibility class (default: degree)")
    p.set_defaults(func=cmd_check_mesh)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, StructureError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
