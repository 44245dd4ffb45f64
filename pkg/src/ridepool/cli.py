"""Command line entry point: ``ridepool simulate|sweep|zones|validate``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .engine import ConfigError, Scenario, run
from .network import TravelTimeMatrix, build_zones, load_network, write_zones
from .reporting import run_experiment_matrix, write_run_outputs


def _pairs(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _scenario(args) -> Scenario:
    overrides = _pairs(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if args.config:
        return Scenario.from_file(args.config, overrides)
    sc = Scenario().with_values(overrides)
    sc.validate()
    return sc


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    result = run(sc)
    rep = write_run_outputs(result, args.out)
    print(f"served {rep.served_count}/{rep.requests} ({rep.service_rate:.3f}), "
          f"VRH {rep.avg_vehicle_revenue_hours:.3f} h, empty {rep.empty_vkm:.1f} km -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    base = _scenario(args)
    sweeps = {}
    for item in args.sweep or []:
        k, v = item.split("=", 1)
        sweeps[k.strip()] = [x.strip() for x in v.split(",") if x.strip()]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    rows = run_experiment_matrix(base, sweeps, seeds, args.out, args.jobs)
    failed = sum(1 for r in rows if r.get("error"))
    print(f"{len(rows)} runs written to {Path(args.out) / 'kpis.csv'} ({failed} failed)")
    return 1 if failed else 0


def cmd_zones(args) -> int:
    net = load_network(args.network)
    zones = build_zones(net, args.reach_limit, TravelTimeMatrix(net))
    write_zones(zones, args.out)
    print(f"{len(zones)} zones written to {args.out}")
    return 0


def cmd_validate(args) -> int:
    sc = _scenario(args)
    print(sc.to_text(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ridepool", description="Ride-pooling fleet simulation with repositioning")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one scenario")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("sweep", help="run a parameter grid over several seeds")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.add_argument("--sweep", action="append", metavar="KEY=V1,V2")
    s.add_argument("--seeds")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("zones", help="compute zone centroids for a network directory")
    s.add_argument("--network", required=True)
    s.add_argument("--reach-limit", type=float, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_zones)

    s = sub.add_parser("validate", help="check a scenario file and print the resolved values")
    s.add_argument("--config", required=True)
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
