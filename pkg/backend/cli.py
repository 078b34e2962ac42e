"""
Command line - run, compare and fluid subcommands plus the HTTP service

    sipsim run data/scenarios/tandem_slowdown.conf --seed 7 --out out/slowdown
    sipsim compare a.conf b.conf --seeds 10 --workers 4 --out out/cmp
    sipsim fluid data/scenarios/tandem_slowdown.conf
    sipsim serve --port 8000

Exit codes: 0 success, 1 configuration error, 2 any other failure.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from .config import ScenarioConfig, load_scenario, with_overrides
from .errors import ConfigError, SimulationError
from .fluid import run_fluid
from .network import compare, run_scenario

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def configure_logging(verbose: bool = False) -> None:
    level = "DEBUG" if verbose else os.getenv("SIPSIM_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _scenario(path: str, seed: Optional[int] = None, out: Optional[str] = None) -> ScenarioConfig:
    cfg = load_scenario(path)
    run = {}
    if seed is not None:
        run["seed"] = seed
    if out is not None:
        run["out"] = out
    return with_overrides(cfg, run=run) if run else cfg


def _print_summary(summary) -> None:
    for metric, value in summary.items():
        print(f"{metric:32s} {'' if value is None else value}")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _scenario(args.scenario, args.seed, args.out)
    report = run_scenario(cfg)
    _print_summary(report.summary)
    print(f"reports written to {cfg.run.out}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    if args.seeds < 1:
        raise ConfigError("--seeds", "need at least one seed")
    cfgs = [load_scenario(path) for path in args.scenarios]
    base = args.seed if args.seed is not None else cfgs[0].run.seed
    seeds = [base + i for i in range(args.seeds)]
    out = args.out or cfgs[0].run.out
    rows = compare(cfgs, seeds, workers=args.workers, out=out)
    for row in rows:
        means = "  ".join(f"{metric}={'' if value is None else f'{value:.4f}'}" for metric, value in row.means.items())
        print(f"{row.config:24s} goodput={row.goodput_mean:.4f}  {means}")
    print(f"comparison written to {os.path.join(out, 'comparison.csv')}")
    return EXIT_OK


def cmd_fluid(args: argparse.Namespace) -> int:
    cfg = _scenario(args.scenario, out=args.out)
    trajectory = run_fluid(cfg, args.dt)
    os.makedirs(cfg.run.out, exist_ok=True)
    path = trajectory.resample(cfg.run.sample_interval).write(os.path.join(cfg.run.out, "fluid.csv"))
    print(f"trajectory written to {path}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("backend.main:app", host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sipsim", description="SIP overload control simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one scenario and write its reports")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.set_defaults(handler=cmd_run)

    cmp_ = sub.add_parser("compare", help="run scenarios on the same seeds and tabulate them")
    cmp_.add_argument("scenarios", nargs="+")
    cmp_.add_argument("--seeds", type=int, default=5, help="number of seeds per scenario")
    cmp_.add_argument("--seed", type=int, help="first seed (default: run.seed of the first scenario)")
    cmp_.add_argument("--workers", type=int, default=1)
    cmp_.add_argument("--out")
    cmp_.set_defaults(handler=cmd_compare)

    fluid = sub.add_parser("fluid", help="integrate the fluid model of a two-proxy scenario")
    fluid.add_argument("scenario")
    fluid.add_argument("--dt", type=float)
    fluid.add_argument("--out")
    fluid.set_defaults(handler=cmd_fluid)

    serve = sub.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default=os.getenv("SIPSIM_HOST", "127.0.0.1"))
    serve.add_argument("--port", type=int, default=int(os.getenv("SIPSIM_PORT", "8000")))
    serve.set_defaults(handler=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
