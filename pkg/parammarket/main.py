"""
Command-line entry point.

This module wires the configuration files to the services and maps service
errors to exit codes:

    0  every requested output written and every internal check passed
    1  an internal check failed (bound violation, decay violation, alignment)
    2  configuration, schema or argument error
    3  divergence during a run
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from parammarket import __version__
from parammarket.exceptions import ConfigError, DivergenceError, MarketError
from parammarket.models.market import PriorDistribution, PriorKind, Settlement, ValuationQuadruple
from parammarket.services import bounds, experiments, pricing
from parammarket.utils import artifacts
from parammarket.utils.config_file import is_sweep_file, load_market_config, load_sweep_config

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3


def cmd_simulate(args: argparse.Namespace) -> int:
    """Run one market and write trades.csv, curves.csv and summary.json."""
    if is_sweep_file(args.config):
        raise ConfigError("file describes a sweep, run it with the sweep command", None, "sweep")
    config = load_market_config(args.config)
    if args.seed is not None:
        config = config.model_copy(update={"seed": args.seed})
    result = experiments.simulate(config)
    summary = result.summary()

    out = Path(args.out)
    artifacts.write_csv(artifacts.trades_frame(result.log), out / "trades.csv")
    artifacts.write_csv(artifacts.curves_frame(result.log), out / "curves.csv")
    artifacts.write_json(summary, out / "summary.json")
    logger.info(f"Wrote {len(result.log.trades)} trade record(s) and {config.rounds} round(s) of curves to {out}")

    for agent, improvement in result.improvements().items():
        print(f"{agent}: relative improvement {improvement:.6f}")
    decay = summary["decay_check"]
    if decay["violations"] or decay["lower_violations"]:
        print(
            f"decay check failed: upper bound broken in rounds {decay['violations']}, "
            f"lower bound broken in rounds {decay['lower_violations']}",
            file=sys.stderr,
        )
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_bounds_check(args: argparse.Namespace) -> int:
    """Randomised soundness sweep of every bound."""
    report = bounds.check_soundness(trials=args.trials, seed=args.seed if args.seed is not None else 0)
    out = Path(args.out)
    rows = [
        {**violation.model_dump(exclude={"scenario"}), "scenario": violation.scenario.value}
        for violation in report.violations
    ]
    artifacts.write_csv(artifacts.frame(rows, artifacts.VIOLATION_COLUMNS), out / "violations.csv")
    artifacts.write_json(report.model_dump(mode="json", exclude={"violations"}) | {"violations": len(rows)}, out / "bounds_summary.json")
    print(f"{report.trials} trials, {len(rows)} violation(s)")
    return EXIT_OK if report.sound else EXIT_CHECK_FAILED


def cmd_price(args: argparse.Namespace) -> int:
    """Evaluate a quadruple, a prior, a seller valuation or a settlement; print one line."""
    settlement = {}
    if args.quadruple is not None:
        q = ValuationQuadruple(
            v_a_self=args.quadruple[0], v_b_of_a=args.quadruple[1],
            v_b_self=args.quadruple[2], v_a_of_b=args.quadruple[3],
        )
        difference = pricing.nash_price_difference(q)
        settlement["price_a"], settlement["price_b"] = pricing.nash_prices(q)
        settlement["price_difference"] = difference
        settlement["revenue"] = pricing.cobb_douglas_revenue(q, difference)
    if args.prior is not None:
        prior = PriorDistribution(
            kind=args.prior, lo=args.lo, hi=args.hi, rate=args.rate, mu=args.mu, sigma=args.sigma,
        )
        settlement["myerson_price"] = pricing.myerson_price(prior)
    seller_valuation = args.seller
    if args.gain_a is not None:
        seller_valuation = pricing.seller_virtual_valuation(args.gain_a, args.alpha, args.beta, args.prior_kind)
    if seller_valuation is not None:
        settlement["seller_valuation"] = seller_valuation
    if args.buyer is not None and seller_valuation is not None:
        payment = pricing.settle(args.buyer, seller_valuation)
        settlement.update(buyer_valuation=args.buyer, payment=payment, traded=payment is not None)
    if not settlement:
        raise ValueError("nothing to price: give --quadruple, --prior, --gain-a or --buyer/--seller")
    print(Settlement(**settlement).model_dump_json(exclude_none=True))
    return EXIT_OK


def cmd_align_demo(args: argparse.Namespace) -> int:
    """Permuted-clone recovery and the interpolation curve."""
    demo = experiments.align_demo(seed=args.seed if args.seed is not None else 0, networks=args.networks)
    artifacts.write_csv(artifacts.frame(demo.curve, artifacts.ALIGNMENT_COLUMNS), Path(args.out) / "alignment.csv")
    verdict = "ok" if demo.passed else "FAILED"
    print(
        f"alignment {verdict}: recovered {demo.recovered}/{demo.networks}, "
        f"merge deviation {demo.max_merge_deviation:.3g}, function deviation {demo.max_function_deviation:.3g}"
    )
    return EXIT_OK if demo.passed else EXIT_CHECK_FAILED


def cmd_sweep(args: argparse.Namespace) -> int:
    """Run a sweep and write runs.csv, aggregate.csv and sweep_summary.json."""
    sweep = load_sweep_config(args.config)
    if args.seed is not None:
        sweep = sweep.model_copy(update={"market": sweep.market.model_copy(update={"seed": args.seed})})
    result = experiments.run_sweep(sweep, jobs=args.jobs)
    out = Path(args.out)
    artifacts.write_csv(result.runs, out / "runs.csv")
    artifacts.write_csv(result.aggregate, out / "aggregate.csv")
    artifacts.write_json(result.summary, out / "sweep_summary.json")
    logger.info(f"Wrote {len(result.runs)} run(s) of sweep {sweep.axis.value} to {out}")
    if "spearman" in result.summary:
        print(f"spearman {result.summary['spearman']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="parammarket", description="Parameter-market simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    commands = parser.add_subparsers(dest="command", required=True)

    def add(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text)
        sub.set_defaults(handler=handler)
        return sub

    simulate = add("simulate", cmd_simulate, "run one market")
    simulate.add_argument("config", help="market config file")
    simulate.add_argument("--out", default="out", help="output directory")
    simulate.add_argument("--seed", type=int, help="override the config seed")

    check = add("bounds-check", cmd_bounds_check, "randomised soundness check of the bounds")
    check.add_argument("--trials", type=int, default=10_000)
    check.add_argument("--seed", type=int)
    check.add_argument("--out", default="out")

    price = add("price", cmd_price, "evaluate pricing rules")
    price.add_argument("--quadruple", type=float, nargs=4, metavar=("V_A_SELF", "V_B_OF_A", "V_B_SELF", "V_A_OF_B"))
    price.add_argument("--prior", type=PriorKind, choices=list(PriorKind))
    price.add_argument("--lo", type=float, default=0.0)
    price.add_argument("--hi", type=float, default=1.0)
    price.add_argument("--rate", type=float, default=1.0)
    price.add_argument("--mu", type=float, default=0.0)
    price.add_argument("--sigma", type=float, default=1.0)
    price.add_argument("--gain-a", type=float)
    price.add_argument("--alpha", type=float, default=1.0)
    price.add_argument("--beta", type=float, default=1.0)
    price.add_argument("--prior-kind", type=PriorKind, choices=list(PriorKind), default=PriorKind.UNIFORM)
    price.add_argument("--buyer", type=float, help="buyer valuation")
    price.add_argument("--seller", type=float, help="seller valuation")

    demo = add("align-demo", cmd_align_demo, "permuted-clone alignment demo")
    demo.add_argument("--seed", type=int)
    demo.add_argument("--networks", type=int, default=20)
    demo.add_argument("--out", default="out")

    sweep = add("sweep", cmd_sweep, "run a parameter sweep")
    sweep.add_argument("config", help="sweep config file")
    sweep.add_argument("--out", default="out")
    sweep.add_argument("--seed", type=int, help="override the base seed")
    sweep.add_argument("--jobs", type=int, default=1, help="parallel cells")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return args.handler(args)
    except ConfigError as e:
        location = getattr(args, "config", "<config>")
        if e.line is not None:
            location += f":{e.line}"
        field = f" {e.field}:" if e.field else ""
        print(f"{location}:{field} {e.message}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"error: {str(e)}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ValueError, MarketError) as e:
        print(f"error: {str(e)}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
