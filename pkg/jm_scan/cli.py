"""
Command-line interface.

Subcommands ``fit``, ``simulate``, ``replicate-study`` and ``benchmark``. Exit status is 0 on success,
1 on a model or numeric failure and 2 on usage, schema or I/O errors.
"""
import argparse
import sys
import time
from pathlib import Path

from loguru import logger

from .convert import read_params, write_fit_result
from .data_model import ModelSpec, load_dataset, write_dataset
from .em_driver import FitOptions, fit
from .errors import JointModelError, SchemaError
from .riskset_scan import engines
from .simulate import ScenarioConfig, default_scenario, generate
from .study import benchmark, replicate_study

EXIT_OK = 0
EXIT_MODEL = 1
EXIT_USAGE = 2


def positive_int(string: str) -> int:
    try:
        value = int(string)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{string} is not an integer") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"{string} is not a positive integer")
    return value


def positive_float(string: str) -> float:
    try:
        value = float(string)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{string} is not a number") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"{string} is not a positive number")
    return value


def _fit_options(args, **overrides) -> FitOptions:
    settings = dict(max_iter=args.max_iter, tol=args.tol, threads=args.threads, engine=args.engine)
    settings.update(overrides)
    return FitOptions(**settings)


def _scenario(args) -> ScenarioConfig:
    scn = ScenarioConfig.from_file(args.scenario) if args.scenario else default_scenario()
    return scn.replace(n=args.n) if args.n else scn


def cmd_fit(args) -> int:
    spec = ModelSpec.from_file(args.spec)
    ds = load_dataset(args.long, args.surv, spec, drop_post_event=args.drop_post_event)
    summary = ds.summary()
    logger.info(
        f"Loaded {summary['subjects']} subjects, censoring rate {summary['censoring_rate']:.3f}"
    )
    init = read_params(args.init, spec) if args.init else None

    start = time.perf_counter()
    result = fit(ds, spec, _fit_options(args, freeze_alpha=args.freeze_alpha), init=init)
    elapsed = time.perf_counter() - start

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_fit_result(result, spec, out / "fit.json", out / "estimates.csv")
    status = "converged" if result.converged else "did not converge"
    print(
        f"EM {status} after {result.iterations} iterations in {elapsed:.2f} s, "
        f"log-likelihood {result.loglik_trace[-1]:.4f}"
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    scn = _scenario(args)
    ds = generate(scn, args.seed, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out / "long.csv", out / "surv.csv")
    (out / "spec.toml").write_text(scn.model_spec().dumps())
    summary = ds.summary()
    print(
        f"Simulated {summary['subjects']} subjects: "
        f"censoring {100 * summary['censoring_rate']:.1f}%, "
        "event rates "
        + ", ".join(f"{100 * rate:.1f}%" for rate in summary["event_rates"])
        + f", {summary['mean_profile_length']:.2f} measurements per biomarker"
    )
    return EXIT_OK


def cmd_replicate_study(args) -> int:
    scn = _scenario(args)
    opts = _fit_options(args, threads=1)
    summary, failures = replicate_study(
        scn, args.replicates, args.seed, opts, threads=args.threads, progress=not args.quiet
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    summary.to_csv(args.out, index=False)
    print(f"{args.replicates - failures} of {args.replicates} replicates succeeded, wrote {args.out}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    scn = default_scenario() if not args.scenario else ScenarioConfig.from_file(args.scenario)
    # each fit gets its engine from the list, the first one only passes validation here
    opts = _fit_options(args, engine=args.engine[0])
    frame = benchmark(scn, args.n, args.engine, args.seed, opts)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(args.out, index=False)
    print(frame.to_string(index=False))
    return EXIT_OK


def _add_fit_settings(parser: argparse.ArgumentParser, max_iter: int = 500, threads: int = 1):
    parser.add_argument("--max-iter", metavar="INTEGER", type=positive_int, default=max_iter)
    parser.add_argument("--tol", metavar="NUMBER", type=positive_float, default=1e-4)
    parser.add_argument(
        "--threads",
        metavar="INTEGER",
        type=positive_int,
        default=threads,
        help="worker threads",
    )
    parser.add_argument("--seed", metavar="INTEGER", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jm-scan",
        description="Joint models of multivariate longitudinal and competing-risks data",
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL"],
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    p = subparsers.add_parser("fit", help="fit the joint model to CSV data")
    p.add_argument("--long", metavar="FILENAME", required=True, help="longitudinal CSV")
    p.add_argument("--surv", metavar="FILENAME", required=True, help="survival CSV")
    p.add_argument("--spec", metavar="FILENAME", required=True, help="TOML model specification")
    p.add_argument("--out", metavar="DIRECTORY", required=True)
    p.add_argument("--engine", choices=sorted(engines), default="scan")
    p.add_argument(
        "--drop-post-event",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="drop measurements taken after the survival time instead of failing",
    )
    p.add_argument("--init", metavar="FILENAME", help="starting values from a fit JSON document")
    p.add_argument("--freeze-alpha", action="store_true", help="hold the associations at zero")
    _add_fit_settings(p)
    p.set_defaults(handler=cmd_fit)

    p = subparsers.add_parser("simulate", help="generate a dataset from a scenario")
    p.add_argument("--scenario", metavar="FILENAME", help="TOML scenario, default scenario if omitted")
    p.add_argument("--n", metavar="INTEGER", type=positive_int)
    p.add_argument("--out", metavar="DIRECTORY", required=True)
    p.add_argument("--threads", metavar="INTEGER", type=positive_int, default=1)
    p.add_argument("--seed", metavar="INTEGER", type=int, default=1)
    p.set_defaults(handler=cmd_simulate)

    p = subparsers.add_parser("replicate-study", help="bias, SD, SE and coverage over replicates")
    p.add_argument("--scenario", metavar="FILENAME")
    p.add_argument("--n", metavar="INTEGER", type=positive_int, default=300)
    p.add_argument("--replicates", metavar="INTEGER", type=positive_int, default=100)
    p.add_argument("--out", metavar="FILENAME", required=True)
    p.add_argument("--engine", choices=sorted(engines), default="scan")
    p.add_argument("--quiet", action="store_true", help="no progress bar")
    _add_fit_settings(p)
    p.set_defaults(handler=cmd_replicate_study)

    p = subparsers.add_parser("benchmark", help="wall time and operation counts per sample size")
    p.add_argument("--scenario", metavar="FILENAME")
    p.add_argument(
        "--n", metavar="INTEGER", type=positive_int, nargs="+", default=[500, 1000, 2000]
    )
    p.add_argument("--engine", choices=sorted(engines), nargs="+", default=["scan", "naive"])
    p.add_argument("--out", metavar="FILENAME", required=True)
    _add_fit_settings(p, max_iter=5)
    p.set_defaults(handler=cmd_benchmark)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)

    logger.enable("jm_scan")
    logger.remove()
    logger.add(sys.stderr, level=args.log_level)

    try:
        return args.handler(args)
    except FileNotFoundError as e:
        print(f"file not found: {e.filename}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e.strerror}: {e.filename}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except JointModelError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MODEL


def main_entry():
    sys.exit(main())
