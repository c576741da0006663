"""Command line entry point.

    gdkl run CONFIG [--key value ...]   run an experiment, write its JSON report
    gdkl verify [pytest args]           run the oracle and property test suites
    gdkl toy [--out toy.csv]            toy data plus an RBF GP fit as CSV

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""
import argparse
import csv
import logging
import os
import subprocess
import sys

import numpy as np

from gdkl.errors import ConfigError, GDKLError, NumericalFailure

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2


def _parse_overrides(tokens):
    overrides = {}
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(f"expected --key value, got {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            value = next(it, None)
            if value is None:
                raise ConfigError(f"missing value for --{key}")
        overrides[key.replace("-", "_")] = value
    return overrides


def cmd_run(args, extra):
    from gdkl.experiment import load_config, run_experiment

    config = load_config(args.config, _parse_overrides(extra))
    report = run_experiment(config)
    for name, stats in report["aggregate"].items():
        print(f"{name:>10s}: {stats['mean']:.4f} +- {stats['std']:.4f} (n={stats['n']})")
    print(f"report written to {config.output}")
    failed = [f for f in report["folds"] if f["status"] != "ok"]
    if any(f.get("numerical") for f in failed):
        return EXIT_NUMERICAL
    if failed:
        print(f"{len(failed)} fold(s) failed, see the report", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_verify(args, extra):
    tests = os.path.join(os.path.dirname(__file__), "..", "..", "tests")
    target = os.path.normpath(tests) if os.path.isdir(tests) else "tests"
    cmd = [sys.executable, "-m", "pytest", target, "-q", "-m", "not slow"] + list(extra)
    return subprocess.call(cmd)


def cmd_toy(args, extra):
    from gdkl.baselines import predict_gp_rbf, train_gp_rbf
    from gdkl.data import toy_dataset
    from gdkl.train import make_rng

    D1, D2, f = toy_dataset(make_rng(args.seed, 7))
    model = train_gp_rbf(D1, steps=args.steps)
    grid = np.linspace(-2.0, 12.0, args.grid)
    latent, marginal = predict_gp_rbf(model, grid[:, None])
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "x", "y", "f", "mean", "latent_std", "predictive_std"])
        for kind, D in (("train", D1), ("test", D2)):
            for x, y in zip(D.inputs[:, 0], D.targets[:, 0]):
                w.writerow([kind, repr(float(x)), repr(float(y)), repr(float(f(x))), "", "", ""])
        for x, m, v, pv in zip(grid, latent.mean[:, 0], latent.variance[:, 0], marginal.variance[:, 0]):
            w.writerow(["fit", repr(float(x)), "", repr(float(f(x))), repr(float(m)),
                        repr(float(np.sqrt(max(v, 0.0)))), repr(float(np.sqrt(pv)))])
    print(f"toy data and GP-RBF fit written to {args.out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="gdkl", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config; extra --key value pairs override fields")
    r.add_argument("config")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("verify", help="run the oracle/property suites (extra args go to pytest)")
    v.set_defaults(func=cmd_verify)
    t = sub.add_parser("toy", help="emit the toy dataset and an RBF GP fit as CSV")
    t.add_argument("--out", default="toy.csv")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--grid", type=int, default=281)
    t.set_defaults(func=cmd_toy)
    return p


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if extra and args.command == "toy":
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (GDKLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
