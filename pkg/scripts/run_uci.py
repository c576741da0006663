"""Run the small-UCI regression protocol for several methods and print a summary.

    python scripts/run_uci.py data/boston.csv --methods DKL GDKL ablation:pred ablation:dist NNGP

Reports are cached under results/ keyed by config and source hash, so the
acceptance suite picks them up instead of retraining.
"""
import argparse
import logging
import time

from gdkl.experiment import ExperimentConfig, cached_report
from gdkl.train import TrainConfig

DEFAULT_METHODS = ("GP-RBF", "NNGP", "DKL", "GDKL", "ablation:pred", "ablation:dist")


def main():
    p = argparse.ArgumentParser()
    p.add_argument("csv")
    p.add_argument("--methods", nargs="+", default=list(DEFAULT_METHODS))
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--cache", default="results")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO)
    for method in args.methods:
        cfg = ExperimentConfig(dataset=args.csv, method=method, folds=args.folds, train=TrainConfig())
        start = time.time()
        rep = cached_report(cfg, args.cache)
        agg = rep["aggregate"]
        print(f"{method:>14s}  LL {agg['test_ll']['mean']:9.3f} +- {agg['test_ll']['std']:7.3f}  "
              f"RMSE {agg['rmse']['mean']:6.3f} +- {agg['rmse']['std']:5.3f}  "
              f"failed {rep['failed_folds']}  ({time.time() - start:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
