"""Experiment configuration, the seed x fold protocol and JSON reports.

Config files are INI style: an ``[experiment]`` section for the protocol and
an optional ``[train]`` section for ``TrainConfig`` fields. Tuple fields are
comma separated (``hidden = 100,100,100,20``).
"""
import configparser
import dataclasses
from dataclasses import dataclass, field
import json
import logging
import time

import numpy as np

from gdkl.baselines import predict_gp_rbf, predict_nngp, train_gp_rbf, train_nngp
from gdkl.data import kfold, load_csv, normalize, toy_dataset
from gdkl.errors import ConfigError, GDKLError, NumericalFailure
from gdkl.gp import Dataset
from gdkl.likelihoods import dirichlet_transform, predictive_class_probs
from gdkl.metrics import accuracy, brier, ece_mce, rmse, test_ll
from gdkl.sparse import sparse_predict, train_sparse_gdkl
from gdkl.train import TrainConfig, make_rng, predict, train_dkl, train_gdkl

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("GP-RBF", "NNGP", "DKL", "GDKL", "GDKL-sparse", "ablation:dist", "ablation:pred")
REGRESSION_METRICS = ("test_ll", "rmse")
CLASSIFICATION_METRICS = ("accuracy", "test_ll", "ece", "mce", "brier")


@dataclass
class ExperimentConfig:
    dataset: str = "builtin:toy"
    method: str = "GDKL"
    task: str = "regression"
    num_targets: int = 1
    num_classes: int = 2
    folds: int = 10
    split_mode: str = "kfold"
    test_fraction: float = 0.1
    seeds: tuple = (0,)
    metrics: tuple = ()
    output: str = "report.json"
    baseline_steps: int = 8000
    dkl_weight_decay: float = 1e-4
    batch_size: int = 256
    num_inducing: int = 50
    class_samples: int = 1024
    alpha_eps: float = 0.01
    bins: int = 15
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.metrics = tuple(self.metrics)
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.folds < 1:
            raise ConfigError("folds must be at least 1")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if self.split_mode not in ("kfold", "resplit"):
            raise ConfigError(f"unknown split_mode {self.split_mode!r}")
        known = REGRESSION_METRICS if self.task == "regression" else CLASSIFICATION_METRICS
        unknown = set(self.metrics) - set(known)
        if unknown:
            raise ConfigError(f"metrics {sorted(unknown)} not available for {self.task}")
        if self.task == "classification" and self.dataset == "builtin:toy":
            raise ConfigError("the toy dataset is a regression problem")

    def to_dict(self):
        return dataclasses.asdict(self)


def _coerce(value, default, name):
    """Parse the string ``value`` into the type of ``default``."""
    try:
        if isinstance(default, bool):
            return value.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, tuple):
            parts = [p.strip() for p in value.split(",") if p.strip()]
            if name in ("metrics",):
                return tuple(parts)
            return tuple(float(p) if "." in p or "e" in p.lower() else int(p) for p in parts)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if default is None:
            return None if value.strip().lower() in ("", "none") else int(value)
        return value
    except ValueError:
        raise ConfigError(f"bad value {value!r} for {name}") from None


_EXPERIMENT_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig) if f.name != "train"}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _default(f):
    return f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default


def build_config(experiment=None, train=None):
    """Build an ``ExperimentConfig`` from string-valued mappings."""
    exp_kw, train_kw = {}, {}
    for key, value in (experiment or {}).items():
        if key in _EXPERIMENT_FIELDS:
            exp_kw[key] = _coerce(value, _default(_EXPERIMENT_FIELDS[key]), key)
        elif key in _TRAIN_FIELDS:
            train_kw[key] = _coerce(value, _default(_TRAIN_FIELDS[key]), key)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    for key, value in (train or {}).items():
        if key not in _TRAIN_FIELDS:
            raise ConfigError(f"unknown train key {key!r}")
        train_kw[key] = _coerce(value, _default(_TRAIN_FIELDS[key]), key)
    try:
        return ExperimentConfig(train=TrainConfig(**train_kw), **exp_kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides=None):
    """Read an INI config; ``overrides`` (key -> string) win over file values."""
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not parser.read(path):
        raise ConfigError(f"cannot read config {path}")
    unknown = set(parser.sections()) - {"experiment", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    experiment = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    train = dict(parser["train"]) if parser.has_section("train") else {}
    for key, value in (overrides or {}).items():
        if key in _TRAIN_FIELDS and key not in _EXPERIMENT_FIELDS:
            train[key] = value
        else:
            experiment[key] = value
    return build_config(experiment, train)


# data -----------------------------------------------------------------------------


def _load(config, seed):
    """Full dataset (or a fixed toy split) plus integer labels in classification."""
    if config.dataset == "builtin:toy":
        D1, D2, _ = toy_dataset(make_rng(seed, 7))
        return D1, D2, None
    if config.task == "classification":
        raw = load_csv(config.dataset, num_targets=1)
        labels = raw.targets[:, 0]
        if np.any(labels != np.round(labels)):
            raise ConfigError("classification labels must be integers")
        return Dataset(raw.inputs, labels[:, None]), None, labels.astype(int)
    return load_csv(config.dataset, num_targets=config.num_targets), None, None


def _splits(config, D, D_test, seed):
    if D_test is not None:
        return [(None, None)]
    return kfold(D, config.folds, seed, mode=config.split_mode, test_fraction=config.test_fraction)


# methods ---------------------------------------------------------------------------


def fit(config, D, seed):
    """Train ``config.method`` on the (normalized) dataset ``D``; returns a predictor."""
    tc = dataclasses.replace(config.train, seed=seed)
    m = config.method
    if m == "GP-RBF":
        model = train_gp_rbf(D, steps=config.baseline_steps, lr=tc.lr, lengthscale_init=tc.lengthscale_init,
                             outputscale_init=tc.outputscale_init, noise_init=tc.noise_var_init)
        return model, lambda X: predict_gp_rbf(model, X)
    if m == "NNGP":
        model = train_nngp(D, tc.nngp_params, steps=config.baseline_steps, lr=tc.pretrain_lr,
                           noise_init=tc.noise_var_init)
        return model, lambda X: predict_nngp(model, X)
    if m == "DKL":
        model = train_dkl(dataclasses.replace(tc, weight_decay=config.dkl_weight_decay,
                                              total_steps=config.baseline_steps), D)
        return model, lambda X: predict(model, X)
    if m == "GDKL-sparse":
        model = train_sparse_gdkl(tc, D, batch_size=config.batch_size, num_inducing=config.num_inducing)
        return model, lambda X: sparse_predict(model, X)
    objective = {"GDKL": "gdkl", "ablation:dist": "dist", "ablation:pred": "pred"}[m]
    model = train_gdkl(dataclasses.replace(tc, objective=objective), D)
    return model, lambda X: predict(model, X)


def _evaluate_fold(config, D, D_test, labels, train_idx, test_idx, seed, fold):
    classification = config.task == "classification"
    if D_test is None:
        D_train, D_test = D.subset(train_idx), D.subset(test_idx)
    else:
        D_train = D
    train_seed = int(seed) * 1000 + int(fold)
    out = {"seed": int(seed), "fold": int(fold), "n_train": len(D_train), "n_test": len(D_test)}
    if classification:
        y_tr, y_te = labels[train_idx], labels[test_idx]
        targets, noise = dirichlet_transform(y_tr, config.num_classes, config.alpha_eps)
        D_train = Dataset(D_train.inputs, targets, noise)
        Dn, (Xt,), scaler = normalize(D_train, [Dataset(D_test.inputs, np.zeros((len(D_test), 1)))],
                                      scale_targets=False)
        _, predictor = fit(config, Dn, train_seed)
        latent, _ = predictor(Xt.inputs)
        probs = predictive_class_probs(latent, config.class_samples, make_rng(train_seed, 5))
        ece, mce, records = ece_mce(probs, y_te, config.bins)
        values = {"accuracy": accuracy(probs, y_te), "test_ll": test_ll(probs, y_te), "ece": ece,
                  "mce": mce, "brier": brier(probs, y_te)}
        out["calibration"] = records
    else:
        Dn, (Dt,), scaler = normalize(D_train, [D_test])
        _, predictor = fit(config, Dn, train_seed)
        _, marginal = predictor(Dt.inputs)
        marginal = scaler.inverse_posterior(marginal)
        values = {"test_ll": test_ll(marginal, D_test.targets), "rmse": rmse(marginal.mean, D_test.targets)}
        if config.dataset == "builtin:toy":
            latent, _ = predictor(scaler.transform(Dataset(np.array([[2.0], [6.0]]), np.zeros(2))).inputs)
            std = np.sqrt(latent.variance[:, 0]) * scaler.y_std[0]
            values.update(std_at_2=float(std[0]), std_at_6=float(std[1]))
    wanted = config.metrics or tuple(values)
    out["metrics"] = {k: values[k] for k in sorted(values) if k in wanted or k.startswith("std_at")}
    return out


def aggregate(folds):
    """Mean and (population) standard deviation per metric over successful folds."""
    ok = [f for f in folds if f["status"] == "ok"]
    names = sorted({k for f in ok for k in f["metrics"]})
    agg = {}
    for name in names:
        vals = np.array([f["metrics"][name] for f in ok if name in f["metrics"]], dtype=float)
        agg[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": int(vals.size)}
    return agg


def run_experiment(config, write=True):
    """Run every seed x fold, aggregate, and (optionally) write the JSON report.

    Wall-clock time goes to ``<output>.timing.json`` so the report itself is
    reproducible byte for byte.
    """
    config.validate()
    start = time.perf_counter()
    folds = []
    for seed in sorted(config.seeds):
        D, D_test, labels = _load(config, seed)
        for fold, (train_idx, test_idx) in enumerate(_splits(config, D, D_test, seed)):
            record = {"seed": int(seed), "fold": fold}
            try:
                record.update(_evaluate_fold(config, D, D_test, labels, train_idx, test_idx, seed, fold))
                record["status"] = "ok"
            except (GDKLError, np.linalg.LinAlgError, FloatingPointError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                log.warning("seed %d fold %d failed: %s", seed, fold, exc)
                record.update(status="failed", error=f"{type(exc).__name__}: {exc}",
                              numerical=isinstance(exc, (NumericalFailure, ArithmeticError, np.linalg.LinAlgError)))
            folds.append(record)
    folds.sort(key=lambda r: (r["seed"], r["fold"]))
    report = {
        "schema_version": SCHEMA_VERSION,
        "config": config.to_dict(),
        "folds": folds,
        "aggregate": aggregate(folds),
        "failed_folds": sum(f["status"] != "ok" for f in folds),
    }
    elapsed = time.perf_counter() - start
    if write:
        with open(config.output, "w") as fh:
            fh.write(dumps_report(report))
        with open(config.output + ".timing.json", "w") as fh:
            json.dump({"wall_clock_seconds": elapsed}, fh)
    return report


def dumps_report(report):
    return json.dumps(report, indent=1, sort_keys=True, allow_nan=True) + "\n"


# cached runs -----------------------------------------------------------------------


def source_fingerprint():
    """Hash of every module in the package; any code edit changes it."""
    import hashlib
    from pathlib import Path

    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def cache_key(config):
    import hashlib

    doc = config.to_dict()
    doc.pop("output")
    if not str(config.dataset).startswith("builtin:"):
        # identify the data by content so that path spellings share one entry
        with open(doc.pop("dataset"), "rb") as fh:
            doc["dataset_sha256"] = hashlib.sha256(fh.read()).hexdigest()
    payload = json.dumps({"config": doc, "source": source_fingerprint()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def cached_report(config, cache_dir):
    """Load the report of an identical config run by the identical code, else run it and store it."""
    import os

    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"{config.method.replace(':', '_')}-{cache_key(config)}.json")
    if os.path.exists(path):
        with open(path) as fh:
            return json.load(fh)
    config = dataclasses.replace(config, output=path)
    return run_experiment(config, write=True)
