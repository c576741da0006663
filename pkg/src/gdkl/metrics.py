"""Regression and classification scores.

Brier score convention: mean over points of the squared error between the
probability vector and the one-hot label, summed over classes and divided by
the number of classes.
"""
import numpy as np

from gdkl.errors import DimensionMismatch
from gdkl.gp import GaussianPosterior
from gdkl.likelihoods import gaussian_marginal_ll


def rmse(pred, targets):
    pred, targets = np.asarray(pred, dtype=float), np.asarray(targets, dtype=float)
    if pred.shape != targets.shape:
        raise DimensionMismatch(f"shape {pred.shape} vs {targets.shape}")
    return float(np.sqrt(np.mean((pred - targets) ** 2)))


def accuracy(probs, labels):
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def test_ll(predictive, targets, noise_var=0.0):
    """Mean per-point log predictive density.

    ``predictive`` is either a ``GaussianPosterior`` (regression; the
    variance already includes noise unless ``noise_var`` is given) or an
    n x c probability matrix with integer ``targets``.
    """
    if isinstance(predictive, GaussianPosterior):
        ll = gaussian_marginal_ll(predictive.mean, predictive.variance, noise_var, np.asarray(targets).reshape(predictive.mean.shape))
        return float(np.mean(np.sum(ll, axis=1)))
    probs = np.asarray(predictive, dtype=float)
    labels = np.asarray(targets, dtype=int)
    return float(np.mean(np.log(np.maximum(probs[np.arange(labels.size), labels], 1e-300))))


test_ll.__test__ = False  # not a pytest test despite the name


def ece_mce(probs, labels, bins=15):
    """Expected and maximum calibration error over equal-width confidence bins.

    Returns ``(ece, mce, records)`` with one record per bin holding its
    edges, mean confidence, accuracy and count (``None`` stats when empty).
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(float)
    edges = np.linspace(0.0, 1.0, bins + 1)
    # right-closed bins, first bin also takes confidence 0
    which = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, bins - 1)
    n = conf.size
    ece, mce = 0.0, 0.0
    records = []
    for b in range(bins):
        mask = which == b
        count = int(mask.sum())
        rec = {"lower": float(edges[b]), "upper": float(edges[b + 1]), "count": count,
               "confidence": None, "accuracy": None}
        if count:
            acc, cf = float(correct[mask].mean()), float(conf[mask].mean())
            gap = abs(acc - cf)
            ece += count / n * gap
            mce = max(mce, gap)
            rec.update(confidence=cf, accuracy=acc)
        records.append(rec)
    return float(ece), float(mce), records


def brier(probs, labels):
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    onehot = np.zeros_like(probs)
    onehot[np.arange(labels.size), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1) / probs.shape[1]))
