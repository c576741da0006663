"""Gaussian regression likelihood and Dirichlet-transformed classification."""
import numpy as np
from scipy.special import softmax

from gdkl.errors import DimensionMismatch, InvalidLabel, NonPositiveVariance

LOG_2PI = np.log(2.0 * np.pi)


def dirichlet_transform(labels, num_classes, alpha_eps=0.01):
    """Lognormal regression targets and noise for one-hot class labels.

    Each class gets ``alpha = alpha_eps + 1[label == class]``, noise variance
    ``log(1 / alpha + 1)`` and target ``log(alpha) - noise / 2``.
    Returns ``(targets, noise_var)``, both n x num_classes.
    """
    labels = np.asarray(labels)
    if alpha_eps <= 0:
        raise ValueError("alpha_eps must be positive")
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        if labels.ndim == 1 and np.all(np.mod(labels, 1) == 0):
            labels = labels.astype(int)
        else:
            raise InvalidLabel("labels must be a 1-d array of integer class ids")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise InvalidLabel(f"labels must lie in [0, {num_classes})")
    alpha = np.full((labels.size, num_classes), float(alpha_eps))
    alpha[np.arange(labels.size), labels] += 1.0
    noise_var = np.log(1.0 / alpha + 1.0)
    targets = np.log(alpha) - 0.5 * noise_var
    return targets, noise_var


def predictive_class_probs(latent, samples=1024, rng=None):
    """Average of per-draw softmax over Gaussian latent samples.

    ``latent`` is a ``GaussianPosterior`` with n x c mean and variance.
    """
    if samples < 1:
        raise ValueError("samples must be at least 1")
    rng = np.random.default_rng() if rng is None else rng
    mean = np.asarray(latent.mean, dtype=float)
    var = np.asarray(latent.variance, dtype=float)
    if mean.shape != var.shape:
        raise DimensionMismatch("mean and variance shapes differ")
    eps = rng.standard_normal((samples,) + mean.shape)
    draws = mean + np.sqrt(np.maximum(var, 0.0)) * eps
    probs = softmax(draws, axis=-1).mean(axis=0)
    return probs / probs.sum(axis=1, keepdims=True)


def gaussian_marginal_ll(mean, var_latent, noise_var, y):
    """``log N(y | mean, var_latent + noise_var)``, elementwise."""
    total = np.asarray(var_latent, dtype=float) + noise_var
    if np.any(total <= 0):
        raise NonPositiveVariance("predictive variance must be positive")
    resid = np.asarray(y, dtype=float) - mean
    out = -0.5 * (LOG_2PI + np.log(total) + resid * resid / total)
    return out if np.ndim(out) else float(out)
