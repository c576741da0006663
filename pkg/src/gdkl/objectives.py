"""Closed-form Gaussian KL and expected negative log-likelihood terms."""
import numpy as np

from gdkl import autodiff as ad
from gdkl.errors import NonPositiveVariance

LOG_2PI = np.log(2.0 * np.pi)


def _check_positive(*variances):
    for v in variances:
        if np.any(np.asarray(v) <= 0):
            raise NonPositiveVariance("variances must be strictly positive")


def kl_gaussians(mean_q, var_q, mean_p, var_p):
    """``KL[N(mean_q, var_q) || N(mean_p, var_p)]``, elementwise."""
    _check_positive(var_q, var_p)
    mean_q, var_q, mean_p, var_p = (np.asarray(a, dtype=float) for a in (mean_q, var_q, mean_p, var_p))
    out = 0.5 * (np.log(var_p) - np.log(var_q)) + (var_q + (mean_q - mean_p) ** 2) / (2.0 * var_p) - 0.5
    # roundoff can push identical distributions a hair below zero
    out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


def expected_nll_gaussian(mean_q, var_q, y, noise_var):
    """``E_{f ~ N(mean_q, var_q)}[-log N(y | f, noise_var)]``, elementwise."""
    _check_positive(noise_var)
    if np.any(np.asarray(var_q) < 0):
        raise NonPositiveVariance("var_q must be non-negative")
    resid = np.asarray(y, dtype=float) - mean_q
    out = 0.5 * (LOG_2PI + np.log(noise_var) + (resid * resid + var_q) / noise_var)
    return out if np.ndim(out) else float(out)


def gaussian_nll(mean, var, y):
    """``-log N(y | mean, var)``, elementwise."""
    _check_positive(var)
    resid = np.asarray(y, dtype=float) - mean
    out = 0.5 * (LOG_2PI + np.log(var) + resid * resid / var)
    return out if np.ndim(out) else float(out)


# tape versions ----------------------------------------------------------------


def kl_gaussians_node(mean_q, var_q, mean_p, var_p):
    diff = mean_q - mean_p
    return 0.5 * (ad.log(var_p) - ad.log(var_q)) + (var_q + ad.square(diff)) / (2.0 * var_p) - 0.5


def expected_nll_node(mean_q, var_q, y, noise_var):
    resid = y - mean_q
    return 0.5 * (LOG_2PI + ad.log(noise_var) + (ad.square(resid) + var_q) / noise_var)


def gaussian_nll_node(mean, var, y):
    resid = y - mean
    return 0.5 * (LOG_2PI + ad.log(var) + ad.square(resid) / var)
