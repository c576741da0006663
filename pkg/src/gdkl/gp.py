"""Exact Gaussian-process inference with a zero prior mean.

Numpy entry points (``posterior_predictive``, ``log_marginal_likelihood``)
serve evaluation and tests; the ``*_node`` variants build the same
quantities on the autodiff tape for training.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

from gdkl import autodiff as ad
from gdkl.errors import DimensionMismatch, NonFinite, NonPositiveVariance
from gdkl.linalg import cholesky_with_jitter

LOG_2PI = np.log(2.0 * np.pi)


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    # log(expm1(y)) written to stay accurate for large and tiny y
    return y + np.log(-np.expm1(-y))


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    noise_var: Optional[np.ndarray] = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        self.inputs = inputs[:, None] if inputs.ndim == 1 else inputs
        targets = np.asarray(self.targets, dtype=float)
        self.targets = targets[:, None] if targets.ndim == 1 else targets
        n = self.inputs.shape[0]
        if self.targets.shape[0] != n:
            raise DimensionMismatch(f"{n} input rows but {self.targets.shape[0]} target rows")
        if not (np.all(np.isfinite(self.inputs)) and np.all(np.isfinite(self.targets))):
            raise NonFinite("dataset contains non-finite entries")
        if self.noise_var is not None:
            nv = np.asarray(self.noise_var, dtype=float)
            nv = nv[:, None] if nv.ndim == 1 else nv
            if nv.shape != self.targets.shape:
                raise DimensionMismatch(f"noise_var shape {nv.shape} != targets shape {self.targets.shape}")
            if not np.all(np.isfinite(nv)) or np.any(nv <= 0):
                raise NonPositiveVariance("noise_var entries must be finite and strictly positive")
            self.noise_var = nv

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def num_outputs(self):
        return self.targets.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        nv = None if self.noise_var is None else self.noise_var[idx]
        return Dataset(self.inputs[idx], self.targets[idx], nv)


@dataclass
class GPHyperparams:
    """Positive hyperparameters stored as unconstrained softplus arguments."""

    raw_noise_var: float
    raw_outputscale: float
    raw_lengthscale: Optional[float] = None

    @classmethod
    def from_constrained(cls, noise_var, outputscale, lengthscale=None):
        for name, v in (("noise_var", noise_var), ("outputscale", outputscale), ("lengthscale", lengthscale)):
            if v is not None and not v > 0:
                raise NonPositiveVariance(f"{name} must be positive, got {v}")
        return cls(
            float(inv_softplus(noise_var)),
            float(inv_softplus(outputscale)),
            None if lengthscale is None else float(inv_softplus(lengthscale)),
        )

    @property
    def noise_var(self):
        return float(softplus(self.raw_noise_var))

    @property
    def outputscale(self):
        return float(softplus(self.raw_outputscale))

    @property
    def lengthscale(self):
        return None if self.raw_lengthscale is None else float(softplus(self.raw_lengthscale))


@dataclass
class GaussianPosterior:
    mean: np.ndarray
    variance: np.ndarray


def _noise_diagonals(train, noise_var):
    """Per-output diagonal added to K: one column per output."""
    n, c = train.targets.shape
    if train.noise_var is not None:
        return train.noise_var
    return np.full((n, c), float(noise_var))


def posterior_predictive(train, K, k_star, k_starstar, noise_var=None):
    """Marginal posterior of the latent function at the test points.

    ``K`` is the n x n train kernel, ``k_star`` the n x n* cross kernel and
    ``k_starstar`` the n* prior variances. The diagonal added to ``K`` is
    ``noise_var`` unless the dataset carries per-point variances.
    """
    K = np.asarray(K, dtype=float)
    k_star = np.asarray(k_star, dtype=float)
    kss = np.asarray(k_starstar, dtype=float).reshape(-1)
    n, c = train.targets.shape
    n_star = kss.shape[0]
    if n == 0:
        return GaussianPosterior(np.zeros((n_star, c)), np.tile(kss[:, None], (1, c)))
    if K.shape != (n, n) or k_star.shape != (n, n_star):
        raise DimensionMismatch(f"kernel shapes {K.shape}, {k_star.shape} do not match n={n}, n*={n_star}")
    if train.noise_var is None and (noise_var is None or not noise_var > 0):
        raise NonPositiveVariance("noise_var must be positive when the dataset has no per-point noise")
    diag = _noise_diagonals(train, noise_var)
    mean = np.empty((n_star, c))
    var = np.empty((n_star, c))
    if train.noise_var is None:
        factor = cholesky_with_jitter(K + np.diag(diag[:, 0]))
        X = factor.solve(np.hstack([train.targets, k_star]))
        mean[:] = k_star.T @ X[:, :c]
        var[:] = (kss - np.sum(k_star * X[:, c:], axis=0))[:, None]
        return GaussianPosterior(mean, var)
    for col in range(c):
        factor = cholesky_with_jitter(K + np.diag(diag[:, col]))
        X = factor.solve(np.column_stack([train.targets[:, col], k_star]))
        mean[:, col] = k_star.T @ X[:, 0]
        var[:, col] = kss - np.sum(k_star * X[:, 1:], axis=0)
    return GaussianPosterior(mean, var)


def log_marginal_likelihood(train, K, noise_var=None):
    """Sum over output columns of ``log N(y_col | 0, K + noise)``."""
    K = np.asarray(K, dtype=float)
    n, c = train.targets.shape
    if n == 0:
        return 0.0
    if K.shape != (n, n):
        raise DimensionMismatch(f"kernel shape {K.shape} does not match n={n}")
    diag = _noise_diagonals(train, 0.0 if noise_var is None else noise_var)
    total = 0.0
    for col in range(c):
        factor = cholesky_with_jitter(K + np.diag(diag[:, col]))
        y = train.targets[:, col]
        alpha = factor.solve(y)
        total += -0.5 * y @ alpha - 0.5 * factor.logdet() - 0.5 * n * LOG_2PI
    return float(total)


# tape versions ----------------------------------------------------------------


def _is_scalar(x):
    return np.ndim(x.value if isinstance(x, ad.Node) else x) == 0


def add_noise_node(K, noise):
    """``K + diag(noise)`` where ``noise`` is a scalar node or a length-n vector."""
    n = K.value.shape[0]
    noise = ad.as_node(noise)
    if noise.value.ndim == 0:
        return K + noise * np.eye(n)
    return K + ad.diag_embed(noise)


def posterior_marginals_node(K11, K21, kss, Y1, noise):
    """Posterior marginals on the tape, shape (n2, c) for mean and variance.

    ``noise`` is a scalar (node or float) shared by all outputs, in which case
    a single factorization serves every column, or an (n1, c) array of
    per-point variances, which needs one factorization per column.
    """
    K11, K21 = ad.as_node(K11), ad.as_node(K21)
    Y1 = ad.as_node(Y1)
    c = Y1.value.shape[1]
    if _is_scalar(noise):
        A = add_noise_node(K11, noise)
        X = ad.solve_psd(A, ad.concat([Y1, K21.T], axis=1))
        mean = K21 @ X[:, :c]
        var = kss - ad.reduce_sum(K21.T * X[:, c:], axis=0)
        return mean, ad.reshape(var, (-1, 1)) * np.ones((1, c))
    means, variances = [], []
    for col in range(c):
        nv = noise[:, col]
        A = add_noise_node(K11, nv)
        X = ad.solve_psd(A, ad.concat([Y1[:, col : col + 1], K21.T], axis=1))
        means.append(K21 @ X[:, :1])
        variances.append(ad.reshape(kss - ad.reduce_sum(K21.T * X[:, 1:], axis=0), (-1, 1)))
    return ad.concat(means, axis=1), ad.concat(variances, axis=1)


def log_marginal_likelihood_node(K, Y, noise):
    """Tape version of ``log_marginal_likelihood``.

    ``noise`` is a scalar node (shared across outputs) or an n x c array of
    per-point variances.
    """
    K = ad.as_node(K)
    Y = ad.as_node(Y)
    if _is_scalar(noise):
        return ad.gaussian_logpdf(add_noise_node(K, noise), Y)
    total = 0.0
    for col in range(Y.value.shape[1]):
        total = total + ad.gaussian_logpdf(add_noise_node(K, noise[:, col]), Y[:, col : col + 1])
    return total
