"""Kernel functions: RBF, deep kernel and the fully-connected NNGP kernel."""
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from gdkl import autodiff as ad
from gdkl.errors import DimensionMismatch, DomainError


@dataclass(frozen=True)
class RBFParams:
    lengthscale: float = 1.0
    outputscale: float = 1.0

    def __post_init__(self):
        if not (self.lengthscale > 0 and self.outputscale > 0):
            raise DomainError(f"RBF parameters must be positive: {self}")


@dataclass(frozen=True)
class MonteCarloActivation:
    fn: Callable[[np.ndarray], np.ndarray]
    samples: int = 100_000

    def __post_init__(self):
        if self.samples < 1000:
            raise DomainError("Monte-Carlo activation needs at least 1000 samples")


@dataclass(frozen=True)
class NNGPParams:
    depth: int = 3
    weight_var: float = 1.6
    bias_var: float = 0.2
    activation: Union[str, MonteCarloActivation] = "relu"

    def __post_init__(self):
        if self.depth < 1:
            raise DomainError("NNGP depth must be at least 1")
        if not (self.weight_var > 0 and self.bias_var > 0):
            raise DomainError("NNGP weight and bias variances must be positive")
        if isinstance(self.activation, str) and self.activation != "relu":
            raise DomainError(f"unknown analytic activation {self.activation!r}; use MonteCarloActivation")


@dataclass
class RBF:
    params: RBFParams = field(default_factory=RBFParams)


@dataclass
class Deep:
    network: object
    head: RBFParams = field(default_factory=RBFParams)


@dataclass
class NNGP:
    params: NNGPParams = field(default_factory=NNGPParams)
    outputscale: Optional[float] = None


KernelSpec = Union[RBF, Deep, NNGP]


def _check_dims(A, B):
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"feature dimensions differ: {A.shape[1]} vs {B.shape[1]}")
    return A, B


def squared_distances(A, B):
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.maximum(d, 0.0)


def rbf_kernel(A, B, params):
    A, B = _check_dims(A, B)
    d = squared_distances(A, B)
    if A is B or (A.shape == B.shape and np.array_equal(A, B)):
        np.fill_diagonal(d, 0.0)
    return params.outputscale * np.exp(-0.5 * d / params.lengthscale**2)


def rbf_kernel_node(A, B, lengthscale, outputscale):
    """RBF kernel on the tape; ``lengthscale``/``outputscale`` may be nodes."""
    d = ad.sqdist(A, B)
    return outputscale * ad.exp(d * (-0.5 / ad.square(lengthscale)))


def deep_kernel(A, B, network, head):
    from gdkl.nn import forward

    A, B = _check_dims(A, B)
    if A.shape[1] != network.layer_sizes[0]:
        raise DimensionMismatch(f"network expects {network.layer_sizes[0]} inputs, got {A.shape[1]}")
    fa = forward(network, A)
    fb = fa if B is A else forward(network, B)
    return rbf_kernel(fa, fb, head)


# NNGP -------------------------------------------------------------------------


def _check_triple(kxx, kxy, kyy):
    kxx, kxy, kyy = (np.asarray(v, dtype=float) for v in (kxx, kxy, kyy))
    if np.any(kxx <= 0) or np.any(kyy <= 0):
        raise DomainError("diagonal kernel values must be strictly positive")
    norm = np.sqrt(kxx * kyy)
    if np.any(np.abs(kxy) > norm * (1 + 1e-12) + 1e-300):
        raise DomainError("|kxy| exceeds sqrt(kxx * kyy); not a covariance")
    return kxx, kxy, kyy, norm


def relu_expectation(kxx, kxy, kyy):
    """``E[relu(u) relu(v)]`` for ``(u, v) ~ N(0, [[kxx, kxy], [kxy, kyy]])``.

    Arc-cosine closed form; broadcasts over array arguments.
    """
    kxx, kxy, kyy, norm = _check_triple(kxx, kxy, kyy)
    cos = np.clip(kxy / norm, -1.0, 1.0)
    theta = np.arccos(cos)
    out = norm / (2.0 * np.pi) * (np.sin(theta) + (np.pi - theta) * cos)
    return out if out.ndim else float(out)


def mc_expectation(kxx, kxy, kyy, activation, samples=100_000, rng=None):
    """Monte-Carlo ``E[phi(u) phi(v)]`` with antithetic pairs.

    Returns ``(estimate, standard_error)``. Scalars only.
    """
    kxx, kxy, kyy, norm = _check_triple(kxx, kxy, kyy)
    rng = np.random.default_rng() if rng is None else rng
    half = max(samples // 2, 1)
    z = rng.standard_normal((half, 2))
    rho = float(np.clip(kxy / norm, -1.0, 1.0))
    sx, sy = np.sqrt(kxx), np.sqrt(kyy)

    def products(z1, z2):
        u = sx * z1
        v = sy * (rho * z1 + np.sqrt(max(1.0 - rho * rho, 0.0)) * z2)
        return activation(u) * activation(v)

    paired = 0.5 * (products(z[:, 0], z[:, 1]) + products(-z[:, 0], -z[:, 1]))
    se = paired.std(ddof=1) / np.sqrt(half) if half > 1 else np.inf
    return float(paired.mean()), float(se)


def _mc_expectation_grid(kxx, kxy, kyy, activation, rng, chunk=64):
    """Per-entry MC expectations using common random numbers across entries."""
    half = max(activation.samples // 2, 1)
    z = rng.standard_normal((half, 2))
    z = np.concatenate([z, -z])
    norm = np.sqrt(kxx * kyy)
    rho = np.clip(kxy / norm, -1.0, 1.0)
    sx = np.broadcast_to(np.sqrt(kxx), kxy.shape)
    sy = np.broadcast_to(np.sqrt(kyy), kxy.shape)
    flat_rho, flat_sx, flat_sy = rho.ravel(), sx.ravel(), sy.ravel()
    out = np.empty(flat_rho.size)
    for start in range(0, flat_rho.size, chunk):
        sl = slice(start, start + chunk)
        r = flat_rho[sl, None]
        u = flat_sx[sl, None] * z[None, :, 0]
        v = flat_sy[sl, None] * (r * z[None, :, 0] + np.sqrt(np.maximum(1 - r * r, 0.0)) * z[None, :, 1])
        out[sl] = (activation.fn(u) * activation.fn(v)).mean(axis=1)
    return out.reshape(kxy.shape)


def nngp_input_kernel(A, B, params):
    """First-layer covariance ``bias_var + weight_var * x.x' / d``."""
    A, B = _check_dims(A, B)
    d = A.shape[1]
    kxy = params.bias_var + params.weight_var * (A @ B.T) / d
    kxx = params.bias_var + params.weight_var * (A * A).sum(1) / d
    kyy = params.bias_var + params.weight_var * (B * B).sum(1) / d
    return kxx, kxy, kyy


def nngp_kernel(A, B, params, outputscale=None, rng=None):
    """Covariance of the readout of an infinitely wide ReLU (or MC) network.

    ``params.depth`` hidden layers, each followed by the activation, then a
    final affine readout. The per-pair triple (kxx, kxy, kyy) is carried
    through the layers so the diagonal stays exact.
    """
    kxx, kxy, kyy = nngp_input_kernel(A, B, params)
    sb, sw = params.bias_var, params.weight_var
    mc = isinstance(params.activation, MonteCarloActivation)
    if mc and rng is None:
        rng = np.random.default_rng(0)
    for _ in range(params.depth):
        if mc:
            e_xy = _mc_expectation_grid(kxx[:, None], kxy, kyy[None, :], params.activation, rng)
            e_xx = _mc_expectation_grid(kxx, kxx, kxx, params.activation, rng)
            e_yy = _mc_expectation_grid(kyy, kyy, kyy, params.activation, rng)
        else:
            e_xy = relu_expectation(kxx[:, None], kxy, kyy[None, :])
            e_xx, e_yy = 0.5 * kxx, 0.5 * kyy
        kxy = sb + sw * e_xy
        kxx = sb + sw * e_xx
        kyy = sb + sw * e_yy
    if outputscale is not None:
        kxy = outputscale * kxy
    return kxy


def nngp_diag(A, params, outputscale=None):
    """Prior variances ``k(x, x)`` for ReLU networks, via the scalar recursion."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    k = params.bias_var + params.weight_var * (A * A).sum(1) / A.shape[1]
    for _ in range(params.depth):
        k = params.bias_var + params.weight_var * 0.5 * k
    return k if outputscale is None else outputscale * k


def evaluate(spec, A, B):
    """Kernel matrix for any ``KernelSpec`` variant."""
    if isinstance(spec, RBF):
        return rbf_kernel(A, B, spec.params)
    if isinstance(spec, Deep):
        return deep_kernel(A, B, spec.network, spec.head)
    if isinstance(spec, NNGP):
        return nngp_kernel(A, B, spec.params, spec.outputscale)
    raise TypeError(f"not a kernel spec: {spec!r}")
