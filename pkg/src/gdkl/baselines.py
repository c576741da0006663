"""Kernel-only baselines: an RBF GP on raw inputs and the NNGP itself."""
from dataclasses import dataclass, field

import numpy as np

from gdkl import autodiff as ad
from gdkl.errors import NumericalFailure
from gdkl.gp import Dataset, GaussianPosterior, inv_softplus, log_marginal_likelihood_node, posterior_predictive, softplus
from gdkl.kernels import NNGPParams, RBFParams, nngp_diag, nngp_kernel, rbf_kernel, rbf_kernel_node
from gdkl.nn import Adam, optimizer_step
from gdkl.train import pretrain_nngp


@dataclass
class RBFGP:
    raw: np.ndarray  # raw lengthscale, outputscale, noise
    train: Dataset
    history: list = field(default_factory=list)

    @property
    def head(self):
        return RBFParams(float(softplus(self.raw[0])), float(softplus(self.raw[1])))

    @property
    def noise_var(self):
        return float(softplus(self.raw[2]))

    @property
    def classification(self):
        return self.train.noise_var is not None


def rbf_lml_and_grads(D, raw):
    """Mean log marginal likelihood of an RBF GP and its gradient in the raw scalars."""
    leaves = [ad.Node(float(r), requires_grad=True) for r in raw]
    ls, os_, nv = (ad.softplus(h) for h in leaves)
    X = ad.Node(D.inputs)
    K = rbf_kernel_node(X, X, ls, os_)
    noise = D.noise_var if D.noise_var is not None else nv
    lml = log_marginal_likelihood_node(K, D.targets, noise) * (1.0 / len(D))
    return float(lml.value), np.array([float(g) for g in ad.backward(lml, leaves)])


def train_gp_rbf(D, steps=1000, lr=1e-2, lengthscale_init=1.0, outputscale_init=1.0, noise_init=0.02):
    """Fit lengthscale, output scale and noise by Adam ascent on the marginal likelihood."""
    raw = np.array([inv_softplus(lengthscale_init), inv_softplus(outputscale_init), inv_softplus(noise_init)])
    model = RBFGP(raw, D)
    opt = Adam(lr=lr, milestones=())
    for step in range(steps):
        lml, g = rbf_lml_and_grads(D, model.raw)
        if not np.isfinite(lml):
            raise NumericalFailure(f"RBF marginal likelihood became non-finite at step {step}")
        if model.classification:
            g[2] = 0.0
        model.raw, opt = optimizer_step(opt, model.raw, -g, step, steps)
        model.history.append(lml)
    return model


def predict_gp_rbf(model, X_test):
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    D, head = model.train, model.head
    K = rbf_kernel(D.inputs, D.inputs, head)
    latent = posterior_predictive(D, K, rbf_kernel(D.inputs, X_test, head),
                                  np.full(X_test.shape[0], head.outputscale),
                                  None if model.classification else model.noise_var)
    if model.classification:
        return latent, latent
    return latent, GaussianPosterior(latent.mean, latent.variance + model.noise_var)


@dataclass
class NNGPModel:
    params: NNGPParams
    outputscale: float
    noise: float  # None in classification mode
    train: Dataset
    kernel: np.ndarray = None  # unit-outputscale train kernel

    @property
    def classification(self):
        return self.train.noise_var is not None


def train_nngp(D, params, steps=1000, lr=1e-2, noise_init=0.02, K=None):
    K = nngp_kernel(D.inputs, D.inputs, params) if K is None else K
    os_, nv = pretrain_nngp(K, D.targets, steps, noise_init=noise_init, lr=lr, noise_var=D.noise_var)
    return NNGPModel(params, os_, nv, D, K)


def predict_nngp(model, X_test):
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    D, s = model.train, model.outputscale
    K = model.kernel if model.kernel is not None else nngp_kernel(D.inputs, D.inputs, model.params)
    latent = posterior_predictive(D, s * K, s * nngp_kernel(D.inputs, X_test, model.params),
                                  nngp_diag(X_test, model.params, s), model.noise)
    if model.classification:
        return latent, latent
    return latent, GaussianPosterior(latent.mean, latent.variance + model.noise)
