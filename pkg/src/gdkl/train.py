"""Guided deep kernel learning with exact GP inference.

A deep-kernel GP ``q`` (network features + RBF head) is trained on random
splits of the training set: for the held-out half, ``q``'s posterior given
the other half is pulled toward the label likelihood and, with weight
``beta``, toward the posterior of a frozen NNGP ``p`` given the same half.
"""
from dataclasses import dataclass, field, asdict
import hashlib
import json
import logging

import numpy as np

from gdkl import autodiff as ad
from gdkl.errors import NumericalFailure, TooFewPoints
from gdkl.gp import (
    LOG_2PI,
    Dataset,
    GaussianPosterior,
    inv_softplus,
    log_marginal_likelihood_node,
    posterior_marginals_node,
    posterior_predictive,
    softplus,
)
from gdkl.kernels import NNGPParams, RBFParams, nngp_kernel, rbf_kernel, rbf_kernel_node
from gdkl.nn import Adam, FeatureNetwork, SGDMomentum, features_node, forward, init_network, optimizer_step
from gdkl.objectives import expected_nll_node, gaussian_nll_node, kl_gaussians_node

log = logging.getLogger(__name__)

HYPER_NAMES = ("raw_lengthscale", "raw_outputscale", "raw_noise")


def make_rng(seed, *stream):
    """Counter-based generator for an independent stream keyed by ``stream``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass
class TrainConfig:
    beta: float = 1.0
    total_steps: int = 7000
    pretrain_steps: int = 1000
    split_fraction: float = 0.5
    seed: int = 0
    optimizer: str = "adam"
    lr: float = 1e-2
    milestones: tuple = (0.6, 0.8)
    weight_decay: float = 0.0
    pretrain_lr: float = 1e-2
    noise_var_init: float = 0.02
    lengthscale_init: float = 1.0
    outputscale_init: float = 1.0
    hidden: tuple = (100, 100, 100, 20)
    nngp_weight_var: float = 1.6
    nngp_bias_var: float = 0.2
    nngp_depth: int = None
    # "separate": p keeps its pre-trained noise; "shared": p uses q's learned noise
    noise_wiring: str = "separate"
    objective: str = "gdkl"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError("split_fraction must lie in (0, 1)")
        if self.noise_wiring not in ("separate", "shared"):
            raise ValueError(f"unknown noise_wiring {self.noise_wiring!r}")
        if self.objective not in ("gdkl", "dist", "pred"):
            raise ValueError(f"unknown objective {self.objective!r}")
        for name in ("noise_var_init", "lengthscale_init", "outputscale_init", "lr", "pretrain_lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        self.hidden = tuple(self.hidden)
        self.milestones = tuple(self.milestones)

    @property
    def nngp_params(self):
        depth = self.nngp_depth if self.nngp_depth is not None else max(len(self.hidden) - 1, 1)
        return NNGPParams(depth=depth, weight_var=self.nngp_weight_var, bias_var=self.nngp_bias_var)

    def make_optimizer(self, weight_decay=None, decay_mask=None):
        wd = self.weight_decay if weight_decay is None else weight_decay
        if self.optimizer == "adam":
            return Adam(lr=self.lr, weight_decay=wd, milestones=self.milestones, decay_mask=decay_mask)
        if self.optimizer == "sgd":
            return SGDMomentum(lr=self.lr, weight_decay=wd, milestones=self.milestones, decay_mask=decay_mask)
        raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class DeepKernelGP:
    """Deep-kernel GP conditioned on ``train``; also the trained DKL baseline."""

    network: FeatureNetwork
    raw_lengthscale: float
    raw_outputscale: float
    raw_noise: float
    train: Dataset
    history: list = field(default_factory=list)

    @property
    def head(self):
        return RBFParams(float(softplus(self.raw_lengthscale)), float(softplus(self.raw_outputscale)))

    @property
    def noise_var(self):
        return float(softplus(self.raw_noise))

    @property
    def classification(self):
        return self.train.noise_var is not None

    def hyper_vector(self):
        return np.array([self.raw_lengthscale, self.raw_outputscale, self.raw_noise])

    def pack(self):
        return np.concatenate([self.network.params, self.hyper_vector()])

    def unpack(self, vector):
        n = self.network.params.size
        self.network.params[:] = vector[:n]
        self.raw_lengthscale, self.raw_outputscale, self.raw_noise = (float(v) for v in vector[n : n + 3])

    def decay_mask(self):
        mask = np.zeros(self.network.params.size + 3)
        mask[: self.network.params.size] = 1.0
        return mask


@dataclass
class GDKLModel(DeepKernelGP):
    """Deep-kernel GP plus the frozen NNGP guide over the full training set."""

    nngp_kernel: np.ndarray = None  # unit-outputscale NNGP kernel, n x n
    nngp_outputscale: float = 1.0
    nngp_noise: float = 0.02
    noise_wiring: str = "separate"


def init_model(config, train, nngp_K=None):
    rng = make_rng(config.seed, 0)
    net = init_network((train.inputs.shape[1],) + tuple(config.hidden), rng)
    kwargs = dict(
        network=net,
        raw_lengthscale=float(inv_softplus(config.lengthscale_init)),
        raw_outputscale=float(inv_softplus(config.outputscale_init)),
        raw_noise=float(inv_softplus(config.noise_var_init)),
        train=train,
    )
    if nngp_K is None:
        return DeepKernelGP(**kwargs)
    return GDKLModel(nngp_kernel=nngp_K, noise_wiring=config.noise_wiring, **kwargs)


def split_dataset(D, fraction, rng):
    """Random disjoint split. Returns ``(D1, D2, idx1, idx2)``."""
    n = len(D)
    if n < 2:
        raise TooFewPoints("need at least two points to split")
    n1 = min(max(int(round(fraction * n)), 1), n - 1)
    perm = rng.permutation(n)
    idx1, idx2 = np.sort(perm[:n1]), np.sort(perm[n1:])
    return D.subset(idx1), D.subset(idx2), idx1, idx2


def _leaves(model):
    theta = ad.Node(model.network.params, requires_grad=True)
    hypers = [ad.Node(getattr(model, name), requires_grad=True) for name in HYPER_NAMES]
    return theta, hypers


def _grad_dict(theta_grad, hyper_grads):
    out = {"network": theta_grad}
    out.update({name: float(g) for name, g in zip(HYPER_NAMES, hyper_grads)})
    return out


def _split_terms(model, idx1, idx2, theta, hypers):
    """Posteriors of q and p on ``idx2`` given ``idx1``, plus likelihood noise."""
    D = model.train
    raw_ls, raw_os, raw_nv = hypers
    ls, os_, nv = ad.softplus(raw_ls), ad.softplus(raw_os), ad.softplus(raw_nv)
    n1 = idx1.size
    idx = np.concatenate([idx1, idx2])
    phi = features_node(model.network, theta, D.inputs[idx])
    phi1, phi2 = phi[:n1], phi[n1:]
    K11 = rbf_kernel_node(phi1, phi1, ls, os_)
    K21 = rbf_kernel_node(phi2, phi1, ls, os_)
    Y1, Y2 = D.targets[idx1], D.targets[idx2]
    if model.classification:
        noise_q, noise_ell = D.noise_var[idx1], D.noise_var[idx2]
    else:
        noise_q, noise_ell = nv, nv
    mq, vq = posterior_marginals_node(K11, K21, os_, Y1, noise_q)

    mp = vp = None
    if model.nngp_kernel is not None:
        Kn = model.nngp_outputscale * model.nngp_kernel
        Kp11, Kp21 = Kn[np.ix_(idx1, idx1)], Kn[np.ix_(idx2, idx1)]
        kss_p = np.diag(Kn)[idx2]
        if model.classification:
            post = posterior_predictive(D.subset(idx1), Kp11, Kp21.T, kss_p)
            mp, vp = ad.Node(post.mean), ad.Node(post.variance)
        elif model.noise_wiring == "shared":
            mp, vp = posterior_marginals_node(Kp11, Kp21, kss_p, Y1, nv)
        else:
            post = posterior_predictive(D.subset(idx1), Kp11, Kp21.T, kss_p, model.nngp_noise)
            mp, vp = ad.Node(post.mean), ad.Node(post.variance)
    return mq, vq, mp, vp, Y2, noise_ell


def _objective(model, idx1, idx2, beta, kind):
    theta, hypers = _leaves(model)
    mq, vq, mp, vp, Y2, noise_ell = _split_terms(model, idx1, idx2, theta, hypers)
    n2, c = Y2.shape
    if kind == "pred":
        per_point = ad.reduce_sum(gaussian_nll_node(mq, vq + noise_ell, Y2), axis=1)
        loss = ad.mean(per_point)
    else:
        kl = ad.reduce_sum(kl_gaussians_node(mq, vq, mp, vp), axis=1) * (1.0 / c)
        if kind == "dist":
            loss = ad.mean(kl)
        else:
            ell = ad.reduce_sum(expected_nll_node(mq, vq, Y2, noise_ell), axis=1)
            loss = ad.mean(ell + beta * kl)
    grads = ad.backward(loss, [theta] + hypers)
    return float(loss.value), _grad_dict(grads[0], grads[1:])


def gdkl_loss(model, idx1, idx2, beta=1.0):
    """Mean over ``idx2`` of expected NLL plus ``beta`` times KL[q || p].

    Multi-output KL terms are averaged over outputs; the expected NLL is
    summed. Returns ``(loss, grads)`` with gradients for the network and the
    three raw head/noise hyperparameters.
    """
    return _objective(model, idx1, idx2, beta, "gdkl")


def dist_loss(model, idx1, idx2):
    """Mean KL[q || p] over ``idx2`` (pure distillation toward the NNGP)."""
    return _objective(model, idx1, idx2, 0.0, "dist")


def pred_loss(model, idx1, idx2):
    """Mean predictive NLL ``-log N(y | mu_q, var_q + noise)`` over ``idx2``."""
    return _objective(model, idx1, idx2, 0.0, "pred")


LOSSES = {"gdkl": gdkl_loss, "dist": lambda m, i1, i2, beta: dist_loss(m, i1, i2),
          "pred": lambda m, i1, i2, beta: pred_loss(m, i1, i2)}


# NNGP pre-training ----------------------------------------------------------------


def nngp_lml_and_grads(K_raw, Y, raw_outputscale, raw_noise, noise_var=None):
    """Mean log marginal likelihood of ``s * K_raw + noise`` and its raw gradients."""
    raw_os = ad.Node(raw_outputscale, requires_grad=True)
    raw_nv = ad.Node(raw_noise, requires_grad=True)
    K = ad.softplus(raw_os) * K_raw
    noise = ad.softplus(raw_nv) if noise_var is None else noise_var
    lml = log_marginal_likelihood_node(K, Y, noise) * (1.0 / Y.shape[0])
    g_os, g_nv = ad.backward(lml, [raw_os, raw_nv])
    return float(lml.value), float(g_os), float(g_nv)


class SpectralLML:
    """Marginal likelihood of ``s * K_raw + noise * I`` in the eigenbasis of ``K_raw``.

    After one eigendecomposition each evaluation costs O(n c).
    """

    def __init__(self, K_raw, Y):
        eigvals, U = np.linalg.eigh(K_raw)
        self.eigvals = np.maximum(eigvals, 0.0)
        self.proj_sq = (U.T @ Y) ** 2  # n x c
        self.n, self.c = Y.shape

    def __call__(self, raw_outputscale, raw_noise):
        s, nv = softplus(raw_outputscale), softplus(raw_noise)
        a = s * self.eigvals + nv
        lml = (-0.5 * np.sum(self.proj_sq / a[:, None]) - 0.5 * self.c * np.sum(np.log(a))
               - 0.5 * self.n * self.c * LOG_2PI) / self.n
        dl_da = (0.5 * self.proj_sq.sum(1) / a**2 - 0.5 * self.c / a) / self.n
        sig = lambda x: 1.0 / (1.0 + np.exp(-x))  # noqa: E731
        return lml, float(dl_da @ self.eigvals) * sig(raw_outputscale), float(dl_da.sum()) * sig(raw_noise)


def pretrain_nngp(K_raw, y, steps, outputscale_init=1.0, noise_init=0.02, lr=1e-2, noise_var=None,
                  history=None):
    """Fit the NNGP output scale and noise by maximizing the marginal likelihood.

    Adam at a constant rate on softplus-parameterized scalars. When
    ``noise_var`` (per-point variances) is given only the output scale is
    trained and the returned noise is ``None``.
    """
    Y = np.asarray(y, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    raw = np.array([inv_softplus(outputscale_init), inv_softplus(noise_init)], dtype=float)
    if steps <= 0:
        return float(outputscale_init), (None if noise_var is not None else float(noise_init))
    if noise_var is None:
        objective = SpectralLML(K_raw, Y)
    else:
        objective = lambda a, b: nngp_lml_and_grads(K_raw, Y, a, b, noise_var)  # noqa: E731
    opt = Adam(lr=lr, milestones=())
    for step in range(steps):
        lml, g_os, g_nv = objective(raw[0], raw[1])
        if not np.isfinite(lml):
            raise NumericalFailure(f"NNGP marginal likelihood became non-finite at step {step}")
        if history is not None:
            history.append(lml)
        grad = -np.array([g_os, 0.0 if noise_var is not None else g_nv])
        raw, opt = optimizer_step(opt, raw, grad, step, steps)
    outputscale = float(softplus(raw[0]))
    return outputscale, (None if noise_var is not None else float(softplus(raw[1])))


# training ---------------------------------------------------------------------------


def _run_optimizer(model, config, total_steps, loss_fn, weight_decay=0.0):
    opt = config.make_optimizer(weight_decay=weight_decay, decay_mask=model.decay_mask())
    n_net = model.network.params.size
    for step in range(total_steps):
        loss, grads = loss_fn(step)
        if not np.isfinite(loss) or not np.all(np.isfinite(grads["network"])):
            raise NumericalFailure(f"non-finite loss {loss} at step {step}")
        gvec = np.concatenate([grads["network"], [grads[name] for name in HYPER_NAMES]])
        if model.classification:
            gvec[n_net + 2] = 0.0
        new, opt = optimizer_step(opt, model.pack(), gvec, step, total_steps)
        model.unpack(new)
        model.history.append(loss)
    return model


def train_gdkl(config, D, nngp_K=None):
    """Guided deep kernel learning on dataset ``D``.

    The NNGP kernel over ``D`` is computed once (unless given), its output
    scale and noise are pre-trained, and the deep kernel is then trained for
    ``config.total_steps`` steps on a fresh random split each step.
    """
    if nngp_K is None:
        nngp_K = nngp_kernel(D.inputs, D.inputs, config.nngp_params)
    model = init_model(config, D, nngp_K)
    os_, nv = pretrain_nngp(
        nngp_K, D.targets, config.pretrain_steps, noise_init=config.noise_var_init,
        lr=config.pretrain_lr, noise_var=D.noise_var,
    )
    model.nngp_outputscale = os_
    model.nngp_noise = nv if nv is not None else float("nan")
    log.info("NNGP pre-trained: outputscale=%.4g noise=%s", os_, nv)
    split_rng = make_rng(config.seed, 1)
    loss_impl = LOSSES[config.objective]

    def step_loss(step):
        _, _, idx1, idx2 = split_dataset(D, config.split_fraction, split_rng)
        return loss_impl(model, idx1, idx2, config.beta)

    return _run_optimizer(model, config, config.total_steps, step_loss, config.weight_decay)


def dkl_lml_loss(model):
    """Negative mean log marginal likelihood of the deep-kernel GP on its data."""
    theta, hypers = _leaves(model)
    ls, os_, nv = (ad.softplus(h) for h in hypers)
    phi = features_node(model.network, theta, model.train.inputs)
    K = rbf_kernel_node(phi, phi, ls, os_)
    noise = model.train.noise_var if model.classification else nv
    loss = -log_marginal_likelihood_node(K, model.train.targets, noise) * (1.0 / len(model.train))
    grads = ad.backward(loss, [theta] + hypers)
    return float(loss.value), _grad_dict(grads[0], grads[1:])


def train_dkl(config, D):
    """Standard deep kernel learning: maximize the marginal likelihood of ``D``."""
    model = init_model(config, D)
    return _run_optimizer(model, config, config.total_steps, lambda step: dkl_lml_loss(model),
                          config.weight_decay)


def predict(model, X_test):
    """Exact posterior under the deep kernel, conditioned on all training data.

    Returns ``(latent, marginal)``; ``marginal`` adds the learned observation
    noise (classification models have no test-time noise, so both coincide).
    """
    D = model.train
    X_test = np.atleast_2d(np.asarray(X_test, dtype=float))
    phi_train = forward(model.network, D.inputs)
    phi_test = forward(model.network, X_test)
    head = model.head
    K = rbf_kernel(phi_train, phi_train, head)
    k_star = rbf_kernel(phi_train, phi_test, head)
    kss = np.full(X_test.shape[0], head.outputscale)
    latent = posterior_predictive(D, K, k_star, kss, None if model.classification else model.noise_var)
    if model.classification:
        return latent, latent
    return latent, GaussianPosterior(latent.mean, latent.variance + model.noise_var)


# checkpoints -------------------------------------------------------------------------


def dataset_fingerprint(D):
    h = hashlib.sha256()
    for arr in (D.inputs, D.targets) + (() if D.noise_var is None else (D.noise_var,)):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(model, path, config=None):
    doc = {
        "format": "gdkl-checkpoint",
        "version": 1,
        "layer_sizes": list(model.network.layer_sizes),
        "network": model.network.params.tolist(),
        "raw_lengthscale": model.raw_lengthscale,
        "raw_outputscale": model.raw_outputscale,
        "raw_noise": model.raw_noise,
        "dataset_sha256": dataset_fingerprint(model.train),
    }
    if isinstance(model, GDKLModel):
        doc["nngp_outputscale"] = model.nngp_outputscale
        doc["nngp_noise"] = model.nngp_noise
    if config is not None:
        doc["config"] = asdict(config)
    extra = getattr(model, "checkpoint_extra", None)
    if extra is not None:
        doc.update(extra())
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def load_checkpoint(path, train):
    """Rebuild a deep-kernel GP from ``path``; ``train`` must match the fingerprint."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("dataset_sha256") != dataset_fingerprint(train):
        raise ValueError("checkpoint was trained on a different dataset")
    net = FeatureNetwork(tuple(doc["layer_sizes"]), np.array(doc["network"], dtype=float))
    kwargs = dict(network=net, raw_lengthscale=doc["raw_lengthscale"], raw_outputscale=doc["raw_outputscale"],
                  raw_noise=doc["raw_noise"], train=train)
    if "nngp_outputscale" in doc:
        return GDKLModel(nngp_outputscale=doc["nngp_outputscale"], nngp_noise=doc["nngp_noise"], **kwargs), doc
    return DeepKernelGP(**kwargs), doc
