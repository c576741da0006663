"""Inducing-point variant of guided deep kernel learning.

The deep-kernel posterior is ``q(f) = int p(f | u) q(u) du`` with inducing
locations ``Z`` living in the network's feature space and
``q(u) = N(m_u, S_L S_L^T)`` per output. Training uses minibatches: each
batch is split in two, the NNGP guide is conditioned on one half and the
objective is evaluated on the other, then the roles are swapped.
"""
from dataclasses import dataclass, field
import logging

import numpy as np
from scipy.cluster.vq import kmeans2

from gdkl import autodiff as ad
from gdkl.errors import DegenerateFeatures, NumericalFailure, TooFewPoints
from gdkl.gp import GaussianPosterior, inv_softplus, posterior_marginals_node, posterior_predictive, softplus
from gdkl.kernels import RBFParams, nngp_kernel, rbf_kernel, rbf_kernel_node
from gdkl.linalg import cholesky_with_jitter
from gdkl.nn import FeatureNetwork, features_node, forward, init_network, optimizer_step
from gdkl.objectives import expected_nll_node, kl_gaussians_node
from gdkl.train import HYPER_NAMES, TrainConfig, make_rng, pretrain_nngp

log = logging.getLogger(__name__)


@dataclass
class InducingSet:
    Z: np.ndarray  # m x p
    m_u: np.ndarray  # m x c
    S_raw: np.ndarray  # c x m x m; strict lower part free, diagonal through softplus

    @property
    def num_inducing(self):
        return self.Z.shape[0]

    @property
    def S_L(self):
        """Lower Cholesky factors of the variational covariances, c x m x m."""
        strict = np.tril(self.S_raw, -1)
        d = softplus(np.diagonal(self.S_raw, axis1=1, axis2=2))
        return strict + d[:, :, None] * np.eye(self.num_inducing)[None]

    @classmethod
    def from_moments(cls, Z, m_u, S):
        """Build from explicit means and covariances (c x m x m)."""
        S = np.asarray(S, dtype=float)
        S = S[None] if S.ndim == 2 else S
        raw = np.empty_like(S)
        for c in range(S.shape[0]):
            L = cholesky_with_jitter(0.5 * (S[c] + S[c].T), base_jitter=1e-12).lower
            raw[c] = np.tril(L, -1)
            raw[c][np.diag_indices_from(L)] = inv_softplus(np.maximum(np.diag(L), 1e-300))
        m_u = np.asarray(m_u, dtype=float)
        return cls(np.asarray(Z, dtype=float), m_u[:, None] if m_u.ndim == 1 else m_u, raw)


def init_inducing(features, m, rng, num_outputs=1, iterations=25):
    """k-means++ seeded Lloyd iterations on ``features``; ``m_u = 0``, ``S_L = 0.01 I``."""
    features = np.asarray(features, dtype=float)
    n = features.shape[0]
    if m > n:
        raise TooFewPoints(f"cannot place {m} inducing points on {n} feature rows")
    if m > 1 and np.all(features == features[0]):
        raise DegenerateFeatures("all feature rows are identical")
    seed = int(rng.integers(2**32 - 1))
    Z, _ = kmeans2(features, m, iter=iterations, minit="++", seed=np.random.default_rng(seed))
    raw = np.zeros((num_outputs, m, m))
    raw[:, np.arange(m), np.arange(m)] = inv_softplus(1e-2)
    return InducingSet(Z, np.zeros((m, num_outputs)), raw)


def sparse_posterior(inducing, head, phi_star):
    """Marginals of ``q(f*)`` at feature rows ``phi_star``.

    mean = k^T Kzz^{-1} m_u,
    var  = k** - k^T Kzz^{-1} k + k^T Kzz^{-1} S Kzz^{-1} k.
    """
    Z = inducing.Z
    Kzz = rbf_kernel(Z, Z, head)
    Kzx = rbf_kernel(Z, np.atleast_2d(phi_star), head)
    factor = cholesky_with_jitter(Kzz)
    A = factor.solve(Kzx)
    mean = A.T @ inducing.m_u
    base = head.outputscale - np.sum(Kzx * A, axis=0)
    S_L = inducing.S_L
    var = np.stack([base + np.sum((S_L[c].T @ A) ** 2, axis=0) for c in range(S_L.shape[0])], axis=1)
    return GaussianPosterior(mean, var)


def _lower_from_raw(raw):
    m = raw.value.shape[0]
    strict = raw * np.tril(np.ones((m, m)), -1)
    return strict + ad.diag_embed(ad.softplus(ad.diag(raw)))


def sparse_posterior_node(Z, m_u, S_raw, lengthscale, outputscale, phi):
    """Tape version of ``sparse_posterior``; returns (n* x c) mean and var."""
    Kzz = rbf_kernel_node(Z, Z, lengthscale, outputscale)
    Kzx = rbf_kernel_node(Z, phi, lengthscale, outputscale)
    A = ad.solve_psd(Kzz, Kzx)
    mean = A.T @ m_u
    base = outputscale - ad.reduce_sum(Kzx * A, axis=0)
    cols = []
    for c in range(m_u.value.shape[1]):
        L = _lower_from_raw(S_raw[c])
        cols.append(ad.reshape(base + ad.reduce_sum(ad.square(L.T @ A), axis=0), (-1, 1)))
    return mean, ad.concat(cols, axis=1)


@dataclass
class SparseGDKLModel:
    network: FeatureNetwork
    raw_lengthscale: float
    raw_outputscale: float
    raw_noise: float
    inducing: InducingSet
    train: object
    nngp_kernel: np.ndarray = None
    nngp_outputscale: float = 1.0
    nngp_noise: float = 0.02
    noise_wiring: str = "separate"
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

    def _blocks(self):
        return [self.network.params, np.array([self.raw_lengthscale, self.raw_outputscale, self.raw_noise]),
                self.inducing.Z, self.inducing.m_u, self.inducing.S_raw]

    def pack(self):
        return np.concatenate([b.ravel() for b in self._blocks()])

    def unpack(self, vector):
        offset = 0
        blocks = self._blocks()
        out = []
        for b in blocks:
            out.append(vector[offset : offset + b.size].reshape(b.shape))
            offset += b.size
        self.network.params[:] = out[0]
        self.raw_lengthscale, self.raw_outputscale, self.raw_noise = (float(v) for v in out[1])
        self.inducing = InducingSet(out[2].copy(), out[3].copy(), out[4].copy())

    def decay_mask(self):
        mask = np.zeros(sum(b.size for b in self._blocks()))
        mask[: self.network.params.size] = 1.0
        return mask

    def checkpoint_extra(self):
        return {"Z": self.inducing.Z.tolist(), "m_u": self.inducing.m_u.tolist(),
                "S_L": self.inducing.S_L.tolist(), "S_raw": self.inducing.S_raw.tolist()}


def _sparse_leaves(model):
    theta = ad.Node(model.network.params, requires_grad=True)
    hypers = [ad.Node(getattr(model, name), requires_grad=True) for name in HYPER_NAMES]
    Z = ad.Node(model.inducing.Z, requires_grad=True)
    m_u = ad.Node(model.inducing.m_u, requires_grad=True)
    S_raw = ad.Node(model.inducing.S_raw, requires_grad=True)
    return theta, hypers, Z, m_u, S_raw


def _grads_to_dict(grads):
    out = {"network": grads[0]}
    out.update({name: float(g) for name, g in zip(HYPER_NAMES, grads[1:4])})
    out.update({"Z": grads[4], "m_u": grads[5], "S_raw": grads[6]})
    return out


def _pass_terms(model, cond_idx, eval_idx, mq, vq, nv, beta):
    """Per-point objective on ``eval_idx`` with the NNGP conditioned on ``cond_idx``."""
    D = model.train
    Y = D.targets[eval_idx]
    c = Y.shape[1]
    noise_ell = D.noise_var[eval_idx] if model.classification else nv
    ell = ad.reduce_sum(expected_nll_node(mq, vq, Y, noise_ell), axis=1)
    if beta == 0:
        return ell
    Kn = model.nngp_outputscale * model.nngp_kernel
    K11, K21 = Kn[np.ix_(cond_idx, cond_idx)], Kn[np.ix_(eval_idx, cond_idx)]
    kss = np.diag(Kn)[eval_idx]
    if not model.classification and model.noise_wiring == "shared":
        mp, vp = posterior_marginals_node(K11, K21, kss, D.targets[cond_idx], nv)
    else:
        noise = None if model.classification else model.nngp_noise
        post = posterior_predictive(D.subset(cond_idx), K11, K21.T, kss, noise)
        mp, vp = ad.Node(post.mean), ad.Node(post.variance)
    kl = ad.reduce_sum(kl_gaussians_node(mq, vq, mp, vp), axis=1) * (1.0 / c)
    return ell + beta * kl


def sparse_gdkl_loss(model, batch, beta, rng, split=None):
    """Two-pass minibatch objective.

    ``batch`` holds training indices. It is split in two halves ``B1``/``B2``
    (or ``split`` is used if given); the objective averages the pass that
    evaluates on ``B2`` given ``B1`` with the swapped pass.
    Returns ``(loss, grads)``.
    """
    batch = np.asarray(batch, dtype=int)
    if batch.size < 2:
        raise TooFewPoints("a batch needs at least two points")
    if split is None:
        perm = rng.permutation(batch.size)
        half = batch.size // 2
        b1, b2 = batch[np.sort(perm[:half])], batch[np.sort(perm[half:])]
    else:
        b1, b2 = (np.asarray(s, dtype=int) for s in split)
    leaves = _sparse_leaves(model)
    theta, (raw_ls, raw_os, raw_nv), Z, m_u, S_raw = leaves
    ls, os_, nv = ad.softplus(raw_ls), ad.softplus(raw_os), ad.softplus(raw_nv)
    order = np.concatenate([b1, b2])
    phi = features_node(model.network, theta, model.train.inputs[order])
    mq, vq = sparse_posterior_node(Z, m_u, S_raw, ls, os_, phi)
    n1 = b1.size
    first = _pass_terms(model, b1, b2, mq[n1:], vq[n1:], nv, beta)
    second = _pass_terms(model, b2, b1, mq[:n1], vq[:n1], nv, beta)
    loss = 0.5 * (ad.mean(first) + ad.mean(second))
    grads = ad.backward(loss, [theta, raw_ls, raw_os, raw_nv, Z, m_u, S_raw])
    return float(loss.value), _grads_to_dict(grads)


def _flat_grad(model, grads):
    parts = [grads["network"], np.array([grads[n] for n in HYPER_NAMES]), grads["Z"], grads["m_u"], grads["S_raw"]]
    g = np.concatenate([np.ravel(p) for p in parts])
    if model.classification:
        g[model.network.params.size + 2] = 0.0
    return g


def init_sparse_model(config, D, num_inducing, nngp_K=None, sample_size=1000):
    rng = make_rng(config.seed, 0)
    net = init_network((D.inputs.shape[1],) + tuple(config.hidden), rng)
    sample = rng.choice(len(D), size=min(sample_size, len(D)), replace=False)
    feats = forward(net, D.inputs[np.sort(sample)])
    inducing = init_inducing(feats, num_inducing, make_rng(config.seed, 2), D.num_outputs)
    return SparseGDKLModel(
        network=net,
        raw_lengthscale=float(inv_softplus(config.lengthscale_init)),
        raw_outputscale=float(inv_softplus(config.outputscale_init)),
        raw_noise=float(inv_softplus(config.noise_var_init)),
        inducing=inducing,
        train=D,
        nngp_kernel=nngp_K,
        noise_wiring=config.noise_wiring,
    )


def train_sparse_gdkl(config, D, batch_size=256, num_inducing=50, pretrain_subset=1000):
    """Minibatch training of network, head, noise, ``Z`` and ``q(u)`` jointly.

    The NNGP output scale and noise are pre-trained on a random subset of at
    most ``pretrain_subset`` points.
    """
    nngp_K = nngp_kernel(D.inputs, D.inputs, config.nngp_params)
    model = init_sparse_model(config, D, num_inducing, nngp_K)
    rng = make_rng(config.seed, 1)
    sub = np.sort(rng.choice(len(D), size=min(pretrain_subset, len(D)), replace=False))
    nv_sub = None if D.noise_var is None else D.noise_var[sub]
    os_, nv = pretrain_nngp(nngp_K[np.ix_(sub, sub)], D.targets[sub], config.pretrain_steps,
                            noise_init=config.noise_var_init, lr=config.pretrain_lr, noise_var=nv_sub)
    model.nngp_outputscale = os_
    model.nngp_noise = nv if nv is not None else float("nan")
    opt = config.make_optimizer(decay_mask=model.decay_mask())
    n = len(D)
    for step in range(config.total_steps):
        batch = np.arange(n) if batch_size >= n else np.sort(rng.choice(n, size=batch_size, replace=False))
        loss, grads = sparse_gdkl_loss(model, batch, config.beta, rng)
        if not np.isfinite(loss):
            raise NumericalFailure(f"non-finite sparse loss {loss} at step {step}")
        new, opt = optimizer_step(opt, model.pack(), _flat_grad(model, grads), step, config.total_steps)
        model.unpack(new)
        model.history.append(loss)
    return model


def sparse_predict(model, X_test):
    """Returns ``(latent, marginal)`` like ``gdkl.train.predict``."""
    phi = forward(model.network, np.atleast_2d(np.asarray(X_test, dtype=float)))
    latent = sparse_posterior(model.inducing, model.head, phi)
    if model.classification:
        return latent, latent
    return latent, GaussianPosterior(latent.mean, latent.variance + model.noise_var)


# standard variational bound, used to check q(u) against the exact posterior ----------


def svgp_negative_elbo(model, idx=None):
    """Negative ELBO ``-(sum_i E_q[log p(y_i|f_i)] - KL[q(u) || p(u)])`` and gradients.

    This is the usual Hensman bound, not the guided objective; with ``Z`` at
    the training features its optimum is the exact GP posterior.
    """
    D = model.train
    idx = np.arange(len(D)) if idx is None else np.asarray(idx)
    theta, (raw_ls, raw_os, raw_nv), Z, m_u, S_raw = _sparse_leaves(model)
    ls, os_, nv = ad.softplus(raw_ls), ad.softplus(raw_os), ad.softplus(raw_nv)
    phi = features_node(model.network, theta, D.inputs[idx])
    mq, vq = sparse_posterior_node(Z, m_u, S_raw, ls, os_, phi)
    noise = D.noise_var[idx] if model.classification else nv
    ell = ad.reduce_sum(expected_nll_node(mq, vq, D.targets[idx], noise))
    Kzz = rbf_kernel_node(Z, Z, ls, os_)
    m = model.inducing.num_inducing
    kl = 0.0
    for c in range(model.inducing.m_u.shape[1]):
        L = _lower_from_raw(S_raw[c])
        mu = m_u[:, c : c + 1]
        # KL[N(mu, L L^T) || N(0, Kzz)] = logdet terms via gaussian_logpdf(Kzz, .) identity
        inv_L = ad.solve_psd(Kzz, L)
        trace = ad.reduce_sum(L * inv_L)
        log_pdf0 = ad.gaussian_logpdf(Kzz, mu)  # -0.5 mu^T Kzz^-1 mu - 0.5 logdet Kzz - m/2 log 2pi
        logdet_S = 2.0 * ad.reduce_sum(ad.log(ad.diag(L)))
        kl = kl + 0.5 * trace - log_pdf0 - 0.5 * m * np.log(2 * np.pi) - 0.5 * m - 0.5 * logdet_S
    loss = ell + kl
    grads = ad.backward(loss, [theta, raw_ls, raw_os, raw_nv, Z, m_u, S_raw])
    return float(loss.value), _grads_to_dict(grads)
