import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gdkl.errors import TooFewPoints
from gdkl.gp import Dataset, posterior_predictive
from gdkl.kernels import NNGPParams, nngp_kernel, rbf_kernel
from gdkl.nn import forward
from gdkl.objectives import expected_nll_gaussian, gaussian_nll, kl_gaussians
from gdkl.train import (
    GDKLModel,
    SpectralLML,
    TrainConfig,
    dist_loss,
    dkl_lml_loss,
    gdkl_loss,
    init_model,
    load_checkpoint,
    make_rng,
    nngp_lml_and_grads,
    predict,
    pred_loss,
    pretrain_nngp,
    save_checkpoint,
    split_dataset,
    train_dkl,
    train_gdkl,
)
from oracles import central_fd, rel_err

seeds = st.integers(0, 2**32 - 1)
SMALL = TrainConfig(hidden=(6, 5, 3), total_steps=0, pretrain_steps=0)


def small_model(seed=0, n=8, d=2, c=1, wiring="separate", classification=False):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    Y = np.sin(X @ rng.standard_normal((d, c))) + 0.1 * rng.standard_normal((n, c))
    noise = rng.uniform(0.2, 1.0, size=(n, c)) if classification else None
    D = Dataset(X, Y, noise)
    cfg = dataclasses.replace(SMALL, seed=seed, noise_wiring=wiring)
    model = init_model(cfg, D, nngp_kernel(X, X, cfg.nngp_params))
    model.network.params += 0.2 * rng.standard_normal(model.network.params.size)
    model.raw_lengthscale, model.raw_outputscale, model.raw_noise = 0.3, 0.1, -1.0
    model.nngp_outputscale, model.nngp_noise = 0.8, 0.15
    return model


def deep_posterior(model, idx1, idx2, noise=None):
    """Numpy q posterior on idx2 given idx1."""
    D = model.train
    phi = forward(model.network, D.inputs)
    K = rbf_kernel(phi, phi, model.head)
    nv = model.noise_var if noise is None else noise
    return posterior_predictive(D.subset(idx1), K[np.ix_(idx1, idx1)], K[np.ix_(idx1, idx2)],
                                np.diag(K)[idx2], None if model.classification else nv)


def nngp_posterior(model, idx1, idx2, noise=None):
    D = model.train
    K = model.nngp_outputscale * model.nngp_kernel
    nv = model.nngp_noise if noise is None else noise
    return posterior_predictive(D.subset(idx1), K[np.ix_(idx1, idx1)], K[np.ix_(idx1, idx2)],
                                np.diag(K)[idx2], None if model.classification else nv)


IDX1, IDX2 = np.array([0, 2, 5, 6]), np.array([1, 3, 4, 7])


# splitting ---------------------------------------------------------------------


def test_split_two_points():
    D = Dataset(np.arange(2.0), np.zeros(2))
    _, _, a, b = split_dataset(D, 0.5, np.random.default_rng(0))
    assert len(a) == len(b) == 1 and set(a) | set(b) == {0, 1}


def test_split_deterministic():
    D = Dataset(np.arange(50.0), np.zeros(50))
    s1 = split_dataset(D, 0.5, make_rng(3, 1))[2]
    s2 = split_dataset(D, 0.5, make_rng(3, 1))[2]
    s3 = split_dataset(D, 0.5, make_rng(4, 1))[2]
    np.testing.assert_array_equal(s1, s2)
    assert not np.array_equal(s1, s3)


@given(seeds)
def test_split_odd_cover(seed):
    D = Dataset(np.arange(101.0), np.zeros(101))
    _, _, a, b = split_dataset(D, 0.5, np.random.default_rng(seed))
    assert {len(a), len(b)} == {50, 51}
    assert sorted(np.concatenate([a, b])) == list(range(101))


def test_split_too_few():
    with pytest.raises(TooFewPoints):
        split_dataset(Dataset(np.zeros(1), np.zeros(1)), 0.5, np.random.default_rng(0))


# losses against straight-line recomputation -------------------------------------


def test_gdkl_loss_tiny_instance():
    model = small_model(n=4)
    i1, i2 = np.array([0, 3]), np.array([1, 2])
    q, p = deep_posterior(model, i1, i2), nngp_posterior(model, i1, i2)
    y = model.train.targets[i2]
    ell = expected_nll_gaussian(q.mean, q.variance, y, model.noise_var)
    kl = kl_gaussians(q.mean, q.variance, p.mean, p.variance)
    expected = np.mean(ell[:, 0] + 0.7 * kl[:, 0])
    assert abs(gdkl_loss(model, i1, i2, 0.7)[0] - expected) <= 1e-10


def test_gdkl_beta_zero_is_ell():
    model = small_model()
    q = deep_posterior(model, IDX1, IDX2)
    ell = expected_nll_gaussian(q.mean, q.variance, model.train.targets[IDX2], model.noise_var)
    assert abs(gdkl_loss(model, IDX1, IDX2, 0.0)[0] - ell.mean()) <= 1e-10


def test_kl_vanishes_when_q_equals_p():
    model = small_model()
    phi = forward(model.network, model.train.inputs)
    model.nngp_kernel = rbf_kernel(phi, phi, model.head)
    model.nngp_outputscale, model.nngp_noise = 1.0, model.noise_var
    assert abs(dist_loss(model, IDX1, IDX2)[0]) <= 1e-9
    assert abs(gdkl_loss(model, IDX1, IDX2, 3.0)[0] - gdkl_loss(model, IDX1, IDX2, 0.0)[0]) <= 1e-8


def test_dist_loss_tiny_instance_and_limit():
    model = small_model()
    q, p = deep_posterior(model, IDX1, IDX2), nngp_posterior(model, IDX1, IDX2)
    dist = dist_loss(model, IDX1, IDX2)[0]
    assert abs(dist - kl_gaussians(q.mean, q.variance, p.mean, p.variance).mean()) <= 1e-10
    big = gdkl_loss(model, IDX1, IDX2, 1e6)[0] / 1e6
    assert abs(big - dist) <= 1e-4 * (1 + abs(dist))


def test_pred_loss_tiny_instance():
    model = small_model()
    q = deep_posterior(model, IDX1, IDX2)
    y = model.train.targets[IDX2]
    expected = gaussian_nll(q.mean, q.variance + model.noise_var, y).mean()
    assert abs(pred_loss(model, IDX1, IDX2)[0] - expected) <= 1e-10


def test_pred_loss_unit_case():
    assert abs(gaussian_nll(1.3, 1.0, 1.3) - 0.918939) < 1e-6


@given(seeds)
@settings(max_examples=15)
def test_pred_below_ell_and_gdkl_above_ell(seed):
    model = small_model(seed)
    ell = gdkl_loss(model, IDX1, IDX2, 0.0)[0]
    assert pred_loss(model, IDX1, IDX2)[0] <= ell + 1e-12
    assert gdkl_loss(model, IDX1, IDX2, 2.0)[0] >= ell - 1e-12


def test_multi_output_kl_is_averaged():
    model = small_model(c=3)
    q, p = deep_posterior(model, IDX1, IDX2), nngp_posterior(model, IDX1, IDX2)
    y = model.train.targets[IDX2]
    ell = expected_nll_gaussian(q.mean, q.variance, y, model.noise_var).sum(1)
    kl = kl_gaussians(q.mean, q.variance, p.mean, p.variance).mean(1)
    assert abs(gdkl_loss(model, IDX1, IDX2, 1.0)[0] - np.mean(ell + kl)) <= 1e-10


def test_classification_uses_per_point_noise():
    model = small_model(c=2, classification=True)
    q, p = deep_posterior(model, IDX1, IDX2), nngp_posterior(model, IDX1, IDX2)
    D = model.train
    ell = expected_nll_gaussian(q.mean, q.variance, D.targets[IDX2], D.noise_var[IDX2]).sum(1)
    kl = kl_gaussians(q.mean, q.variance, p.mean, p.variance).mean(1)
    assert abs(gdkl_loss(model, IDX1, IDX2, 1.0)[0] - np.mean(ell + kl)) <= 1e-10


def test_shared_wiring_uses_q_noise():
    model = small_model(wiring="shared")
    q = deep_posterior(model, IDX1, IDX2)
    p = nngp_posterior(model, IDX1, IDX2, noise=model.noise_var)
    kl = kl_gaussians(q.mean, q.variance, p.mean, p.variance)
    assert abs(dist_loss(model, IDX1, IDX2)[0] - kl.mean()) <= 1e-10


# objective identity ---------------------------------------------------------------


def label_conditioned_kl(model, idx1, idx2):
    """Mean over idx2 of KL[q(f*|x*,D1) || p(f*|x*,y*,D1)] with y* appended to D1."""
    D = model.train
    q = deep_posterior(model, idx1, idx2)
    K = model.nngp_outputscale * model.nngp_kernel
    nv = model.noise_var  # shared wiring: the likelihood noise of both models
    out = []
    for j in idx2:
        aug = np.append(idx1, j)
        post = posterior_predictive(D.subset(aug), K[np.ix_(aug, aug)], K[aug, j][:, None], K[j, j:j + 1], nv)
        k = list(idx2).index(j)
        out.append(kl_gaussians(q.mean[k, 0], q.variance[k, 0], post.mean[0, 0], post.variance[0, 0]))
    return float(np.mean(out))


def test_objective_identity_constant_offset():
    model = small_model(3, n=10, wiring="shared")
    i1, i2 = np.arange(5), np.arange(5, 10)
    rng = np.random.default_rng(9)
    base = model.network.params.copy()
    kl_form, ell_form = [], []
    for _ in range(5):
        model.network.params[:] = base + 0.5 * rng.standard_normal(base.size)
        kl_form.append(label_conditioned_kl(model, i1, i2))
        ell_form.append(gdkl_loss(model, i1, i2, 1.0)[0])
    d_kl, d_ell = np.subtract.outer(kl_form, kl_form), np.subtract.outer(ell_form, ell_form)
    assert np.max(np.abs(d_kl - d_ell)) <= 1e-8


# gradients ------------------------------------------------------------------------


def _fd_check(model, loss_fn, probes=20, seed=0):
    rng = np.random.default_rng(seed)
    _, grads = loss_fn(model)
    gvec = np.concatenate([grads["network"], [grads["raw_lengthscale"], grads["raw_outputscale"], grads["raw_noise"]]])
    v0 = model.pack()
    worst = 0.0
    for i in rng.choice(v0.size, size=min(probes, v0.size), replace=False):
        e = np.zeros_like(v0)
        e[i] = 1e-5
        model.unpack(v0 + e)
        lp = loss_fn(model)[0]
        model.unpack(v0 - e)
        lm = loss_fn(model)[0]
        model.unpack(v0)
        fd = (lp - lm) / 2e-5
        worst = max(worst, abs(fd - gvec[i]) / max(abs(fd) + abs(gvec[i]), 1e-6))
    return worst


@pytest.mark.parametrize("wiring", ["separate", "shared"])
@pytest.mark.parametrize("kind", ["gdkl", "dist", "pred", "lml"])
def test_loss_gradients(kind, wiring):
    model = small_model(1, wiring=wiring)
    fn = {"gdkl": lambda m: gdkl_loss(m, IDX1, IDX2, 1.3), "dist": lambda m: dist_loss(m, IDX1, IDX2),
          "pred": lambda m: pred_loss(m, IDX1, IDX2), "lml": dkl_lml_loss}[kind]
    assert _fd_check(model, fn) <= 1e-4


def test_classification_gradients():
    model = small_model(2, c=2, classification=True)
    assert _fd_check(model, lambda m: gdkl_loss(m, IDX1, IDX2, 1.0)) <= 1e-4


# NNGP pretraining -----------------------------------------------------------------


def test_spectral_lml_matches_tape(rng):
    X = rng.standard_normal((20, 3))
    K = nngp_kernel(X, X, NNGPParams())
    y = rng.standard_normal((20, 1))
    spec = SpectralLML(K, y)(0.4, -1.2)
    tape = nngp_lml_and_grads(K, y, 0.4, -1.2)
    np.testing.assert_allclose(spec, tape, rtol=1e-8)


def test_pretrain_zero_steps():
    assert pretrain_nngp(np.eye(3), np.ones(3), 0, outputscale_init=1.3, noise_init=0.05) == (1.3, 0.05)


def test_pretrain_zero_targets_monotone(rng):
    X = rng.standard_normal((30, 2))
    K = nngp_kernel(X, X, NNGPParams())
    hist = []
    os_, nv = pretrain_nngp(K, np.zeros(30), 300, history=hist)
    assert os_ < 1.0 and nv < 0.02
    assert all(b >= a - 1e-12 for a, b in zip(hist, hist[1:]))


def test_pretrain_recovers_scales():
    rng = np.random.default_rng(2024)
    X = rng.standard_normal((200, 3))
    K = nngp_kernel(X, X, NNGPParams())
    cov = 2.0 * K + 0.1 * np.eye(200)
    y = np.linalg.cholesky(cov) @ rng.standard_normal(200)
    os_, nv = pretrain_nngp(K, y, 3000, noise_init=0.02, lr=2e-2)
    assert 1.4 <= os_ <= 2.8 and 0.05 <= nv <= 0.2


def test_pretrain_heteroscedastic_keeps_noise(rng):
    X = rng.standard_normal((15, 2))
    K = nngp_kernel(X, X, NNGPParams())
    os_, nv = pretrain_nngp(K, rng.standard_normal((15, 2)), 50, noise_var=np.full((15, 2), 0.5))
    assert nv is None and os_ > 0


# training and prediction -----------------------------------------------------------


def test_train_zero_steps_predicts(rng):
    X = rng.standard_normal((12, 2))
    D = Dataset(X, np.sin(X[:, 0]))
    model = train_gdkl(dataclasses.replace(SMALL, total_steps=0), D)
    latent, marginal = predict(model, rng.standard_normal((3, 2)))
    assert np.all(np.isfinite(latent.mean)) and np.all(marginal.variance > latent.variance)


def test_training_deterministic(rng):
    X = rng.standard_normal((20, 2))
    D = Dataset(X, np.sin(X[:, 0]))
    cfg = dataclasses.replace(SMALL, total_steps=15, pretrain_steps=10)
    a, b = train_gdkl(cfg, D), train_gdkl(cfg, D)
    np.testing.assert_array_equal(a.pack(), b.pack())
    assert a.history == b.history
    c, d = train_dkl(cfg, D), train_dkl(cfg, D)
    np.testing.assert_array_equal(c.pack(), d.pack())


def test_toy_training_reduces_loss():
    from gdkl.data import toy_dataset

    D1, _, _ = toy_dataset(make_rng(0, 7))
    cfg = TrainConfig(total_steps=2000, hidden=(50, 50, 50, 10))
    model = train_gdkl(cfg, D1)
    assert np.mean(model.history[-100:]) < np.mean(model.history[:10])


def test_predict_matches_posterior_predictive(rng):
    model = small_model(4)
    Xs = rng.standard_normal((3, 2))
    latent, marginal = predict(model, Xs)
    D = model.train
    phi, phis = forward(model.network, D.inputs), forward(model.network, Xs)
    ref = posterior_predictive(D, rbf_kernel(phi, phi, model.head), rbf_kernel(phi, phis, model.head),
                               np.full(3, model.head.outputscale), model.noise_var)
    np.testing.assert_allclose(latent.mean, ref.mean, atol=1e-12)
    np.testing.assert_allclose(marginal.variance, ref.variance + model.noise_var, atol=1e-12)


def test_predict_at_training_point_and_far_away():
    model = small_model(5)
    model.raw_noise = -12.0
    latent, _ = predict(model, model.train.inputs[:1])
    assert abs(latent.mean[0, 0] - model.train.targets[0, 0]) < 1e-2
    model.raw_lengthscale = -3.0  # short lengthscale: features far apart decorrelate
    far, _ = predict(model, np.full((1, 2), 1e3))
    assert abs(far.mean[0, 0]) < 1e-6
    assert abs(far.variance[0, 0] - model.head.outputscale) < 1e-6


def test_checkpoint_round_trip(tmp_path):
    model = small_model(6)
    path = tmp_path / "ckpt.json"
    save_checkpoint(model, path, SMALL)
    loaded, doc = load_checkpoint(path, model.train)
    assert isinstance(loaded, GDKLModel)
    np.testing.assert_array_equal(loaded.pack(), model.pack())
    assert doc["config"]["hidden"] == list(SMALL.hidden)
    other = Dataset(model.train.inputs, model.train.targets + 1)
    with pytest.raises(ValueError):
        load_checkpoint(path, other)
