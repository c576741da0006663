import numpy as np
import pytest
from hypothesis import given, strategies as st

from gdkl.errors import NonPositiveVariance
from gdkl.objectives import expected_nll_gaussian, gaussian_nll, kl_gaussians
from oracles import kl_quadrature, mc_expected_nll

finite = st.floats(-5, 5)
positive = st.floats(0.05, 5)


def test_kl_identical_is_zero():
    assert kl_gaussians(0.0, 1.0, 0.0, 1.0) == 0.0


def test_kl_mean_shift():
    assert abs(kl_gaussians(1.0, 1.0, 0.0, 1.0) - 0.5) < 1e-15


def test_kl_quadrature_case():
    assert abs(kl_gaussians(0.3, 0.7, -0.2, 1.9) - kl_quadrature(0.3, 0.7, -0.2, 1.9)) < 1e-6


@given(finite, positive, finite, positive)
def test_kl_nonnegative_and_matches_quadrature(mq, vq, mp, vp):
    kl = kl_gaussians(mq, vq, mp, vp)
    assert kl >= 0
    lo = min(mq, mp) - 12 * np.sqrt(max(vq, vp))
    hi = max(mq, mp) + 12 * np.sqrt(max(vq, vp))
    assert abs(kl - kl_quadrature(mq, vq, mp, vp, lo, hi)) < 1e-6


@given(finite, positive)
def test_kl_zero_iff_identical(m, v):
    assert kl_gaussians(m, v, m, v) == 0.0
    assert kl_gaussians(m, v, m + 1e-3, v) > 0
    assert kl_gaussians(m, v, m, v * 1.01) > 0


def test_kl_rejects_nonpositive_variance():
    with pytest.raises(NonPositiveVariance):
        kl_gaussians(0.0, 0.0, 0.0, 1.0)


def test_expected_nll_point_mass():
    assert abs(expected_nll_gaussian(0.4, 0.0, 0.4, 1.0) - 0.918939) < 1e-6


def test_expected_nll_unit_variance():
    assert abs(expected_nll_gaussian(0.4, 1.0, 0.4, 1.0) - 1.418939) < 1e-6


def test_expected_nll_matches_mc(rng):
    mq, vq, y, nv = 0.3, 0.6, -0.4, 0.25
    est, se = mc_expected_nll(mq, vq, y, nv, 1_000_000, rng)
    assert abs(expected_nll_gaussian(mq, vq, y, nv) - est) <= 3 * se


def test_expected_nll_rejects_bad_noise():
    with pytest.raises(NonPositiveVariance):
        expected_nll_gaussian(0.0, 1.0, 0.0, 0.0)


@given(finite, positive, finite, positive)
def test_jensen_gap(mq, vq, y, nv):
    """Expected NLL exceeds the predictive NLL by a closed-form non-negative gap."""
    gap = expected_nll_gaussian(mq, vq, y, nv) - gaussian_nll(mq, vq + nv, y)
    r = vq / nv
    resid = (y - mq) ** 2 * vq / (nv * (vq + nv))
    assert gap >= -1e-12
    np.testing.assert_allclose(gap, 0.5 * r - 0.5 * np.log1p(r) + 0.5 * resid, rtol=1e-8, atol=1e-10)


def test_jensen_gap_at_target():
    # with y equal to the mean only the variance part remains
    gap = expected_nll_gaussian(0.2, 0.5, 0.2, 0.25) - gaussian_nll(0.2, 0.75, 0.2)
    assert abs(gap - (0.5 * 2.0 - 0.5 * np.log(3.0))) < 1e-12
