import numpy as np
import pytest
from hypothesis import given, strategies as st

from gdkl.gp import GaussianPosterior
from gdkl.metrics import accuracy, brier, ece_mce, rmse, test_ll


def test_rmse_cases():
    assert rmse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert rmse([0.0, 0.0], [-1.0, 1.0]) == 1.0
    assert abs(rmse([1.0, 2.0], [2.0, 4.0]) - 1.581139) < 1e-6


def test_accuracy_perfect():
    probs = np.eye(3)[[0, 2, 1]]
    assert accuracy(probs, [0, 2, 1]) == 1.0


def test_ll_gaussian_and_probs():
    post = GaussianPosterior(np.array([[0.0]]), np.array([[1.0]]))
    assert abs(test_ll(post, [0.0]) + 0.918939) < 1e-6
    assert abs(test_ll(np.array([[0.25, 0.75]]), [1]) - np.log(0.75)) < 1e-15


def test_ece_perfect():
    ece, mce, _ = ece_mce(np.eye(4), np.arange(4))
    assert ece == 0.0 and mce == 0.0


def test_ece_hand_binning():
    probs = np.array([[0.9, 0.1], [0.9, 0.1]])
    ece, mce, records = ece_mce(probs, [0, 1])
    assert abs(ece - 0.4) < 1e-12 and abs(mce - 0.4) < 1e-12
    full = [r for r in records if r["count"]]
    assert len(full) == 1 and full[0]["lower"] < 0.9 <= full[0]["upper"]


def test_ece_empty_bins_ignored():
    probs = np.array([[0.9, 0.1], [0.9, 0.1]])
    ece_a, _, rec_a = ece_mce(probs, [0, 1], bins=15)
    ece_b, _, rec_b = ece_mce(probs, [0, 1], bins=50)
    assert abs(ece_a - ece_b) < 1e-12
    assert sum(r["count"] for r in rec_a) == 2 and len(rec_b) == 50


@given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.integers(1, 40))
def test_ece_bounds(seed, c, n):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(c), size=n)
    labels = rng.integers(0, c, n)
    ece, mce, _ = ece_mce(probs, labels)
    assert 0 <= ece <= mce + 1e-15 <= 1 + 1e-15


def test_brier_cases():
    assert brier(np.eye(3), [0, 1, 2]) == 0.0
    assert abs(brier(np.full((4, 2), 0.5), [0, 1, 0, 1]) - 0.25) < 1e-15
    assert abs(brier(np.array([[0.0, 1.0]]), [0]) - 1.0) < 1e-15


@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_brier_in_unit_interval(seed, c):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(c), size=10)
    b = brier(probs, rng.integers(0, c, 10))
    assert 0 <= b <= 1


def test_rmse_shape_mismatch():
    with pytest.raises(Exception):
        rmse(np.zeros(3), np.zeros(4))
