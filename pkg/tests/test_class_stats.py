import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fakd.class_stats import (
    IGNORE_INDEX,
    ClassCovarianceStore,
    LambdaSchedule,
    lambda_schedule,
)
from fakd.errors import FakdError
from fakd.numerics import make_rng


def batch_stats(x):
    """Reference: one-shot population statistics."""
    mu = x.mean(axis=0)
    d = x - mu
    return mu, d.T @ d / x.shape[0]


def test_single_sample_fresh_class():
    store = ClassCovarianceStore(3, 2)
    store.update(np.array([[1.5, -2.0]]), np.array([1]))
    assert store.count.tolist() == [0, 1, 0]
    assert np.array_equal(store.mean[1], [1.5, -2.0])
    assert np.array_equal(store.get_cov(1), np.zeros((2, 2)))


def test_two_point_covariance():
    x, y = np.array([1.0, 2.0, -1.0]), np.array([0.0, -1.0, 3.0])
    store = ClassCovarianceStore(2, 3)
    store.update(x[None], [0]).update(y[None], [0])
    np.testing.assert_allclose(store.get_cov(0), np.outer(x - y, x - y) / 4, atol=1e-15)


def test_ignored_pixels_skipped_and_counted_exactly():
    rng = make_rng(5)
    x = rng.standard_normal((40, 3))
    labels = rng.integers(0, 3, size=40)
    labels[::4] = IGNORE_INDEX
    store = ClassCovarianceStore(3, 3).update(x, labels)
    for c in range(3):
        assert store.count[c] == np.sum(labels == c)


def test_errors():
    store = ClassCovarianceStore(2, 3)
    with pytest.raises(FakdError, match="shape-mismatch"):
        store.update(np.zeros((4, 2)), np.zeros(4, dtype=int))
    with pytest.raises(FakdError, match="unknown-class"):
        store.get_cov(2)


def test_fresh_store_is_zero_and_symmetric():
    store = ClassCovarianceStore(4, 3)
    for c in range(4):
        assert not np.any(store.get_cov(c))


def test_isotropic_sampling_check():
    sigma2 = 2.5
    rng = make_rng(9)
    x = np.sqrt(sigma2) * rng.standard_normal((100_000, 3)) + 4.0
    store = ClassCovarianceStore(2, 3)
    for chunk, lab in zip(np.array_split(x, 7), range(7)):
        store.update(chunk, np.zeros(len(chunk), dtype=int))
    cov = store.get_cov(0)
    assert np.max(np.abs(cov - sigma2 * np.eye(3))) <= 0.05 * sigma2
    assert np.max(np.abs(cov - cov.T)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.integers(2, 200), st.integers(1, 5))
def test_stream_partition_invariance_and_psd(seed, n, n_splits):
    rng = make_rng(seed)
    x = 3.0 * rng.standard_normal((n, 4)) + rng.standard_normal(4)
    labels = rng.integers(0, 3, size=n)
    cuts = np.sort(rng.integers(0, n + 1, size=n_splits))
    store = ClassCovarianceStore(3, 4)
    for part in np.split(np.arange(n), cuts):
        if part.size:
            store.update(x[part], labels[part])
            for c in range(3):
                assert np.linalg.eigvalsh(store.cov[c]).min() >= -1e-9
    for c in range(3):
        xc = x[labels == c]
        if xc.size == 0:
            assert store.count[c] == 0 and not np.any(store.cov[c])
            continue
        mu, cov = batch_stats(xc)
        np.testing.assert_allclose(store.mean[c], mu, atol=1e-10)
        np.testing.assert_allclose(store.cov[c], cov, atol=1e-9)


def test_diagonal_mode_keeps_only_variances():
    rng = make_rng(2)
    x = rng.standard_normal((50, 3)) @ np.array([[1, 0.5, 0], [0, 1, 0.3], [0, 0, 1]])
    full = ClassCovarianceStore(1 + 1, 3).update(x, np.zeros(50, dtype=int))
    diag = ClassCovarianceStore(2, 3, diagonal=True)
    for part in np.array_split(np.arange(50), 3):
        diag.update(x[part], np.zeros(part.size, dtype=int))
    np.testing.assert_allclose(diag.cov[0], np.diag(np.diag(full.cov[0])), atol=1e-12)


def test_snapshot_round_trip(tmp_path):
    rng = make_rng(4)
    store = ClassCovarianceStore(3, 2).update(rng.standard_normal((30, 2)), rng.integers(0, 3, 30))
    path = tmp_path / "stats.txt"
    store.save(path)
    lines = path.read_text().splitlines()
    assert lines[1] == "3 2 0"
    back = ClassCovarianceStore.load(path)
    assert np.array_equal(back.count, store.count)
    assert np.array_equal(back.mean, store.mean)
    assert np.array_equal(back.cov, store.cov)


def test_lambda_schedule_examples():
    sched = LambdaSchedule(1.5, 100)
    assert lambda_schedule(0, sched) == 0.0
    assert lambda_schedule(100, sched) == pytest.approx(1.5, abs=1e-15)
    assert lambda_schedule(50, sched) == pytest.approx(0.75, abs=1e-15)
    assert lambda_schedule(50, LambdaSchedule(1.5, 100, "linear")) == 0.75
    with pytest.raises(FakdError, match="invalid-step"):
        lambda_schedule(101, sched)
    with pytest.raises(FakdError, match="invalid-step"):
        lambda_schedule(-1, sched)


@given(st.floats(0, 5), st.integers(1, 500))
def test_lambda_schedule_monotone_and_bounded(lam0, T):
    sched = LambdaSchedule(lam0, T)
    vals = [lambda_schedule(s, sched) for s in range(T + 1)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert all(0 <= v <= lam0 + 1e-15 for v in vals)
