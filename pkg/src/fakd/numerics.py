"""Dense kernels shared by the rest of the package.

Everything here works in float64. Random streams come from :func:`make_rng`,
which pins the bit generator so that seeded runs are reproducible.
"""
from __future__ import annotations

import numpy as np

from .errors import FakdError

# Bump when the generator or the sampling transform changes; tests pin it.
RNG_VERSION = "philox4x64-10/numpy-gaussian/1"

JITTER_LEVELS = (0.0, 1e-12, 1e-10, 1e-8)


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox stream for ``seed`` (a 64-bit unsigned integer)."""
    if seed < 0 or seed >= 2**64:
        raise FakdError("invalid-seed", f"seed must fit in uint64, got {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))


def log_sum_exp(v, axis=None):
    """log(sum(exp(v))) with a max shift.

    With ``axis=None`` a flat vector reduces to a scalar; otherwise the reduction
    runs along ``axis`` and that axis is dropped.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise FakdError("empty-vector", "log_sum_exp of an empty vector")
    if axis is None:
        v = v.ravel()
        m = v.max()
        return float(m + np.log(np.exp(v - m).sum()))
    m = v.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def softmax(v, tau: float = 1.0, axis: int = -1) -> np.ndarray:
    if not tau > 0:
        raise FakdError("invalid-temperature", f"tau must be positive, got {tau}")
    z = np.asarray(v, dtype=np.float64) / tau
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v, tau: float = 1.0, axis: int = -1) -> np.ndarray:
    if not tau > 0:
        raise FakdError("invalid-temperature", f"tau must be positive, got {tau}")
    z = np.asarray(v, dtype=np.float64) / tau
    return z - np.expand_dims(log_sum_exp(z, axis=axis), axis)


def psd_sqrt(cov) -> tuple[np.ndarray, float]:
    """Lower-triangular factor ``L`` with ``L @ L.T ~= cov + jitter * I``.

    The matrix is symmetrized first. Jitter escalates through
    :data:`JITTER_LEVELS`, scaled by the mean diagonal. Returns ``(L, jitter)``
    where ``jitter`` is the absolute amount added.
    """
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise FakdError("shape-mismatch", f"covariance must be square, got {cov.shape}")
    cov = 0.5 * (cov + cov.T)
    n = cov.shape[0]
    if not np.any(cov):
        return np.zeros_like(cov), 0.0
    scale = float(np.mean(np.diag(cov)))
    if scale <= 0:
        raise FakdError("not-psd", "covariance has nonpositive mean diagonal")
    for level in JITTER_LEVELS:
        jitter = level * scale
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(n)), jitter
        except np.linalg.LinAlgError:
            continue
    raise FakdError("not-psd", "cholesky failed at every jitter level")


def sample_mvn(mean, cov, scale: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` rows from N(mean, scale * cov)."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
        raise FakdError(
            "shape-mismatch", f"mean {mean.shape} incompatible with cov {cov.shape}"
        )
    if scale < 0:
        raise FakdError("invalid-scale", f"scale must be nonnegative, got {scale}")
    if scale == 0 or not np.any(cov):
        return np.tile(mean, (n, 1))
    L, _ = psd_sqrt(cov)
    z = rng.standard_normal((n, mean.size))
    return mean + np.sqrt(scale) * (z @ L.T)
