"""Brute-force checks for the closed-form losses.

Nothing here calls into the augmented loss formulas except
:func:`verify_upper_bound`, which compares them against sampling. The Monte
Carlo base-loss evaluators are written directly over sample tensors rather
than reusing :mod:`fakd.losses`.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import losses
from .errors import FakdError
from .numerics import make_rng, psd_sqrt

CSV_FIELDS = [
    "variant", "seed", "M", "A", "C", "lambda", "tau", "mode",
    "closed_form", "mc_mean", "mc_stderr", "margin", "holds",
]

_CHUNK = 2048


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float
    n_samples: int


@dataclass(frozen=True)
class BoundReport:
    closed_form: float
    mc: McEstimate
    margin: float
    holds: bool


@dataclass
class Instance:
    """One evaluation point for a distillation loss."""

    student: np.ndarray  # (M, A)
    teacher_logits: np.ndarray  # (M, C)
    head: losses.ClassifierHead
    covs: np.ndarray  # (C, A, A)
    classes: np.ndarray  # (M,)
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.student.shape[0], self.student.shape[1], self.head.num_classes


def random_psd(rng, dim: int, rank: int | None = None, scale: float = 1.0) -> np.ndarray:
    rank = dim if rank is None else rank
    X = rng.standard_normal((dim, rank))
    return scale * X @ X.T / rank


def random_instance(seed: int, M: int = 4, A: int = 3, C: int = 3, feature_scale=1.0,
                    cov_scale=1.0, rank=None) -> Instance:
    rng = make_rng(seed)
    s = feature_scale * rng.standard_normal((M, A))
    head = losses.ClassifierHead(rng.standard_normal((C, A)), 0.5 * rng.standard_normal(C))
    t = 2.0 * rng.standard_normal((M, C))
    covs = np.stack([random_psd(rng, A, rank, cov_scale) for _ in range(C)])
    classes = rng.integers(0, C, size=M)
    return Instance(s, t, head, covs, classes, seed=seed)


def flat_instance(seed: int, M: int = 64, A: int = 3, C: int = 3) -> Instance:
    """Near-constant student logits, teacher mass on pixels of a zero-covariance class.

    Many comparable spatial terms make the log-sum concentrate, so the Jensen gap
    nearly vanishes. Good at exposing a variance term that is too small.
    """
    rng = make_rng(seed)
    s = 0.01 * rng.standard_normal((M, A))
    head = losses.ClassifierHead(rng.standard_normal((C, A)), np.zeros(C))
    classes = np.arange(M) % 2
    t = np.where(classes[:, None] == 0, 3.0, 0.0) + 0.1 * rng.standard_normal((M, C))
    covs = np.stack([np.zeros((A, A))] + [random_psd(rng, A) for _ in range(C - 1)])
    return Instance(s, t, head, covs, classes, seed=seed)


def _summarize(values: np.ndarray) -> McEstimate:
    n = values.size
    if n < 2:
        raise FakdError("too-few-samples", "need at least two samples")
    if np.all(values == values[0]):
        return McEstimate(float(values[0]), 0.0, n)
    return McEstimate(float(values.mean()), float(values.std(ddof=1) / np.sqrt(n)), n)


def mgf_expectation(a, mu, cov, n: int, rng) -> tuple[McEstimate, float]:
    """Sample E[exp(a^T x)] for x ~ N(mu, cov); also return the closed form."""
    a = np.asarray(a, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if a.shape != mu.shape or cov.shape != (a.size, a.size):
        raise FakdError("shape-mismatch", f"a {a.shape}, mu {mu.shape}, cov {cov.shape}")
    shift = float(np.dot(mu, a))
    closed = float(np.exp(shift + 0.5 * (a @ cov @ a)))
    L, _ = psd_sqrt(cov)
    values = np.empty(n)
    for lo in range(0, n, 1 << 16):
        hi = min(n, lo + (1 << 16))
        if np.any(L):
            x = mu + rng.standard_normal((hi - lo, a.size)) @ L.T
        else:
            values[lo:hi] = np.exp(shift)
            continue
        values[lo:hi] = np.exp(x @ a)
    return _summarize(values), closed


def _pd_values(s_hat, t, W, B, tau):
    z = (s_hat @ W.T + B) / tau
    zmax = z.max(axis=2, keepdims=True)
    logq = z - zmax - np.log(np.exp(z - zmax).sum(axis=2, keepdims=True))
    tt = t / tau
    p = np.exp(tt - tt.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    M = s_hat.shape[1]
    return -(tau**2) / M * np.einsum("mc,nmc->n", p, logq)


def _cwd_values(s_hat, t, W, B, tau):
    z = (s_hat @ W.T + B) / tau
    zmax = z.max(axis=1, keepdims=True)
    logq = z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    tt = t / tau
    p = np.exp(tt - tt.max(axis=0, keepdims=True))
    p /= p.sum(axis=0, keepdims=True)
    C = W.shape[0]
    return -(tau**2) / C * np.einsum("mc,nmc->n", p, logq)


def _base_variant(variant: str) -> str:
    return variant.replace("AUG_", "")


def mc_loss_estimate(variant: str, inst: Instance, lam: float, tau: float, N: int, rng) -> McEstimate:
    """Expected base loss under joint Gaussian feature augmentation, by sampling.

    Every draw perturbs all M pixels at once: s_hat_j ~ N(s_j, lam * Sigma_{cls(j)}).
    """
    if N < 2:
        raise FakdError("too-few-samples", "N must be at least 2")
    if lam < 0:
        raise FakdError("invalid-lambda", f"lambda must be >= 0, got {lam}")
    base = _base_variant(variant)
    if base not in ("PD", "CWD"):
        raise FakdError("invalid-variant", f"unknown variant {variant!r}")
    s = np.asarray(inst.student, dtype=np.float64)
    M, A = s.shape
    classes = np.asarray(inst.classes, dtype=np.int64)
    W, B = inst.head.W, inst.head.B
    evaluate = _pd_values if base == "PD" else _cwd_values

    factors = np.zeros((M, A, A))
    for g in np.unique(classes):
        L, _ = psd_sqrt(lam * inst.covs[g]) if lam > 0 else (np.zeros((A, A)), 0.0)
        factors[classes == g] = L
    if not np.any(factors):
        # no noise: every draw is the base loss itself
        v = closed_form(base, inst, 0.0, tau)
        return McEstimate(v, 0.0, N)

    values = np.empty(N)
    for lo in range(0, N, _CHUNK):
        hi = min(N, lo + _CHUNK)
        z = rng.standard_normal((hi - lo, M, A))
        s_hat = s + np.einsum("mab,nmb->nma", factors, z)
        values[lo:hi] = evaluate(s_hat, inst.teacher_logits, W, B, tau)
    return _summarize(values)


def closed_form(variant, inst: Instance, lam, tau, diagonal_mode="paper_form",
                variance_denominator="tau_squared") -> float:
    args = (inst.student, inst.teacher_logits, inst.head)
    if variant == "PD":
        return losses.pd_loss(*args, tau).value
    if variant == "CWD":
        return losses.cwd_loss(*args, tau).value
    if variant == "AUG_PD":
        return losses.aug_pd_loss(*args, inst.covs, lam, inst.classes, tau, variance_denominator).value
    if variant == "AUG_CWD":
        return losses.aug_cwd_loss(
            *args, inst.covs, lam, inst.classes, tau, diagonal_mode, variance_denominator
        ).value
    raise FakdError("invalid-variant", f"unknown variant {variant!r}")


def verify_upper_bound(variant, inst: Instance, lam, tau, N, rng, diagonal_mode="paper_form",
                       variance_denominator="tau_squared") -> BoundReport:
    cf = closed_form(variant, inst, lam, tau, diagonal_mode, variance_denominator)
    mc = mc_loss_estimate(variant, inst, lam, tau, N, rng)
    margin = cf - mc.mean
    return BoundReport(cf, mc, margin, bool(margin >= -3.0 * mc.stderr))


def write_bound_csv(path, rows) -> None:
    """``rows``: iterable of dicts carrying every key in :data:`CSV_FIELDS`."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in CSV_FIELDS})


def bound_row(variant, inst: Instance, lam, tau, diagonal_mode, variance_denominator,
              report: BoundReport) -> dict:
    M, A, C = inst.shape
    return {
        "variant": variant, "seed": inst.seed, "M": M, "A": A, "C": C,
        "lambda": repr(float(lam)), "tau": repr(float(tau)),
        "mode": f"{diagonal_mode}/{variance_denominator}",
        "closed_form": repr(report.closed_form), "mc_mean": repr(report.mc.mean),
        "mc_stderr": repr(report.mc.stderr), "margin": repr(report.margin),
        "holds": str(report.holds).lower(),
    }


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``f()`` with respect to ``x``, perturbed in place."""
    if not step > 0:
        raise FakdError("invalid-step", "finite-difference step must be positive")
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        fp = f()
        flat[j] = orig - step
        fm = f()
        flat[j] = orig
        gflat[j] = (fp - fm) / (2 * step)
    return grad


def max_rel_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))


def finite_diff_grad_check(loss_fn, features, W, B, step: float = 1e-5) -> float:
    """Worst relative error of ``loss_fn(features, W, B)``'s gradients.

    ``loss_fn`` returns a :class:`fakd.losses.LossOutput`. Checks every
    coordinate of features, W and B.
    """
    x = [np.array(features, dtype=np.float64), np.array(W, dtype=np.float64),
         np.array(B, dtype=np.float64)]
    out = loss_fn(*x)
    analytic = [out.grad_features, out.grad_W, out.grad_B]
    worst = 0.0
    for arr, ana in zip(x, analytic):
        num = numeric_grad(lambda: loss_fn(*x).value, arr, step)
        worst = max(worst, max_rel_error(ana, num))
    return worst
