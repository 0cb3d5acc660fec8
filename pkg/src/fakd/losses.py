"""Distillation objectives with hand-derived gradients.

All losses take the student's pre-classifier features ``s`` (M x A), the
teacher's logits (M x C, treated as constants) and the student's classifier
head. They return a :class:`LossOutput` holding the scalar value and the
gradients with respect to ``s``, ``W`` and ``B``.

The augmented variants replace each feature by a Gaussian cloud
N(s_i, lam * Sigma_{cls(i)}) and minimise the closed-form upper bound on the
expected base loss that follows from Jensen plus the Gaussian MGF.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .class_stats import IGNORE_INDEX, ClassCovarianceStore
from .errors import FakdError
from .numerics import log_softmax, softmax

VARIANTS = ("PD", "CWD", "AUG_PD", "AUG_CWD")
DIAGONAL_MODES = ("paper_form", "exact_diagonal")
VARIANCE_DENOMINATORS = ("tau_squared", "tau")


@dataclass
class ClassifierHead:
    W: np.ndarray  # (C, A)
    B: np.ndarray  # (C,)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.W.ndim != 2 or self.B.shape != (self.W.shape[0],):
            raise FakdError("shape-mismatch", f"W {self.W.shape} vs B {self.B.shape}")
        if self.W.shape[0] < 2:
            raise FakdError("shape-mismatch", "a head needs at least two classes")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    def logits(self, features) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.W.T + self.B


@dataclass
class LossOutput:
    value: float
    grad_features: np.ndarray
    grad_W: np.ndarray
    grad_B: np.ndarray


@dataclass(frozen=True)
class DistillLossSpec:
    variant: str = "AUG_CWD"
    tau: float = 4.0
    lambda0: float = 1.0
    weight: float = 3.0
    diagonal_mode: str = "paper_form"
    variance_denominator: str = "tau_squared"
    schedule: str = "cosine"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise FakdError("invalid-variant", f"unknown variant {self.variant!r}")
        if not self.tau > 0:
            raise FakdError("invalid-temperature", f"tau must be positive, got {self.tau}")
        if self.lambda0 < 0:
            raise FakdError("invalid-lambda", f"lambda0 must be >= 0, got {self.lambda0}")
        if self.diagonal_mode not in DIAGONAL_MODES:
            raise FakdError("invalid-mode", f"unknown diagonal_mode {self.diagonal_mode!r}")
        if self.variance_denominator not in VARIANCE_DENOMINATORS:
            raise FakdError(
                "invalid-mode", f"unknown variance_denominator {self.variance_denominator!r}"
            )

    @property
    def augmented(self) -> bool:
        return self.variant.startswith("AUG_")


def _check(student, teacher_logits, head, tau):
    s = np.asarray(student, dtype=np.float64)
    t = np.asarray(teacher_logits, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] != head.W.shape[1]:
        raise FakdError("shape-mismatch", f"features {s.shape} vs W {head.W.shape}")
    if t.shape != (s.shape[0], head.num_classes):
        raise FakdError("shape-mismatch", f"teacher logits {t.shape}, expected {(s.shape[0], head.num_classes)}")
    if not tau > 0:
        raise FakdError("invalid-temperature", f"tau must be positive, got {tau}")
    return s, t


def _pack(value, s, head, dz, dW_extra=None) -> LossOutput:
    grad_W = dz.T @ s
    if dW_extra is not None:
        grad_W = grad_W + dW_extra
    return LossOutput(float(value), dz @ head.W, grad_W, dz.sum(axis=0))


def _cov_stack(covs, classes, num_classes, dim) -> np.ndarray:
    if isinstance(covs, ClassCovarianceStore):
        stack = covs.covariances()
    else:
        stack = np.asarray(covs, dtype=np.float64)
    if stack.ndim != 3 or stack.shape[1:] != (dim, dim):
        raise FakdError("shape-mismatch", f"covariances {stack.shape}, expected (*, {dim}, {dim})")
    classes = np.asarray(classes)
    if classes.size and (classes.min() < 0 or classes.max() >= stack.shape[0]):
        raise FakdError("missing-class-stats", "a pixel's class has no covariance entry")
    return stack


def _variance_coef(lam, tau, variance_denominator):
    if lam < 0:
        raise FakdError("invalid-lambda", f"lambda must be >= 0, got {lam}")
    if variance_denominator == "tau_squared":
        return lam / tau**2
    if variance_denominator == "tau":
        return lam / tau
    raise FakdError("invalid-mode", f"unknown variance_denominator {variance_denominator!r}")


def assign_classes(labels, teacher_logits) -> np.ndarray:
    """Class whose covariance augments each pixel: ground truth, else teacher argmax."""
    labels = np.asarray(labels).ravel()
    fallback = np.argmax(teacher_logits, axis=1)
    return np.where(labels == IGNORE_INDEX, fallback, labels).astype(np.int64)


def pd_loss(student, teacher_logits, head: ClassifierHead, tau: float = 1.0) -> LossOutput:
    """Pixel-wise distillation: class softmax at every pixel, cross-entropy to the teacher."""
    s, t = _check(student, teacher_logits, head, tau)
    M = s.shape[0]
    z = head.logits(s)
    p_t = softmax(t, tau, axis=1)
    logq = log_softmax(z, tau, axis=1)
    value = -(tau**2) / M * np.sum(p_t * logq)
    dz = tau / M * (np.exp(logq) - p_t)
    return _pack(value, s, head, dz)


def cwd_loss(student, teacher_logits, head: ClassifierHead, tau: float = 4.0) -> LossOutput:
    """Channel-wise distillation: each class map is softmaxed over spatial positions."""
    s, t = _check(student, teacher_logits, head, tau)
    C = head.num_classes
    z = head.logits(s)
    p_t = softmax(t, tau, axis=0)
    logq = log_softmax(z, tau, axis=0)
    value = -(tau**2) / C * np.sum(p_t * logq)
    dz = tau / C * (np.exp(logq) - p_t)
    return _pack(value, s, head, dz)


def aug_pd_loss(
    student,
    teacher_logits,
    head: ClassifierHead,
    covs,
    lam: float,
    classes,
    tau: float = 1.0,
    variance_denominator: str = "tau_squared",
) -> LossOutput:
    s, t = _check(student, teacher_logits, head, tau)
    M, C = s.shape[0], head.num_classes
    classes = np.asarray(classes, dtype=np.int64).ravel()
    if classes.shape != (M,):
        raise FakdError("shape-mismatch", "one class id per pixel required")
    stack = _cov_stack(covs, classes, C, s.shape[1])
    coef = _variance_coef(lam, tau, variance_denominator)
    if coef == 0:
        return pd_loss(s, t, head, tau)
    W = head.W

    u = head.logits(s) / tau
    p_t = softmax(t, tau, axis=1)
    groups = np.unique(classes)
    # D_g[c, k] = (w_k - w_c)^T Sigma_g (w_k - w_c)
    D = np.zeros((M, C, C))
    for g in groups:
        Q = W @ stack[g] @ W.T
        q = np.diag(Q)
        D[classes == g] = q[None, :] + q[:, None] - 2.0 * Q
    E = u[:, None, :] - u[:, :, None] + 0.5 * coef * D  # (i, c, k)
    Emax = E.max(axis=2, keepdims=True)
    ex = np.exp(E - Emax)
    S = ex.sum(axis=2, keepdims=True)
    L = (Emax + np.log(S))[..., 0]
    value = tau**2 / M * np.sum(p_t * L)

    g = tau**2 / M * p_t
    G3 = g[:, :, None] * (ex / S)
    dz = (G3.sum(axis=1) - g) / tau
    dW_extra = np.zeros_like(W)
    dD = 0.5 * coef * G3
    for grp in groups:
        H = dD[classes == grp].sum(axis=0)
        Mg = np.diag(H.sum(axis=0) + H.sum(axis=1)) - H - H.T
        dW_extra += 2.0 * Mg @ W @ stack[grp]
    return _pack(value, s, head, dz, dW_extra)


def _channel_variances(W, stack, classes, coef):
    """v[k, c] = coef * w_c^T Sigma_{cls(k)} w_c."""
    v = np.zeros((classes.shape[0], W.shape[0]))
    for g in np.unique(classes):
        v[classes == g] = coef * np.einsum("ca,ab,cb->c", W, stack[g], W)
    return v


def aug_cwd_loss(
    student,
    teacher_logits,
    head: ClassifierHead,
    covs,
    lam: float,
    classes,
    tau: float = 4.0,
    diagonal_mode: str = "paper_form",
    variance_denominator: str = "tau_squared",
) -> LossOutput:
    s, t = _check(student, teacher_logits, head, tau)
    M, C = s.shape[0], head.num_classes
    classes = np.asarray(classes, dtype=np.int64).ravel()
    if classes.shape != (M,):
        raise FakdError("shape-mismatch", "one class id per pixel required")
    if diagonal_mode not in DIAGONAL_MODES:
        raise FakdError("invalid-mode", f"unknown diagonal_mode {diagonal_mode!r}")
    stack = _cov_stack(covs, classes, C, s.shape[1])
    coef = _variance_coef(lam, tau, variance_denominator)
    if coef == 0:
        return cwd_loss(s, t, head, tau)
    W = head.W

    u = head.logits(s) / tau
    v = _channel_variances(W, stack, classes, coef)
    p_t = softmax(t, tau, axis=0)
    g = tau**2 / C * p_t

    if diagonal_mode == "paper_form":
        # exponent (u_k + v_k/2) + (v_i/2 - u_i) separates over i and k
        a = u + 0.5 * v
        amax = a.max(axis=0)
        ea = np.exp(a - amax)
        lse = amax + np.log(ea.sum(axis=0))
        value = np.sum(g * (0.5 * v - u + lse))
        q = ea / ea.sum(axis=0)
        P = g.sum(axis=0)
        du = P * q - g
        dv = 0.5 * (g + P * q)
    else:
        E = u[None, :, :] - u[:, None, :] + 0.5 * (v[:, None, :] + v[None, :, :])  # (i, k, c)
        idx = np.arange(M)
        E[idx, idx, :] = 0.0
        Emax = E.max(axis=1, keepdims=True)
        ex = np.exp(E - Emax)
        S = ex.sum(axis=1, keepdims=True)
        value = np.sum(g * (Emax + np.log(S))[:, 0, :])
        G = g[:, None, :] * (ex / S)
        G[idx, idx, :] = 0.0
        du = G.sum(axis=0) - G.sum(axis=1)
        dv = 0.5 * (G.sum(axis=0) + G.sum(axis=1))

    dz = du / tau
    dW_extra = np.zeros_like(W)
    for grp in np.unique(classes):
        a_g = dv[classes == grp].sum(axis=0)
        dW_extra += 2.0 * coef * a_g[:, None] * (W @ stack[grp])
    return _pack(value, s, head, dz, dW_extra)


def segmentation_ce_loss(student, head: ClassifierHead, labels) -> LossOutput:
    """Mean per-pixel cross-entropy over non-ignored pixels."""
    s = np.asarray(student, dtype=np.float64)
    labels = np.asarray(labels).ravel()
    if s.ndim != 2 or s.shape[1] != head.W.shape[1] or labels.shape != (s.shape[0],):
        raise FakdError("shape-mismatch", f"features {s.shape}, labels {labels.shape}")
    valid = labels != IGNORE_INDEX
    n = int(valid.sum())
    if n == 0:
        raise FakdError("empty-supervision", "every pixel is ignored")
    z = head.logits(s)
    logq = log_softmax(z, axis=1)
    rows = np.nonzero(valid)[0]
    y = labels[valid].astype(np.int64)
    value = -logq[rows, y].sum() / n
    dz = np.zeros_like(z)
    dz[rows] = np.exp(logq[rows])
    dz[rows, y] -= 1.0
    dz /= n
    return _pack(value, s, head, dz)


def distill_loss(spec: DistillLossSpec, student, teacher_logits, head, covs, lam, classes) -> LossOutput:
    """Dispatch on ``spec.variant``; ``lam`` is the scheduled value for this step."""
    if spec.variant == "PD":
        return pd_loss(student, teacher_logits, head, spec.tau)
    if spec.variant == "CWD":
        return cwd_loss(student, teacher_logits, head, spec.tau)
    if spec.variant == "AUG_PD":
        return aug_pd_loss(
            student, teacher_logits, head, covs, lam, classes, spec.tau, spec.variance_denominator
        )
    return aug_cwd_loss(
        student,
        teacher_logits,
        head,
        covs,
        lam,
        classes,
        spec.tau,
        spec.diagonal_mode,
        spec.variance_denominator,
    )
