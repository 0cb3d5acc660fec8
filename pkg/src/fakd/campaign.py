"""Verification campaigns: reductions, bounds, MGF, gradients, streaming, monotonicity.

Each campaign returns a :class:`CheckResult`. Failing cases carry enough data
(seeds and raw arrays) to be replayed outside the campaign.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .class_stats import ClassCovarianceStore
from .numerics import make_rng
from .oracle import (
    Instance,
    bound_row,
    closed_form,
    finite_diff_grad_check,
    flat_instance,
    max_rel_error,
    mgf_expectation,
    numeric_grad,
    random_instance,
    random_psd,
    verify_upper_bound,
)
from .toymodels import ModelSpec, PixelNet

REDUCTION_TOL = 1e-12
GRAD_TOL = 1e-5
STREAM_TOL = 1e-10
PSD_TOL = -1e-9
MONOTONE_LAMBDAS = (0.0, 0.25, 0.5, 1.0, 2.0)


@dataclass
class CheckResult:
    name: str
    cases: int = 0
    worst: float = 0.0
    failures: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.cases > 0 and not self.failures

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: {self.cases} cases, {len(self.failures)} failures, "
                f"worst {self.worst:.3g}, {self.seconds:.1f}s")


def instance_dump(inst: Instance) -> dict:
    return {
        "seed": inst.seed,
        "student": inst.student.tolist(),
        "teacher_logits": inst.teacher_logits.tolist(),
        "W": inst.head.W.tolist(),
        "B": inst.head.B.tolist(),
        "covs": inst.covs.tolist(),
        "classes": inst.classes.tolist(),
    }


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        (res[0] if isinstance(res, tuple) else res).seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def reduction_check(n_instances=100, seed=0, M=4, A=3, C=3, taus=(1.0, 4.0)) -> CheckResult:
    """Augmented losses at lambda = 0 equal their base losses."""
    res = CheckResult("reduction")
    for i in range(n_instances):
        inst = random_instance(seed + i, M, A, C)
        for tau in taus:
            pairs = [("AUG_PD", "PD", "paper_form")] + [
                ("AUG_CWD", "CWD", mode) for mode in losses.DIAGONAL_MODES
            ]
            for aug, base, mode in pairs:
                b = closed_form(base, inst, 0.0, tau)
                a = closed_form(aug, inst, 0.0, tau, mode)
                err = abs(a - b) / (1 + abs(b))
                res.cases += 1
                res.worst = max(res.worst, err)
                if not err <= REDUCTION_TOL:
                    res.failures.append({"check": "reduction", "variant": aug, "mode": mode,
                                         "tau": tau, "aug": a, "base": b,
                                         "instance": instance_dump(inst)})
    return res


def campaign_instance(kind: str, seed: int, M: int, A: int, C: int) -> Instance:
    if kind == "flat":
        return flat_instance(seed, max(M, 2), A, C)
    return random_instance(seed, M, A, C)


@_timed
def bound_check(n_instances=50, seed=0, M=4, A=3, C=3, lambdas=(0.25, 1.0), taus=(1.0, 4.0),
                diagonal_modes=losses.DIAGONAL_MODES, variance_denominator="tau_squared",
                n_samples=10_000, instance_kind="random") -> tuple[CheckResult, list]:
    """Closed-form losses dominate Monte Carlo augmentation (within 3 stderr).

    Returns the check and the bound-report CSV rows. AUG_PD has no diagonal
    option; its rows carry mode ``none``.
    """
    res = CheckResult("upper-bound")
    rows = []
    combos = [("AUG_PD", "none")] + [("AUG_CWD", m) for m in diagonal_modes]
    for i in range(n_instances):
        inst = campaign_instance(instance_kind, seed + i, M, A, C)
        k = 0
        for variant, mode in combos:
            for lam in lambdas:
                for tau in taus:
                    rng = make_rng((seed + i) * 1009 + k)
                    k += 1
                    dmode = "paper_form" if mode == "none" else mode
                    rep = verify_upper_bound(variant, inst, lam, tau, n_samples, rng, dmode,
                                             variance_denominator)
                    rows.append(bound_row(variant, inst, lam, tau, mode, variance_denominator, rep))
                    res.cases += 1
                    if rep.mc.stderr > 0:
                        res.worst = max(res.worst, -rep.margin / rep.mc.stderr)
                    if not rep.holds:
                        res.failures.append({
                            "check": "upper-bound", "variant": variant, "mode": mode,
                            "variance_denominator": variance_denominator, "lambda": lam,
                            "tau": tau, "n_samples": n_samples, "mc_seed": (seed + i) * 1009 + k - 1,
                            "closed_form": rep.closed_form, "mc_mean": rep.mc.mean,
                            "mc_stderr": rep.mc.stderr, "instance": instance_dump(inst),
                        })
    return res, rows


@_timed
def mgf_check(n_instances=20, seed=0, dim=3, n_samples=1_000_000) -> CheckResult:
    """Gaussian MGF closed form against sampling; exact when the covariance is zero."""
    res = CheckResult("mgf")
    for i in range(n_instances):
        rng = make_rng(seed + i)
        a = 0.5 * rng.standard_normal(dim)
        mu = rng.standard_normal(dim)
        cov = random_psd(rng, dim)
        est, closed = mgf_expectation(a, mu, cov, n_samples, rng)
        z = abs(est.mean - closed) / est.stderr
        res.cases += 1
        res.worst = max(res.worst, z)
        if not z <= 3.0:
            res.failures.append({"check": "mgf", "seed": seed + i, "a": a.tolist(),
                                 "mu": mu.tolist(), "cov": cov.tolist(), "mc": est.mean,
                                 "stderr": est.stderr, "closed": closed})
        est0, closed0 = mgf_expectation(a, mu, np.zeros((dim, dim)), 100, rng)
        res.cases += 1
        if est0.mean != closed0 or est0.stderr != 0.0:
            res.failures.append({"check": "mgf-zero-cov", "seed": seed + i, "mc": est0.mean,
                                 "closed": closed0})
    return res


def _loss_fn(variant, inst: Instance, lam, tau, mode):
    def fn(s, W, B):
        head = losses.ClassifierHead(W, B)
        if variant == "PD":
            return losses.pd_loss(s, inst.teacher_logits, head, tau)
        if variant == "CWD":
            return losses.cwd_loss(s, inst.teacher_logits, head, tau)
        if variant == "AUG_PD":
            return losses.aug_pd_loss(s, inst.teacher_logits, head, inst.covs, lam, inst.classes, tau)
        return losses.aug_cwd_loss(s, inst.teacher_logits, head, inst.covs, lam, inst.classes,
                                   tau, mode)
    return fn


def _net_grad_error(kind: str, seed: int, M=6, in_dim=4, C=3) -> float:
    """Backprop through a toy network under CE + AUG_CWD against finite differences."""
    rng = make_rng(seed)
    spec = ModelSpec(kind, in_dim, in_dim if kind == "identity" else 3, 5, C)
    net = PixelNet.init(spec, rng)
    x = rng.standard_normal((M, in_dim))
    labels = rng.integers(0, C, size=M)
    t = 2.0 * rng.standard_normal((M, C))
    covs = np.stack([random_psd(rng, spec.feat_dim) for _ in range(C)])

    def total(f, head):
        ce = losses.segmentation_ce_loss(f, head, labels)
        kd = losses.aug_cwd_loss(f, t, head, covs, 0.5, labels, 2.0)
        return ce, kd

    def value():
        f, _ = net.forward(x, keep=False)
        ce, kd = total(f, net.head)
        return ce.value + kd.value

    f, _ = net.forward(x)
    ce, kd = total(f, net.head)
    grads = net.backward(ce.grad_features + kd.grad_features, ce.grad_W + kd.grad_W,
                         ce.grad_B + kd.grad_B)
    return max(max_rel_error(grads[k], numeric_grad(value, p, 1e-5)) for k, p in net.params.items())


@_timed
def gradient_check(n_instances=20, seed=0, M=4, A=3, C=3) -> CheckResult:
    """Analytic gradients of every loss and both toy architectures."""
    res = CheckResult("gradients")
    for i in range(n_instances):
        inst = random_instance(seed + i, M, A, C)
        rng = make_rng(10_000 + seed + i)
        lam = float(rng.uniform(0.25, 1.0))
        tau = float(rng.choice([1.0, 2.0, 4.0]))
        cases = [("PD", "-"), ("CWD", "-"), ("AUG_PD", "-"),
                 ("AUG_CWD", "paper_form"), ("AUG_CWD", "exact_diagonal")]
        for variant, mode in cases:
            err = finite_diff_grad_check(_loss_fn(variant, inst, lam, tau, mode), inst.student,
                                         inst.head.W, inst.head.B, 1e-5)
            res.cases += 1
            res.worst = max(res.worst, err)
            if not err <= GRAD_TOL:
                res.failures.append({"check": "gradient", "variant": variant, "mode": mode,
                                     "lambda": lam, "tau": tau, "error": err,
                                     "instance": instance_dump(inst)})
        for kind in ("linear", "mlp"):
            err = _net_grad_error(kind, seed + i)
            res.cases += 1
            res.worst = max(res.worst, err)
            if not err <= GRAD_TOL:
                res.failures.append({"check": "gradient", "architecture": kind,
                                     "seed": seed + i, "error": err})
    return res


@_timed
def streaming_check(n_partitions=50, seed=0, C=4, A=3) -> CheckResult:
    """Split streams of features give the one-shot class statistics; PSD throughout."""
    res = CheckResult("covariance-streaming")
    for i in range(n_partitions):
        rng = make_rng(seed + i)
        n = int(rng.integers(2, 200))
        X = rng.standard_normal((n, A)) * rng.uniform(0.1, 3.0, A) + rng.uniform(-5, 5, A)
        y = rng.integers(0, C, size=n)
        k = int(rng.integers(0, n + 1))
        split = ClassCovarianceStore(C, A)
        worst_eig = np.inf
        for part in (slice(0, k), slice(k, n)):
            split.update(X[part], y[part])
            worst_eig = min(worst_eig, min(np.linalg.eigvalsh(c).min() for c in split.covariances()))
        whole = ClassCovarianceStore(C, A).update(X, y)
        diff = max(np.abs(split.cov - whole.cov).max(), np.abs(split.mean - whole.mean).max())
        res.cases += 1
        res.worst = max(res.worst, float(diff))
        if not (diff <= STREAM_TOL and np.array_equal(split.count, whole.count)
                and worst_eig >= PSD_TOL):
            res.failures.append({"check": "streaming", "seed": seed + i, "split": k,
                                 "max_diff": float(diff), "min_eig": float(worst_eig)})
    return res


@_timed
def monotone_check(n_instances=50, seed=0, M=4, A=3, C=3, taus=(1.0, 4.0)) -> CheckResult:
    """Augmented losses never decrease as lambda grows."""
    res = CheckResult("lambda-monotone")
    for i in range(n_instances):
        inst = random_instance(seed + i, M, A, C)
        for tau in taus:
            for variant, mode in [("AUG_PD", "paper_form"), ("AUG_CWD", "paper_form"),
                                  ("AUG_CWD", "exact_diagonal")]:
                vals = [closed_form(variant, inst, lam, tau, mode) for lam in MONOTONE_LAMBDAS]
                res.cases += 1
                drop = max(0.0, max(a - b for a, b in zip(vals, vals[1:])))
                res.worst = max(res.worst, drop)
                if drop > 0:
                    res.failures.append({"check": "monotone", "variant": variant, "mode": mode,
                                         "tau": tau, "values": vals,
                                         "instance": instance_dump(inst)})
    return res
