"""Streaming per-class feature statistics and the lambda ramp.

Snapshot text format (``save``/``load``), one item per line::

    fakd-class-stats 1
    C A diagonal
    # then, for each class c = 0..C-1:
    n_c
    mu_c[0] ... mu_c[A-1]
    Sigma_c row-major, A*A values

Floats are written with ``repr`` so a round trip is exact.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FakdError

IGNORE_INDEX = 255

_MAGIC = "fakd-class-stats 1"


class ClassCovarianceStore:
    """Per-class mean, population covariance and count.

    Batches are merged with the pairwise (Chan et al.) update, so the stored
    values equal the statistics of everything seen so far regardless of how
    the stream was split.
    """

    def __init__(self, num_classes: int, dim: int, diagonal: bool = False):
        if num_classes < 1 or dim < 1:
            raise FakdError("shape-mismatch", "num_classes and dim must be positive")
        self.num_classes = num_classes
        self.dim = dim
        self.diagonal = diagonal
        self.mean = np.zeros((num_classes, dim))
        self.cov = np.zeros((num_classes, dim, dim))
        self.count = np.zeros(num_classes, dtype=np.int64)

    def update(self, features, labels) -> "ClassCovarianceStore":
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels).ravel()
        if features.ndim != 2 or features.shape[1] != self.dim:
            raise FakdError(
                "shape-mismatch", f"expected (m, {self.dim}) features, got {features.shape}"
            )
        if labels.shape[0] != features.shape[0]:
            raise FakdError("shape-mismatch", "one label per feature row required")
        for c in np.unique(labels):
            if c == IGNORE_INDEX:
                continue
            if not 0 <= c < self.num_classes:
                raise FakdError("unknown-class", f"label {c} outside [0, {self.num_classes})")
            x = features[labels == c]
            self._merge(int(c), x)
        return self

    def _merge(self, c: int, x: np.ndarray) -> None:
        m = x.shape[0]
        mu_b = x.mean(axis=0)
        d = x - mu_b
        cov_b = d.T @ d / m
        if self.diagonal:
            cov_b = np.diag(np.diag(cov_b))
        n = int(self.count[c])
        if n == 0:
            self.mean[c], self.cov[c] = mu_b, cov_b
        else:
            tot = n + m
            delta = self.mean[c] - mu_b
            outer = np.outer(delta, delta)
            if self.diagonal:
                outer = np.diag(np.diag(outer))
            self.cov[c] = (n * self.cov[c] + m * cov_b + (n * m / tot) * outer) / tot
            self.mean[c] = (n * self.mean[c] + m * mu_b) / tot
        self.cov[c] = 0.5 * (self.cov[c] + self.cov[c].T)
        self.count[c] += m

    def get_cov(self, class_id: int) -> np.ndarray:
        if not 0 <= class_id < self.num_classes:
            raise FakdError("unknown-class", f"class {class_id} outside [0, {self.num_classes})")
        return self.cov[class_id].copy()

    def covariances(self) -> np.ndarray:
        """All covariances stacked as (C, A, A)."""
        return self.cov

    def copy(self) -> "ClassCovarianceStore":
        other = ClassCovarianceStore(self.num_classes, self.dim, self.diagonal)
        other.mean = self.mean.copy()
        other.cov = self.cov.copy()
        other.count = self.count.copy()
        return other

    def save(self, path) -> None:
        lines = [_MAGIC, f"{self.num_classes} {self.dim} {int(self.diagonal)}"]
        for c in range(self.num_classes):
            lines.append(str(int(self.count[c])))
            lines.append(" ".join(repr(float(v)) for v in self.mean[c]))
            lines.append(" ".join(repr(float(v)) for v in self.cov[c].ravel()))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ClassCovarianceStore":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != _MAGIC:
            raise FakdError("bad-snapshot", f"{path} is not a class-stats snapshot")
        C, A, diag = (int(t) for t in lines[1].split())
        store = cls(C, A, bool(diag))
        body = lines[2:]
        if len(body) != 3 * C:
            raise FakdError("bad-snapshot", f"expected {3 * C} class lines, got {len(body)}")
        for c in range(C):
            store.count[c] = int(body[3 * c])
            store.mean[c] = np.array(body[3 * c + 1].split(), dtype=np.float64)
            store.cov[c] = np.array(body[3 * c + 2].split(), dtype=np.float64).reshape(A, A)
        return store


@dataclass(frozen=True)
class LambdaSchedule:
    lambda0: float
    total_steps: int
    kind: str = "cosine"  # or "linear"

    def __post_init__(self):
        if self.lambda0 < 0:
            raise FakdError("invalid-lambda", f"lambda0 must be >= 0, got {self.lambda0}")
        if self.total_steps < 1:
            raise FakdError("invalid-step", "total_steps must be positive")
        if self.kind not in ("cosine", "linear"):
            raise FakdError("invalid-schedule", f"unknown schedule kind {self.kind!r}")


def lambda_schedule(step: int, sched: LambdaSchedule) -> float:
    """Ramp from 0 at step 0 to ``lambda0`` at ``total_steps``."""
    T = sched.total_steps
    if not 0 <= step <= T:
        raise FakdError("invalid-step", f"step {step} outside [0, {T}]")
    if sched.kind == "linear":
        return sched.lambda0 * step / T
    return sched.lambda0 * (1.0 - math.cos(math.pi * step / T)) / 2.0
