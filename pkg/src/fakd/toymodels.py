"""Per-pixel networks small enough to backpropagate by hand.

A :class:`PixelNet` is a feature extractor followed by a linear classifier
head. The extractor output is the feature that gets augmented during
distillation.

Parameter snapshot format (``save_params``/``load_params``)::

    fakd-params 1
    <spec as JSON on one line>
    <name> <ndim> <dim_0> ... <dim_k>
    <row-major values>
    ...
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FakdError
from .losses import ClassifierHead

_MAGIC = "fakd-params 1"


@dataclass(frozen=True)
class ModelSpec:
    extractor: str = "linear"  # identity | linear | mlp
    in_dim: int = 8
    feat_dim: int = 8
    hidden: int = 16
    num_classes: int = 6
    init_scale: float = 1.0

    def __post_init__(self):
        if self.extractor not in ("identity", "linear", "mlp"):
            raise FakdError("invalid-model", f"unknown extractor {self.extractor!r}")
        if self.extractor == "identity" and self.feat_dim != self.in_dim:
            raise FakdError("invalid-model", "identity extractor needs feat_dim == in_dim")
        if min(self.in_dim, self.feat_dim, self.hidden) < 1 or self.num_classes < 2:
            raise FakdError("invalid-model", "dimensions must be positive, num_classes >= 2")


class PixelNet:
    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params
        self._cache = None

    @classmethod
    def init(cls, spec: ModelSpec, rng: np.random.Generator) -> "PixelNet":
        def dense(n_out, n_in):
            return spec.init_scale * rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)

        p = {}
        if spec.extractor == "linear":
            p["ext.W"] = dense(spec.feat_dim, spec.in_dim)
            p["ext.b"] = np.zeros(spec.feat_dim)
        elif spec.extractor == "mlp":
            p["ext.W1"] = dense(spec.hidden, spec.in_dim)
            p["ext.b1"] = np.zeros(spec.hidden)
            p["ext.W2"] = dense(spec.feat_dim, spec.hidden)
            p["ext.b2"] = np.zeros(spec.feat_dim)
        p["head.W"] = 0.1 * rng.standard_normal((spec.num_classes, spec.feat_dim))
        p["head.B"] = np.zeros(spec.num_classes)
        return cls(spec, p)

    @property
    def head(self) -> ClassifierHead:
        return ClassifierHead(self.params["head.W"], self.params["head.B"])

    def copy(self) -> "PixelNet":
        return PixelNet(self.spec, {k: v.copy() for k, v in self.params.items()})

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x, keep=False)[0]

    def forward(self, x, keep: bool = True):
        """Return ``(features, logits)``; with ``keep`` the activations are cached for backward."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.spec.in_dim:
            raise FakdError("shape-mismatch", f"expected (M, {self.spec.in_dim}) input, got {x.shape}")
        p = self.params
        kind = self.spec.extractor
        h = None
        if kind == "identity":
            f = x
        elif kind == "linear":
            f = x @ p["ext.W"].T + p["ext.b"]
        else:
            h = np.maximum(x @ p["ext.W1"].T + p["ext.b1"], 0.0)
            f = h @ p["ext.W2"].T + p["ext.b2"]
        logits = f @ p["head.W"].T + p["head.B"]
        if keep:
            self._cache = (x, h)
        return f, logits

    def backward(self, grad_features, grad_W=None, grad_B=None) -> dict[str, np.ndarray]:
        """Gradients for every parameter given dL/dfeatures and the head gradients."""
        if self._cache is None:
            raise FakdError("no-forward-state", "backward called before forward")
        x, h = self._cache
        p = self.params
        g = np.asarray(grad_features, dtype=np.float64)
        grads = {
            "head.W": np.zeros_like(p["head.W"]) if grad_W is None else np.asarray(grad_W),
            "head.B": np.zeros_like(p["head.B"]) if grad_B is None else np.asarray(grad_B),
        }
        kind = self.spec.extractor
        if kind == "linear":
            grads["ext.W"] = g.T @ x
            grads["ext.b"] = g.sum(axis=0)
        elif kind == "mlp":
            grads["ext.W2"] = g.T @ h
            grads["ext.b2"] = g.sum(axis=0)
            gh = (g @ p["ext.W2"]) * (h > 0)
            grads["ext.W1"] = gh.T @ x
            grads["ext.b1"] = gh.sum(axis=0)
        return grads

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x, keep=False)[1], axis=1)


def save_params(net: PixelNet, path) -> None:
    lines = [_MAGIC, json.dumps(asdict(net.spec), sort_keys=True)]
    for name in sorted(net.params):
        arr = net.params[name]
        lines.append(" ".join([name, str(arr.ndim)] + [str(d) for d in arr.shape]))
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> PixelNet:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise FakdError("bad-snapshot", f"{path} is not a parameter snapshot")
    spec = ModelSpec(**json.loads(lines[1]))
    params = {}
    for head, body in zip(lines[2::2], lines[3::2]):
        name, ndim, *dims = head.split()
        shape = tuple(int(d) for d in dims[: int(ndim)])
        params[name] = np.array(body.split(), dtype=np.float64).reshape(shape)
    return PixelNet(spec, params)


@dataclass(frozen=True)
class SgdOptimizer:
    base_lr: float = 0.01
    momentum: float = 0.9
    power: float = 0.9
    max_iter: int = 1000

    def __post_init__(self):
        if not self.base_lr > 0 or not 0 <= self.momentum < 1 or self.max_iter < 1:
            raise FakdError("invalid-optimizer", f"bad optimizer settings {self}")

    def lr(self, step: int) -> float:
        """Poly policy: base_lr * (1 - step / max_iter) ** power."""
        if step >= self.max_iter:
            raise FakdError("schedule-exhausted", f"step {step} >= max_iter {self.max_iter}")
        return self.base_lr * (1.0 - step / self.max_iter) ** self.power


def sgd_step(params, grads, opt: SgdOptimizer, step: int, velocity: dict) -> dict:
    """In-place momentum SGD: v <- m v + g; p <- p - lr v. Returns ``params``."""
    lr = opt.lr(step)
    for name, g in grads.items():
        v = velocity.get(name)
        v = g.copy() if v is None else opt.momentum * v + g
        velocity[name] = v
        params[name] -= lr * v
    return params
