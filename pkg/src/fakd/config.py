"""Experiment configuration: JSON files mapped onto dataclasses.

Every section is optional and falls back to the defaults below. Unknown keys
are rejected with the full path of the offending field, because a mistyped
``lambda0`` would otherwise silently run the default.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import FakdError
from .harness import ExperimentPlan, TrainSpec, VariantSpec
from .losses import DistillLossSpec
from .toymodels import ModelSpec


class ConfigError(FakdError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__("invalid-config", f"{path}: {message}")


@dataclass
class TaskConfig:
    num_classes: int = 6
    in_dim: int = 8
    separation: float = 1.0
    anisotropy: float = 4.0
    imbalance: float = 1.0
    image_hw: list = field(default_factory=lambda: [16, 16])
    regions: int = 4
    noise: float = 1.0


@dataclass
class DataConfig:
    n_train: int = 200
    n_val: int = 100


@dataclass
class ModelConfig:
    extractor: str = "linear"
    feat_dim: int = 8
    hidden: int = 8
    init_scale: float = 1.0


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    batch_images: int = 4


@dataclass
class VariantConfig:
    name: str = "no-distill"
    variant: str | None = None  # PD | CWD | AUG_PD | AUG_CWD; None for no distillation
    tau: float | None = None  # default: 1 for PD variants, 4 for CWD variants
    lambda0: float = 1.0
    weight: float | None = None  # default: 1 for PD variants, 3 for CWD variants
    diagonal_mode: str = "paper_form"
    variance_denominator: str = "tau_squared"
    schedule: str = "cosine"


@dataclass
class VerifyConfig:
    seed: int = 0
    instances: int = 50
    M: int = 4
    A: int = 3
    C: int = 3
    instance_kind: str = "random"  # random | flat
    lambdas: list = field(default_factory=lambda: [0.25, 1.0])
    taus: list = field(default_factory=lambda: [1.0, 4.0])
    diagonal_modes: list = field(default_factory=lambda: ["paper_form", "exact_diagonal"])
    variance_denominator: str = "tau_squared"
    n_samples: int = 10_000
    reduction_instances: int = 100
    grad_instances: int = 20
    mgf_instances: int = 20
    mgf_samples: int = 1_000_000
    stream_partitions: int = 50
    monotone_instances: int = 50


def _default_variants():
    return [
        VariantConfig("no-distill"),
        VariantConfig("PD", "PD"),
        VariantConfig("AUG_PD", "AUG_PD"),
        VariantConfig("CWD", "CWD"),
        VariantConfig("AUG_CWD", "AUG_CWD"),
    ]


@dataclass
class ExperimentConfig:
    task_id: str = "synthetic"
    task: TaskConfig = field(default_factory=TaskConfig)
    data: DataConfig = field(default_factory=DataConfig)
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig("mlp", 8, 64))
    student: ModelConfig = field(default_factory=ModelConfig)
    teacher_train: TrainConfig = field(default_factory=TrainConfig)
    student_train: TrainConfig = field(default_factory=lambda: TrainConfig(500, 0.01))
    variants: list = field(default_factory=_default_variants)
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    diagonal_cov: bool = False
    record_wall_time: bool = False
    jobs: int = 1
    output_dir: str = "out"
    verify: VerifyConfig = field(default_factory=VerifyConfig)


_NESTED = {"variants": VariantConfig}


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return value
    return value


def from_dict(cls, data, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(path or "<root>", f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown key")
    kwargs = {}
    for name in names:
        if name not in data:
            continue
        sub = f"{path}.{name}" if path else name
        value = data[name]
        if name in _NESTED and cls is ExperimentConfig:
            if not isinstance(value, list):
                raise ConfigError(sub, "expected a list")
            kwargs[name] = [from_dict(_NESTED[name], v, f"{sub}[{i}]") for i, v in enumerate(value)]
        else:
            kwargs[name] = _coerce(value, hints[name], sub)
    return cls(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from exc
    cfg = from_dict(ExperimentConfig, raw)
    validate(cfg)
    return cfg


def _loss_spec(v: VariantConfig, path: str) -> DistillLossSpec | None:
    if v.variant is None:
        return None
    pd_like = v.variant in ("PD", "AUG_PD")
    try:
        return DistillLossSpec(
            variant=v.variant,
            tau=v.tau if v.tau is not None else (1.0 if pd_like else 4.0),
            lambda0=v.lambda0,
            weight=v.weight if v.weight is not None else (1.0 if pd_like else 3.0),
            diagonal_mode=v.diagonal_mode,
            variance_denominator=v.variance_denominator,
            schedule=v.schedule,
        )
    except FakdError as exc:
        raise ConfigError(path, str(exc)) from exc


def validate(cfg: ExperimentConfig) -> None:
    """Raise :class:`ConfigError` naming the first bad field."""
    t = cfg.task
    if t.num_classes < 2:
        raise ConfigError("task.num_classes", "need at least two classes")
    if t.in_dim < 1:
        raise ConfigError("task.in_dim", "must be positive")
    if t.noise < 0:
        raise ConfigError("task.noise", "must be >= 0")
    if t.imbalance <= 0:
        raise ConfigError("task.imbalance", "must be > 0")
    if len(t.image_hw) != 2 or any(not isinstance(d, int) or d < 1 for d in t.image_hw):
        raise ConfigError("task.image_hw", "expected [height, width] of positive integers")
    if t.regions < 1:
        raise ConfigError("task.regions", "must be positive")
    for name in ("n_train", "n_val"):
        if getattr(cfg.data, name) < 1:
            raise ConfigError(f"data.{name}", "must be positive")
    for name in ("teacher", "student"):
        m = getattr(cfg, name)
        try:
            _model_spec(m, cfg.task)
        except FakdError as exc:
            raise ConfigError(name, str(exc)) from exc
    for name in ("teacher_train", "student_train"):
        tr = getattr(cfg, name)
        if tr.steps < 0:
            raise ConfigError(f"{name}.steps", "must be >= 0")
        if tr.lr <= 0:
            raise ConfigError(f"{name}.lr", "must be > 0")
        if not 0 <= tr.momentum < 1:
            raise ConfigError(f"{name}.momentum", "must be in [0, 1)")
        if not 1 <= tr.batch_images <= cfg.data.n_train:
            raise ConfigError(f"{name}.batch_images", "must be in [1, data.n_train]")
    if not cfg.variants:
        raise ConfigError("variants", "at least one variant required")
    names = [v.name for v in cfg.variants]
    if len(set(names)) != len(names):
        raise ConfigError("variants", "variant names must be unique")
    for i, v in enumerate(cfg.variants):
        _loss_spec(v, f"variants[{i}]")
    if not cfg.seeds or any(not isinstance(s, int) or s < 0 for s in cfg.seeds):
        raise ConfigError("seeds", "expected a nonempty list of nonnegative integers")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("seeds", "seeds must be unique")
    if cfg.jobs < 1:
        raise ConfigError("jobs", "must be >= 1")
    vc = cfg.verify
    if vc.instance_kind not in ("random", "flat"):
        raise ConfigError("verify.instance_kind", "expected 'random' or 'flat'")
    if vc.n_samples < 2:
        raise ConfigError("verify.n_samples", "must be >= 2")
    if any(not isinstance(x, (int, float)) or x < 0 for x in vc.lambdas):
        raise ConfigError("verify.lambdas", "expected nonnegative numbers")
    if any(not isinstance(x, (int, float)) or x <= 0 for x in vc.taus):
        raise ConfigError("verify.taus", "expected positive numbers")
    for m in vc.diagonal_modes:
        if m not in ("paper_form", "exact_diagonal"):
            raise ConfigError("verify.diagonal_modes", f"unknown mode {m!r}")
    if vc.variance_denominator not in ("tau_squared", "tau"):
        raise ConfigError("verify.variance_denominator", "expected 'tau_squared' or 'tau'")
    if min(vc.M, vc.A) < 1 or vc.C < 2:
        raise ConfigError("verify", "M, A must be >= 1 and C >= 2")


def _model_spec(m: ModelConfig, task: TaskConfig) -> ModelSpec:
    feat = task.in_dim if m.extractor == "identity" else m.feat_dim
    return ModelSpec(m.extractor, task.in_dim, feat, m.hidden, task.num_classes, m.init_scale)


def to_plan(cfg: ExperimentConfig) -> ExperimentPlan:
    t = cfg.task
    task_kwargs = dict(
        num_classes=t.num_classes, in_dim=t.in_dim, separation=t.separation,
        anisotropy=t.anisotropy, imbalance=t.imbalance, image_hw=tuple(t.image_hw),
        regions=t.regions, noise=t.noise,
    )
    variants = tuple(
        VariantSpec(v.name, _loss_spec(v, f"variants[{i}]")) for i, v in enumerate(cfg.variants)
    )

    def train(tc: TrainConfig) -> TrainSpec:
        return TrainSpec(tc.steps, tc.lr, tc.momentum, tc.batch_images)

    return ExperimentPlan(
        task_id=cfg.task_id,
        task_kwargs=task_kwargs,
        teacher=_model_spec(cfg.teacher, t),
        student=_model_spec(cfg.student, t),
        teacher_train=train(cfg.teacher_train),
        student_train=train(cfg.student_train),
        variants=variants,
        seeds=tuple(cfg.seeds),
        n_train=cfg.data.n_train,
        n_val=cfg.data.n_val,
        diagonal_cov=cfg.diagonal_cov,
        record_wall_time=cfg.record_wall_time,
        jobs=cfg.jobs,
    )


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)
