"""Synthetic pixel-labelling experiments: data, training, evaluation, reports."""
from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .class_stats import IGNORE_INDEX, ClassCovarianceStore, LambdaSchedule, lambda_schedule
from .errors import FakdError
from .losses import DistillLossSpec, assign_classes, distill_loss, segmentation_ce_loss
from .numerics import make_rng
from .toymodels import ModelSpec, PixelNet, SgdOptimizer, sgd_step

RESULT_FIELDS = [
    "task_id", "seed", "variant", "lambda0", "tau", "steps",
    "mIoU", "mAcc", "per_class_iou", "wall_time_s",
]
NO_DISTILL = "no-distill"


# ---------------------------------------------------------------- data

@dataclass
class SyntheticTask:
    means: np.ndarray  # (C, A_in)
    covs: np.ndarray  # (C, A_in, A_in), unit-noise within-class covariances
    weights: np.ndarray  # (C,) region class frequencies
    image_hw: tuple[int, int] = (16, 16)
    regions: int = 4
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        C, A = self.means.shape
        if C < 2 or self.covs.shape != (C, A, A) or self.weights.shape != (C,):
            raise FakdError("invalid-task-spec", "means/covs/weights shapes disagree")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise FakdError("invalid-task-spec", "class weights must be nonnegative and sum to 1")
        d = np.linalg.norm(self.means[:, None] - self.means[None], axis=2)
        if np.any(d[~np.eye(C, dtype=bool)] == 0):
            raise FakdError("invalid-task-spec", "class means must be pairwise distinct")
        if self.noise < 0 or self.regions < 1 or min(self.image_hw) < 1:
            raise FakdError("invalid-task-spec", "noise >= 0, regions >= 1, image size >= 1")

    @property
    def num_classes(self) -> int:
        return self.means.shape[0]

    @property
    def in_dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def random(cls, num_classes=6, in_dim=8, separation=2.0, anisotropy=4.0,
               imbalance=1.0, image_hw=(16, 16), regions=4, noise=1.0, seed=0):
        """Random class means and rotated anisotropic covariances.

        ``imbalance`` is the geometric ratio between successive class
        frequencies (1.0 gives a balanced task). Covariances have eigenvalues
        spread log-uniformly over ``[1/anisotropy, anisotropy]`` and are
        normalised to unit mean eigenvalue.
        """
        rng = make_rng(seed)
        means = separation * rng.standard_normal((num_classes, in_dim))
        covs = []
        for _ in range(num_classes):
            Q, _ = np.linalg.qr(rng.standard_normal((in_dim, in_dim)))
            ev = np.exp(rng.uniform(-1, 1, in_dim) * np.log(anisotropy))
            ev /= ev.mean()
            covs.append((Q * ev) @ Q.T)
        w = imbalance ** -np.arange(num_classes, dtype=np.float64)
        return cls(means, np.stack(covs), w / w.sum(), tuple(image_hw), regions, noise, seed)


@dataclass
class Dataset:
    pixels: np.ndarray  # (n_images, M, A_in)
    labels: np.ndarray  # (n_images, M)

    def __len__(self):
        return self.pixels.shape[0]


def generate_task(task: SyntheticTask, n_images: int, stream: int = 0) -> Dataset:
    """Images made of Voronoi regions, one class per region.

    Pixel inputs are drawn from the class-conditional Gaussian
    N(mean_c, noise^2 * cov_c). ``stream`` separates train/val draws.
    """
    if n_images < 1:
        raise FakdError("invalid-task-spec", "n_images must be >= 1")
    rng = make_rng(task.seed * 1000 + 17 + stream)
    H, Wd = task.image_hw
    yy, xx = np.mgrid[0:H, 0:Wd]
    coords = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    M = H * Wd
    C, A = task.num_classes, task.in_dim
    chol = np.stack([np.linalg.cholesky(c + 1e-12 * np.eye(A)) for c in task.covs])
    pixels = np.empty((n_images, M, A))
    labels = np.empty((n_images, M), dtype=np.int64)
    for n in range(n_images):
        centers = rng.uniform(0, [H, Wd], size=(task.regions, 2))
        region_cls = rng.choice(C, size=task.regions, p=task.weights)
        nearest = np.argmin(((coords[:, None] - centers[None]) ** 2).sum(-1), axis=1)
        y = region_cls[nearest]
        z = rng.standard_normal((M, A))
        pixels[n] = task.means[y] + task.noise * np.einsum("mab,mb->ma", chol[y], z)
        labels[n] = y
    return Dataset(pixels, labels)


def bayes_predict(task: SyntheticTask, x) -> np.ndarray:
    """Bayes rule of the generative model (class prior = region frequency)."""
    x = np.asarray(x, dtype=np.float64)
    if task.noise == 0:
        d = ((x[:, None] - task.means[None]) ** 2).sum(-1)
        return np.argmin(d, axis=1)
    scores = np.empty((x.shape[0], task.num_classes))
    for c in range(task.num_classes):
        cov = task.noise**2 * task.covs[c]
        L = np.linalg.cholesky(cov)
        r = np.linalg.solve(L, (x - task.means[c]).T)
        logdet = 2 * np.log(np.diag(L)).sum()
        with np.errstate(divide="ignore"):
            prior = np.log(task.weights[c])
        scores[:, c] = prior - 0.5 * logdet - 0.5 * (r**2).sum(0)
    return np.argmax(scores, axis=1)


def two_class_bayes_accuracy(mean0, mean1, cov) -> float:
    """Accuracy of the Bayes rule for two equiprobable classes sharing ``cov``."""
    d = np.asarray(mean1, dtype=np.float64) - np.asarray(mean0, dtype=np.float64)
    delta = np.sqrt(d @ np.linalg.solve(cov, d))
    return float(ndtr(delta / 2))


# ---------------------------------------------------------------- metrics

@dataclass
class EvalResult:
    mIoU: float
    mAcc: float
    per_class_iou: np.ndarray
    confusion: np.ndarray


def confusion_matrix(pred, labels, num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns are predictions; ignored pixels dropped."""
    pred = np.asarray(pred).ravel()
    labels = np.asarray(labels).ravel()
    keep = labels != IGNORE_INDEX
    idx = num_classes * labels[keep].astype(np.int64) + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def metrics_from_confusion(conf) -> EvalResult:
    conf = np.asarray(conf)
    tp = np.diag(conf).astype(np.float64)
    gt = conf.sum(axis=1)
    pr = conf.sum(axis=0)
    union = gt + pr - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)
        recall = np.where(gt > 0, tp / np.where(gt > 0, gt, 1), np.nan)
    present = union > 0
    miou = float(np.mean(iou[present])) if present.any() else 0.0
    macc = float(np.mean(recall[gt > 0])) if (gt > 0).any() else 0.0
    return EvalResult(miou, macc, iou, conf)


def evaluate(net: PixelNet, data: Dataset) -> EvalResult:
    if len(data) == 0:
        raise FakdError("empty-dataset", "nothing to evaluate")
    C = net.spec.num_classes
    pred = net.predict(data.pixels.reshape(-1, data.pixels.shape[-1]))
    return metrics_from_confusion(confusion_matrix(pred, data.labels, C))


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainSpec:
    steps: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    batch_images: int = 4

    def optimizer(self) -> SgdOptimizer:
        return SgdOptimizer(self.lr, self.momentum, 0.9, max(self.steps, 1))


def _batches(n_images, batch, steps, rng):
    for _ in range(steps):
        yield rng.choice(n_images, size=batch, replace=False)


def _check_finite(value, step):
    if not np.isfinite(value):
        raise FakdError("training-diverged", f"loss became {value} at step {step}")


def train_teacher(data: Dataset, spec: ModelSpec, train: TrainSpec, seed: int) -> PixelNet:
    """Plain cross-entropy training. ``train.steps == 0`` returns the initialisation."""
    rng = make_rng(seed)
    net = PixelNet.init(spec, rng)
    if train.steps == 0:
        return net
    opt = train.optimizer()
    velocity: dict = {}
    for step, idx in enumerate(_batches(len(data), train.batch_images, train.steps, rng)):
        x = data.pixels[idx].reshape(-1, spec.in_dim)
        y = data.labels[idx].ravel()
        f, _ = net.forward(x)
        out = segmentation_ce_loss(f, net.head, y)
        _check_finite(out.value, step)
        grads = net.backward(out.grad_features, out.grad_W, out.grad_B)
        sgd_step(net.params, grads, opt, step, velocity)
    return net


@dataclass
class StudentState:
    net: PixelNet
    store: ClassCovarianceStore
    velocity: dict = field(default_factory=dict)


def distill_step(teacher: PixelNet, state: StudentState, x, y, spec: DistillLossSpec | None,
                 sched: LambdaSchedule | None, step: int, opt: SgdOptimizer) -> dict:
    """One training iteration on a batch of images.

    ``x`` is (n_images, M, A_in) and ``y`` is (n_images, M). With ``spec`` None
    (or zero weight) this is plain supervised training. Distillation losses
    are computed per image and averaged over the batch.
    """
    student = state.net
    n_img, M, A_in = x.shape
    flat_x = x.reshape(-1, A_in)
    flat_y = y.ravel()
    _, t_logits = teacher.forward(flat_x, keep=False)
    f, _ = student.forward(flat_x)
    state.store.update(f, flat_y)
    lam = lambda_schedule(step, sched) if sched is not None else 0.0

    head = student.head
    seg = segmentation_ce_loss(f, head, flat_y)
    g_f, g_W, g_B = seg.grad_features.copy(), seg.grad_W.copy(), seg.grad_B.copy()
    kd_value = 0.0
    if spec is not None and spec.weight != 0:
        classes = assign_classes(flat_y, t_logits)
        scale = spec.weight / n_img
        for b in range(n_img):
            rows = slice(b * M, (b + 1) * M)
            out = distill_loss(spec, f[rows], t_logits[rows], head, state.store, lam, classes[rows])
            kd_value += out.value / n_img
            g_f[rows] += scale * out.grad_features
            g_W += scale * out.grad_W
            g_B += scale * out.grad_B
    total = seg.value + (spec.weight * kd_value if spec is not None else 0.0)
    _check_finite(total, step)
    grads = student.backward(g_f, g_W, g_B)
    sgd_step(student.params, grads, opt, step, state.velocity)
    return {"seg": seg.value, "kd": kd_value, "total": total, "lambda": lam}


def train_student(teacher: PixelNet, data: Dataset, model: ModelSpec, train: TrainSpec,
                  spec: DistillLossSpec | None, seed: int, diagonal_cov: bool = False,
                  log: list | None = None) -> StudentState:
    init_rng = make_rng(seed * 7919 + 1)
    batch_rng = make_rng(seed * 7919 + 2)
    state = StudentState(PixelNet.init(model, init_rng),
                         ClassCovarianceStore(model.num_classes, model.feat_dim, diagonal_cov))
    if train.steps == 0:
        return state
    opt = train.optimizer()
    sched = None
    if spec is not None and spec.augmented:
        sched = LambdaSchedule(spec.lambda0, train.steps, spec.schedule)
    for step, idx in enumerate(_batches(len(data), train.batch_images, train.steps, batch_rng)):
        rec = distill_step(teacher, state, data.pixels[idx], data.labels[idx], spec, sched, step, opt)
        if log is not None:
            log.append(rec)
    return state


# ---------------------------------------------------------------- experiments

@dataclass(frozen=True)
class VariantSpec:
    name: str
    loss: DistillLossSpec | None  # None means no distillation

    @property
    def lambda0(self) -> float:
        return self.loss.lambda0 if self.loss is not None and self.loss.augmented else 0.0

    @property
    def tau(self) -> float:
        return self.loss.tau if self.loss is not None else 0.0


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything :func:`run_experiment` needs; built from an ExperimentConfig."""

    task_id: str
    task_kwargs: dict
    teacher: ModelSpec
    student: ModelSpec
    teacher_train: TrainSpec
    student_train: TrainSpec
    variants: tuple[VariantSpec, ...]
    seeds: tuple[int, ...]
    n_train: int = 200
    n_val: int = 100
    diagonal_cov: bool = False
    record_wall_time: bool = False
    jobs: int = 1


@dataclass
class ResultRow:
    task_id: str
    seed: int
    variant: str
    lambda0: float
    tau: float
    steps: int
    result: EvalResult
    wall_time_s: float | None = None

    def as_csv(self) -> dict:
        return {
            "task_id": self.task_id, "seed": self.seed, "variant": self.variant,
            "lambda0": repr(float(self.lambda0)), "tau": repr(float(self.tau)),
            "steps": self.steps, "mIoU": repr(self.result.mIoU), "mAcc": repr(self.result.mAcc),
            "per_class_iou": ";".join(repr(float(v)) for v in self.result.per_class_iou),
            "wall_time_s": "" if self.wall_time_s is None else f"{self.wall_time_s:.3f}",
        }


def _task_for_seed(plan: ExperimentPlan, seed: int):
    task = SyntheticTask.random(seed=seed, **plan.task_kwargs)
    return task, generate_task(task, plan.n_train, 0), generate_task(task, plan.n_val, 1)


def _run_cell(plan: ExperimentPlan, seed: int, teacher: PixelNet, variant: VariantSpec,
              train_data: Dataset, val_data: Dataset) -> ResultRow:
    t0 = time.perf_counter()
    state = train_student(teacher, train_data, plan.student, plan.student_train, variant.loss,
                          seed, plan.diagonal_cov)
    res = evaluate(state.net, val_data)
    wall = time.perf_counter() - t0 if plan.record_wall_time else None
    return ResultRow(plan.task_id, seed, variant.name, variant.lambda0, variant.tau,
                     plan.student_train.steps, res, wall)


def _run_seed(plan: ExperimentPlan, seed: int, variants) -> list[ResultRow]:
    task, train_data, val_data = _task_for_seed(plan, seed)
    teacher = train_teacher(train_data, plan.teacher, plan.teacher_train, seed)
    snapshot = {k: v.copy() for k, v in teacher.params.items()}
    rows = [_run_cell(plan, seed, teacher, v, train_data, val_data) for v in variants]
    for k, v in teacher.params.items():
        if not np.array_equal(v, snapshot[k]):
            raise AssertionError(f"teacher parameter {k} changed during distillation")
    return rows


def run_experiment(plan: ExperimentPlan) -> list[ResultRow]:
    """Train one teacher per seed, then every student variant from the same init."""
    jobs = max(1, plan.jobs)
    if jobs == 1:
        rows = [r for s in plan.seeds for r in _run_seed(plan, s, plan.variants)]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            futs = [ex.submit(_run_seed, plan, s, plan.variants) for s in plan.seeds]
            rows = [r for f in futs for r in f.result()]
    order = {v.name: i for i, v in enumerate(plan.variants)}
    return sorted(rows, key=lambda r: (plan.seeds.index(r.seed), order[r.variant]))


def teacher_metrics(plan: ExperimentPlan, seed: int) -> EvalResult:
    _, train_data, val_data = _task_for_seed(plan, seed)
    return evaluate(train_teacher(train_data, plan.teacher, plan.teacher_train, seed), val_data)


def results_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.as_csv() if isinstance(r, ResultRow) else {k: r[k] for k in RESULT_FIELDS})
    return buf.getvalue()


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _rows_as_dicts(rows):
    return [r.as_csv() if isinstance(r, ResultRow) else r for r in rows]


def summary_table(rows) -> str:
    """Mean and spread of mIoU/mAcc per (variant, lambda0), in first-seen order."""
    groups: dict[tuple, list] = {}
    for r in _rows_as_dicts(rows):
        groups.setdefault((r["variant"], r["lambda0"]), []).append(r)
    w = max([14] + [len(name) + 2 for name, _ in groups])
    lines = [f"{'variant':<{w}}{'lambda0':>8}{'seeds':>7}{'mIoU':>10}{'(std)':>8}{'mAcc':>10}{'(std)':>8}"]
    for (name, lam0), rs in groups.items():
        miou = np.array([float(r["mIoU"]) for r in rs]) * 100
        macc = np.array([float(r["mAcc"]) for r in rs]) * 100
        lines.append(
            f"{name:<{w}}{float(lam0):>8.2f}{len(rs):>7}{miou.mean():>10.2f}{miou.std():>8.2f}"
            f"{macc.mean():>10.2f}{macc.std():>8.2f}"
        )
    return "\n".join(lines)


def mean_miou(rows, variant: str, lambda0: float | None = None) -> float:
    vals = [float(r["mIoU"]) for r in _rows_as_dicts(rows)
            if r["variant"] == variant and (lambda0 is None or float(r["lambda0"]) == lambda0)]
    if not vals:
        raise FakdError("inconsistent-results", f"no rows for variant {variant!r}")
    return float(np.mean(vals))


def per_class_improvement_report(rows, baseline: str = NO_DISTILL):
    """Per-class IoU deltas against ``baseline``, hardest baseline classes first.

    Returns ``(header, table)`` where each table row is
    ``[class_id, baseline_iou, delta_variant_1, ...]``. IoUs are seed means.
    """
    per_variant: dict[str, list[np.ndarray]] = {}
    for r in _rows_as_dicts(rows):
        key = r["variant"] if r["variant"] == baseline or float(r["lambda0"]) == 0 \
            else f"{r['variant']}@{float(r['lambda0']):g}"
        per_variant.setdefault(key, []).append(
            np.array([float(v) for v in r["per_class_iou"].split(";")])
        )
    if baseline not in per_variant:
        raise FakdError("inconsistent-results", f"baseline {baseline!r} missing")
    sizes = {v.size for vs in per_variant.values() for v in vs}
    if len(sizes) != 1:
        raise FakdError("inconsistent-results", f"class counts differ across rows: {sorted(sizes)}")
    means = {k: np.nanmean(np.stack(v), axis=0) for k, v in per_variant.items()}
    base = means[baseline]
    others = [k for k in per_variant if k != baseline]
    order = np.argsort(np.where(np.isnan(base), np.inf, base), kind="stable")
    header = ["class", baseline] + [f"delta_{k}" for k in others]
    table = [[int(c), float(base[c])] + [float(means[k][c] - base[c]) for k in others] for c in order]
    return header, table


def format_report(header, table) -> str:
    lines = ["\t".join(header)]
    for row in table:
        lines.append("\t".join([str(row[0])] + [f"{v:+.4f}" if i else f"{v:.4f}"
                                                for i, v in enumerate(row[1:])]))
    return "\n".join(lines)


def with_variants(plan: ExperimentPlan, variants) -> ExperimentPlan:
    return replace(plan, variants=tuple(variants))
