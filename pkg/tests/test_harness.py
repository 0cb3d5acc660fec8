import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fakd.class_stats import ClassCovarianceStore
from fakd.errors import FakdError
from fakd.harness import (
    NO_DISTILL,
    RESULT_FIELDS,
    Dataset,
    ExperimentPlan,
    SyntheticTask,
    TrainSpec,
    VariantSpec,
    bayes_predict,
    confusion_matrix,
    evaluate,
    generate_task,
    mean_miou,
    metrics_from_confusion,
    per_class_improvement_report,
    read_results_csv,
    results_csv,
    run_experiment,
    summary_table,
    train_student,
    train_teacher,
    two_class_bayes_accuracy,
)
from fakd.losses import DistillLossSpec
from fakd.numerics import make_rng
from fakd.toymodels import ModelSpec, PixelNet

SMALL_TASK = dict(num_classes=3, in_dim=4, separation=2.0, anisotropy=2.0, image_hw=(6, 6),
                  regions=3)
TEACHER = ModelSpec("mlp", 4, 4, 16, 3)
STUDENT = ModelSpec("linear", 4, 4, 4, 3)


def small_data(seed=0, n=12):
    task = SyntheticTask.random(seed=seed, **SMALL_TASK)
    return task, generate_task(task, n, 0), generate_task(task, 6, 1)


def small_plan(variants, seeds=(0,), steps=30, **kw):
    return ExperimentPlan("t", SMALL_TASK, TEACHER, STUDENT, TrainSpec(60, 0.05, 0.9, 2),
                          TrainSpec(steps, 0.02, 0.9, 2), tuple(variants), tuple(seeds),
                          n_train=8, n_val=4, **kw)


# ---------------------------------------------------------------- data

def test_same_seed_identical_dataset():
    task = SyntheticTask.random(seed=3, **SMALL_TASK)
    a, b = generate_task(task, 5), generate_task(task, 5)
    assert np.array_equal(a.pixels, b.pixels) and np.array_equal(a.labels, b.labels)
    c = generate_task(task, 5, stream=1)
    assert not np.array_equal(a.pixels, c.pixels)


def test_regions_are_contiguous_and_labelled():
    task = SyntheticTask.random(seed=1, **SMALL_TASK)
    d = generate_task(task, 3)
    assert d.pixels.shape == (3, 36, 4) and d.labels.shape == (3, 36)
    assert set(np.unique(d.labels)) <= {0, 1, 2}


def test_zero_noise_bayes_is_perfect():
    task = SyntheticTask.random(seed=2, noise=0.0, **{k: v for k, v in SMALL_TASK.items()})
    d = generate_task(task, 4)
    pred = bayes_predict(task, d.pixels.reshape(-1, 4))
    res = metrics_from_confusion(confusion_matrix(pred, d.labels, 3))
    assert res.mIoU == 1.0 and res.mAcc == 1.0


def test_two_class_bayes_accuracy_matches_sampling():
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    m0, m1 = np.array([0.0, 0.0]), np.array([1.0, 0.5])
    task = SyntheticTask(np.stack([m0, m1]), np.stack([cov, cov]), np.array([0.5, 0.5]),
                         (32, 32), 6, 1.0, 4)
    d = generate_task(task, 40)
    pred = bayes_predict(task, d.pixels.reshape(-1, 2))
    acc = float(np.mean(pred == d.labels.ravel()))
    assert acc == pytest.approx(two_class_bayes_accuracy(m0, m1, cov), abs=0.01)


@pytest.mark.parametrize("bad", [
    dict(means=np.zeros((2, 2))),
    dict(weights=np.array([0.7, 0.7])),
    dict(noise=-1.0),
])
def test_invalid_task_spec(bad):
    kw = dict(means=np.eye(2), covs=np.stack([np.eye(2)] * 2), weights=np.array([0.5, 0.5]))
    kw.update(bad)
    with pytest.raises(FakdError, match="invalid-task-spec"):
        SyntheticTask(**kw)


def test_imbalance_weights_geometric():
    task = SyntheticTask.random(num_classes=4, imbalance=2.0)
    np.testing.assert_allclose(task.weights, np.array([8, 4, 2, 1]) / 15)


# ---------------------------------------------------------------- metrics

def test_confusion_example():
    res = metrics_from_confusion(np.array([[50, 50], [0, 100]]))
    np.testing.assert_allclose(res.per_class_iou, [0.5, 100 / 150])
    assert res.mIoU == pytest.approx((0.5 + 2 / 3) / 2, abs=1e-15)
    assert res.mAcc == pytest.approx(0.75, abs=1e-15)


def test_perfect_and_empty_intersection():
    y = np.array([0, 1, 2, 2])
    assert metrics_from_confusion(confusion_matrix(y, y, 3)).mIoU == 1.0
    res = metrics_from_confusion(confusion_matrix((y + 1) % 3, y, 3))
    assert res.mIoU == 0.0 and res.mAcc == 0.0


def test_absent_classes_excluded():
    res = metrics_from_confusion(confusion_matrix(np.array([0, 0, 1]), np.array([0, 0, 1]), 4))
    assert res.mIoU == 1.0
    assert np.isnan(res.per_class_iou[2:]).all()


def test_ignored_pixels_dropped():
    conf = confusion_matrix(np.array([0, 1, 1]), np.array([0, 255, 1]), 2)
    assert conf.sum() == 2


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=60))
def test_metric_ranges(pairs):
    pred, lab = np.array(pairs).T
    conf = confusion_matrix(pred, lab, 4)
    res = metrics_from_confusion(conf)
    assert 0 <= res.mIoU <= 1 and 0 <= res.mAcc <= 1
    assert conf.sum() == len(pairs)
    np.testing.assert_array_equal(conf.sum(1), np.bincount(lab, minlength=4))


# ---------------------------------------------------------------- training

def test_teacher_zero_steps_is_init():
    _, train, _ = small_data()
    net = train_teacher(train, TEACHER, TrainSpec(0), seed=5)
    ref = PixelNet.init(TEACHER, make_rng(5))
    for k in ref.params:
        assert np.array_equal(net.params[k], ref.params[k])


def test_teacher_reproducible():
    _, train, _ = small_data()
    a = train_teacher(train, TEACHER, TrainSpec(20, 0.05, 0.9, 2), seed=1)
    b = train_teacher(train, TEACHER, TrainSpec(20, 0.05, 0.9, 2), seed=1)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_teacher_learns_separable_task():
    kw = dict(SMALL_TASK, separation=4.0, noise=0.3)
    task = SyntheticTask.random(seed=0, **kw)
    train, val = generate_task(task, 20, 0), generate_task(task, 10, 1)
    net = train_teacher(train, TEACHER, TrainSpec(600, 0.05, 0.9, 4), seed=0)
    assert evaluate(net, val).mIoU >= 0.95


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_teacher_divergence_reported():
    _, train, _ = small_data()
    with pytest.raises(FakdError, match="training-diverged"):
        train_teacher(train, TEACHER, TrainSpec(50, 1e6, 0.9, 2), seed=0)


def test_weight_zero_matches_plain_training():
    _, train, _ = small_data()
    teacher = train_teacher(train, TEACHER, TrainSpec(30, 0.05, 0.9, 2), 0)
    spec = DistillLossSpec("AUG_CWD", weight=0.0)
    a = train_student(teacher, train, STUDENT, TrainSpec(25, 0.02, 0.9, 2), spec, 3)
    b = train_student(teacher, train, STUDENT, TrainSpec(25, 0.02, 0.9, 2), None, 3)
    for k in a.net.params:
        assert np.array_equal(a.net.params[k], b.net.params[k])


def test_lambda_zero_aug_cwd_matches_cwd_losses():
    _, train, _ = small_data()
    teacher = train_teacher(train, TEACHER, TrainSpec(30, 0.05, 0.9, 2), 0)
    logs = []
    for spec in (DistillLossSpec("AUG_CWD", lambda0=0.0), DistillLossSpec("CWD")):
        log = []
        train_student(teacher, train, STUDENT, TrainSpec(25, 0.02, 0.9, 2), spec, 3, log=log)
        logs.append([(r["seg"], r["kd"], r["total"]) for r in log])
    assert logs[0] == logs[1]


def test_teacher_frozen_and_store_matches_recomputation():
    _, train, _ = small_data()
    teacher = train_teacher(train, TEACHER, TrainSpec(30, 0.05, 0.9, 2), 0)
    before = {k: v.copy() for k, v in teacher.params.items()}

    # replay the batch stream and record the features seen at each step
    seen = []
    orig = ClassCovarianceStore.update

    def spy(self, features, labels):
        seen.append((features.copy(), labels.copy()))
        return orig(self, features, labels)

    ClassCovarianceStore.update = spy
    try:
        state = train_student(teacher, train, STUDENT, TrainSpec(15, 0.02, 0.9, 2),
                              DistillLossSpec("AUG_PD"), 1)
    finally:
        ClassCovarianceStore.update = orig
    for k in before:
        assert np.array_equal(before[k], teacher.params[k])
    X = np.concatenate([f for f, _ in seen])
    y = np.concatenate([lab for _, lab in seen])
    for c in range(3):
        xc = X[y == c]
        assert state.store.count[c] == len(xc)
        if len(xc):
            np.testing.assert_allclose(state.store.mean[c], xc.mean(0), atol=1e-12)
            np.testing.assert_allclose(state.store.get_cov(c), np.cov(xc.T, bias=True),
                                       atol=1e-10)


def test_combined_loss_decreases():
    kw = dict(SMALL_TASK, separation=2.0)
    task = SyntheticTask.random(seed=0, **kw)
    train = generate_task(task, 10)
    teacher = train_teacher(train, TEACHER, TrainSpec(200, 0.05, 0.9, 2), 0)
    firsts, lasts = [], []
    for seed in range(3):
        log = []
        train_student(teacher, train, STUDENT, TrainSpec(200, 0.02, 0.9, 2),
                      DistillLossSpec("AUG_CWD"), seed, log=log)
        totals = [r["total"] for r in log]
        firsts.append(np.mean(totals[:20]))
        lasts.append(np.mean(totals[-20:]))
    assert np.mean(lasts) < np.mean(firsts)


# ---------------------------------------------------------------- experiments

VARIANTS = [VariantSpec(NO_DISTILL, None), VariantSpec("PD", DistillLossSpec("PD", tau=1.0, weight=1.0)),
            VariantSpec("AUG_CWD", DistillLossSpec("AUG_CWD"))]


def test_single_variant_single_row():
    rows = run_experiment(small_plan([VariantSpec(NO_DISTILL, None)]))
    assert len(rows) == 1 and rows[0].variant == NO_DISTILL and rows[0].lambda0 == 0.0


def test_rows_are_seeds_times_variants_and_deterministic(tmp_path):
    plan = small_plan(VARIANTS, seeds=(0, 1))
    rows = run_experiment(plan)
    assert len(rows) == 6
    assert [(r.seed, r.variant) for r in rows] == [(s, v.name) for s in (0, 1) for v in VARIANTS]
    text = results_csv(rows)
    assert text == results_csv(run_experiment(plan))
    assert text.splitlines()[0] == ",".join(RESULT_FIELDS)
    p = tmp_path / "r.csv"
    p.write_text(text)
    back = read_results_csv(p)
    assert results_csv(back) == text
    assert "AUG_CWD" in summary_table(back)
    assert mean_miou(back, "PD") == pytest.approx(np.mean([r.result.mIoU for r in rows
                                                           if r.variant == "PD"]))


def test_parallel_matches_serial():
    plan = small_plan(VARIANTS[:2], seeds=(0, 1))
    serial = results_csv(run_experiment(plan))
    from dataclasses import replace
    assert results_csv(run_experiment(replace(plan, jobs=2))) == serial


def test_wall_time_recorded_only_on_request():
    rows = run_experiment(small_plan(VARIANTS[:1], record_wall_time=True))
    assert rows[0].wall_time_s is not None and rows[0].as_csv()["wall_time_s"] != ""
    assert run_experiment(small_plan(VARIANTS[:1]))[0].as_csv()["wall_time_s"] == ""


def _row(variant, ious, lam="0.0", seed=0):
    return {"task_id": "t", "seed": seed, "variant": variant, "lambda0": lam, "tau": "1.0",
            "steps": 1, "mIoU": repr(float(np.nanmean(ious))), "mAcc": "0.5",
            "per_class_iou": ";".join(repr(float(v)) for v in ious), "wall_time_s": ""}


def test_report_identical_variants_zero_delta():
    rows = [_row(NO_DISTILL, [0.2, 0.9, 0.5]), _row("PD", [0.2, 0.9, 0.5])]
    header, table = per_class_improvement_report(rows)
    assert header == ["class", NO_DISTILL, "delta_PD"]
    assert len(table) == 3
    assert [r[0] for r in table] == [0, 2, 1]
    assert all(r[2] == 0.0 for r in table)


def test_report_deltas_from_confusions():
    base = metrics_from_confusion(np.array([[50, 50], [0, 100]])).per_class_iou
    better = metrics_from_confusion(np.array([[75, 25], [0, 100]])).per_class_iou
    rows = [_row(NO_DISTILL, base), _row("AUG_CWD", better, lam="1.0")]
    header, table = per_class_improvement_report(rows)
    assert header[-1] == "delta_AUG_CWD@1"
    # class 0: 50/100 -> 75/100; class 1: 100/150 -> 100/125
    assert table[0][0] == 0 and table[0][2] == pytest.approx(0.25, abs=1e-15)
    assert table[1][2] == pytest.approx(100 / 125 - 100 / 150, abs=1e-15)


def test_report_inconsistent_classes():
    with pytest.raises(FakdError, match="inconsistent-results"):
        per_class_improvement_report([_row(NO_DISTILL, [0.1, 0.2]), _row("PD", [0.1, 0.2, 0.3])])
    with pytest.raises(FakdError, match="inconsistent-results"):
        per_class_improvement_report([_row("PD", [0.1, 0.2])])


def test_evaluate_counts_every_pixel():
    _, _, val = small_data()
    net = PixelNet.init(STUDENT, make_rng(0))
    res = evaluate(net, val)
    assert res.confusion.sum() == val.labels.size
    with pytest.raises(FakdError):
        evaluate(net, Dataset(np.zeros((0, 36, 4)), np.zeros((0, 36), dtype=int)))
