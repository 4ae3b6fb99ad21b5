import os
import sys
from dataclasses import replace

import numpy as np
import pytest

# Ensure we can import from repo root
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from main import InvalidInputError
from modules.datagen import (
    LabeledDataset,
    MixtureComponent,
    MixtureSpec,
    NoiseSpec,
    Provenance,
    UnlabeledPool,
    gen_gaussian_mixture,
    gen_toy_segmentation,
    split_labeled_unlabeled,
    toy_classification_spec,
)
from modules.experiment_config import load_config_file, parse_experiment
from modules.losses import LossFamily, RobustLossConfig
from modules.model import Architecture, SgdConfig, evaluate_accuracy
from modules.pipeline import (
    LOWER_BOUND,
    STUDENT_CE,
    UPPER_BOUND,
    ClassGrouping,
    ExperimentConfig,
    MetricSummary,
    PseudoLabeledSet,
    confusion_counts,
    dice_score,
    evaluate_segmentation,
    generate_pseudo_labels,
    run_bounds,
    run_experiment,
    run_sweep,
    train_student,
    train_teacher,
)

FAST = SgdConfig(learning_rate=0.05, epochs=15, batch_size=32, seed=1)


def _separable(seed=0, count=150):
    eye = np.eye(2)
    spec = MixtureSpec(
        components=(
            MixtureComponent((0.0, 0.0), eye, count, 0),
            MixtureComponent((7.0, 0.0), eye, count, 1),
            MixtureComponent((3.5, 6.0), eye, count, 2),
        ),
        num_classes=3,
    )
    return gen_gaussian_mixture(spec, seed)


def test_teacher_learns_separable_subset():
    ds = _separable()
    labeled, _pool = split_labeled_unlabeled(ds, 0.3, seed=4)
    teacher = train_teacher(labeled, FAST)
    assert evaluate_accuracy(teacher, labeled) >= 0.95


def test_teacher_refuses_pseudo_labels():
    ds = _separable(count=10)
    pseudo = LabeledDataset.from_arrays(ds.features, ds.labels, 3, Provenance.PSEUDO_LABEL)
    with pytest.raises(InvalidInputError):
        train_teacher(pseudo, FAST)


def test_pseudo_labels_follow_teacher_and_carry_confidence():
    ds = _separable(seed=2)
    teacher = train_teacher(ds, FAST)
    pseudo = generate_pseudo_labels(teacher, ds.features)
    assert np.mean(pseudo.pseudo_labels == ds.labels) >= 0.95
    assert np.all((pseudo.confidence > 0.0) & (pseudo.confidence <= 1.0))
    assert pseudo.to_dataset().provenance_set() == {Provenance.PSEUDO_LABEL}
    confident = generate_pseudo_labels(teacher, ds.features, min_confidence=0.9)
    assert confident.n <= pseudo.n
    assert np.all(confident.confidence >= 0.9)
    with pytest.raises(InvalidInputError):
        generate_pseudo_labels(teacher, np.zeros((4, 3)))


def test_student_with_empty_pseudo_set_equals_teacher():
    ds = _separable(seed=3, count=40)
    labeled, _pool = split_labeled_unlabeled(ds, 0.5, seed=1)
    teacher = train_teacher(labeled, FAST)
    empty = PseudoLabeledSet(np.empty((0, 2)), np.empty(0, dtype=np.int64), np.empty(0), 3)
    student = train_student(labeled, empty, RobustLossConfig(family=LossFamily.BCE, beta=5.0), FAST)
    for a, b in zip(teacher.layers, student.layers):
        assert np.array_equal(a.weights, b.weights)


def test_student_with_ce_is_plain_pseudo_labelling():
    ds = _separable(seed=5, count=60)
    labeled, pool = split_labeled_unlabeled(ds, 0.2, seed=2)
    teacher = train_teacher(labeled, FAST)
    pseudo = generate_pseudo_labels(teacher, pool)
    ce_student = train_student(labeled, pseudo, RobustLossConfig.cross_entropy(), FAST)
    assert evaluate_accuracy(ce_student, ds) >= 0.9


def test_confusion_counts_agree_with_accuracy():
    ds = _separable(seed=7, count=50)
    teacher = train_teacher(ds, FAST)
    counts = confusion_counts(teacher, ds)
    assert counts.shape == (3, 3)
    assert counts.sum() == ds.n
    assert np.trace(counts) / ds.n == pytest.approx(evaluate_accuracy(teacher, ds))


def test_run_bounds_upper_not_worse_on_clean_data():
    ds = _separable(seed=6, count=80)
    lower, upper = run_bounds(ds, 0.1, FAST, split_seed=3)
    assert evaluate_accuracy(upper, ds) >= evaluate_accuracy(lower, ds) - 0.02


def test_dice_examples():
    grid = np.array([[1, 1], [0, 2]])
    assert dice_score(grid, grid, {1}) == 1.0
    assert dice_score(np.array([1, 1, 0, 0]), np.array([0, 0, 1, 1]), {1}) == 0.0
    pred = np.array([1, 1, 1, 1, 0, 0])
    truth = np.array([0, 0, 1, 1, 1, 1])
    assert dice_score(pred, truth, {1}) == 0.5
    assert dice_score(np.zeros(4), np.zeros(4), {3}) == 1.0
    with pytest.raises(InvalidInputError):
        dice_score(np.zeros(3), np.zeros(4), {1})


def test_evaluate_segmentation_oracle_and_background():
    scenes = gen_toy_segmentation(3, 16, 16, seed=2)
    groups = [ClassGrouping("lesion", (1, 2, 3)), ClassGrouping("all", (0, 1, 2, 3))]
    oracle = evaluate_segmentation(lambda scene: scene.label_grid, scenes, groups)
    assert oracle == {"lesion": 1.0, "all": 1.0}
    background = evaluate_segmentation(lambda scene: np.zeros(scene.shape, dtype=int), scenes, groups)
    assert background["lesion"] == 0.0


def test_metric_summary_std_rules():
    single = MetricSummary.from_values([0.7])
    assert single.std is None and single.mean == 0.7
    many = MetricSummary.from_values([0.1, 0.2, 0.3])
    assert many.mean == pytest.approx(0.2)
    assert many.std == pytest.approx(0.1)


def _small_classification(**overrides):
    base = dict(
        task="classification",
        labeled_fraction=0.1,
        teacher_sgd=SgdConfig(learning_rate=0.05, epochs=8, batch_size=32),
        student_sgd=SgdConfig(learning_rate=0.05, epochs=8, batch_size=32),
        robust_losses=(RobustLossConfig(family=LossFamily.BCE, beta=5.0),),
        architecture=Architecture(hidden=(8,)),
        repeats=2,
        seed=5,
        mixture=toy_classification_spec(count_per_class=60),
        test_count_per_class=50,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def test_experiment_config_validation():
    with pytest.raises(InvalidInputError):
        _small_classification(labeled_fraction=1.0)
    with pytest.raises(InvalidInputError):
        _small_classification(repeats=0)
    with pytest.raises(InvalidInputError):
        _small_classification(robust_losses=(RobustLossConfig(family="gce"), RobustLossConfig(family="gce", q_exponent=0.9)))
    cfg = _small_classification()
    assert cfg.arm_names == [LOWER_BOUND, STUDENT_CE, "student_bce", UPPER_BOUND]


def test_run_experiment_shape_and_determinism():
    cfg = _small_classification()
    first = run_experiment(cfg)
    second = run_experiment(cfg)
    assert first.arms == cfg.arm_names
    assert len(first.repeats) == 2
    for arm in first.arms:
        assert first.summary[arm]["accuracy"].values == second.summary[arm]["accuracy"].values
        assert first.summary[arm]["accuracy"].std is not None
    assert first.teacher_pseudo_error is not None


def test_single_repeat_has_no_std():
    result = run_experiment(_small_classification(repeats=1))
    assert all(s["accuracy"].std is None for s in result.summary.values())


def test_pseudo_noise_raises_recorded_error_rate():
    result = run_experiment(_small_classification(repeats=1, pseudo_noise=NoiseSpec(0.4)))
    assert result.pseudo_label_error.mean > result.teacher_pseudo_error.mean


def test_run_sweep_gives_one_block_per_fraction():
    results = run_sweep(_small_classification(repeats=1), [0.3, 0.5])
    assert [r.labeled_fraction for r in results] == [0.3, 0.5]


def test_segmentation_experiment_reports_dice():
    cfg = ExperimentConfig(
        task="segmentation",
        labeled_fraction=0.5,
        teacher_sgd=SgdConfig(learning_rate=0.05, epochs=2, batch_size=128),
        student_sgd=SgdConfig(learning_rate=0.05, epochs=2, batch_size=128),
        robust_losses=(RobustLossConfig(family=LossFamily.GCE, q_exponent=0.7),),
        repeats=1,
        train_scenes=4,
        test_scenes=2,
        scene_height=12,
        scene_width=12,
    )
    result = run_experiment(cfg)
    metrics = result.summary["student_gce"]
    assert set(metrics) == {"dice_ET", "dice_TC", "dice_WT", "pixel_accuracy"}
    assert all(0.0 <= s.mean <= 1.0 for s in metrics.values())


def test_diagnostic_labels_never_reach_training():
    ds = _separable(seed=8, count=60)
    labeled, pool = split_labeled_unlabeled(ds, 0.3, seed=6)
    truth = pool.diagnostic_labels()
    scrambled = UnlabeledPool(pool.features, pool.num_classes, _diagnostic_labels=(truth + 1) % 3)
    teacher = train_teacher(labeled, FAST)
    robust = RobustLossConfig(family=LossFamily.GCE, q_exponent=0.7)
    students = []
    for candidate in (pool, scrambled):
        pseudo = generate_pseudo_labels(teacher, candidate)
        students.append(train_student(labeled, pseudo, robust, FAST))
    for a, b in zip(*(s.layers for s in students)):
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.bias, b.bias)


def _shipped_toy_experiment():
    return parse_experiment(load_config_file(os.path.join(ROOT, "configs", "classification_experiment.json"))).config


@pytest.mark.slow
def test_robust_students_beat_ce_under_noisy_pseudo_labels():
    cfg = _shipped_toy_experiment()
    assert cfg.labeled_fraction == 0.1 and cfg.repeats == 5 and cfg.pseudo_noise.flip_rate == 0.3
    result = run_experiment(cfg)
    lower = result.mean(LOWER_BOUND, "accuracy")
    ce = result.mean(STUDENT_CE, "accuracy")
    upper = result.mean(UPPER_BOUND, "accuracy")
    assert lower <= ce
    for arm in ("student_gce", "student_bce", "student_sce"):
        robust = result.mean(arm, "accuracy")
        assert robust - ce >= 0.01, arm
        assert robust <= upper + 0.005, arm


@pytest.mark.slow
def test_robust_gain_shrinks_as_labeled_fraction_grows():
    cfg = replace(_shipped_toy_experiment(), repeats=3, robust_losses=(RobustLossConfig(family=LossFamily.BCE, beta=2.0),))
    results = run_sweep(cfg, [0.3, 0.5, 0.7])
    errors = [r.pseudo_label_error.mean for r in results]
    teacher_errors = [r.teacher_pseudo_error.mean for r in results]
    gaps = [r.mean("student_bce", "accuracy") - r.mean(STUDENT_CE, "accuracy") for r in results]
    assert errors[0] > errors[1] > errors[2]
    assert teacher_errors[0] > teacher_errors[1] > teacher_errors[2]
    assert gaps[0] >= gaps[1] >= gaps[2]
