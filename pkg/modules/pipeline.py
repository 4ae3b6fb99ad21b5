"""
Teacher-student semi-supervised protocol.

A teacher trained with CE on the labeled subset labels the unlabeled pool; a
fresh student then trains on the union with CE on true labels and a robust
loss on pseudo-labels. ``run_experiment`` brackets the students with the
lower bound (the teacher itself) and the upper bound (CE on every true label).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from humanfriendly import format_timespan
from joblib import Parallel, delayed
from sklearn.metrics import confusion_matrix

from main import InvalidInputError, RobustPLError, derive_seed
from modules.datagen import (
    LabeledDataset,
    MixtureSpec,
    NoiseSpec,
    Provenance,
    SegScene,
    UnlabeledPool,
    gen_gaussian_mixture,
    gen_toy_segmentation,
    inject_label_noise,
    scene_pixel_features,
    scenes_to_dataset,
    scenes_to_pool,
    split_indices,
    split_labeled_unlabeled,
)
from modules.losses import LossFamily, RobustLossConfig
from modules.model import (
    Architecture,
    MlpClassifier,
    SgdConfig,
    evaluate_accuracy,
    init_model,
    predict_batch,
    predict_proba_batch,
    train,
)

LOGGER = logging.getLogger("RobustPL.Pipeline")

LOWER_BOUND = "lower_bound"
STUDENT_CE = "student_ce"
UPPER_BOUND = "upper_bound"

TASK_CLASSIFICATION = "classification"
TASK_SEGMENTATION = "segmentation"


class ExperimentError(RobustPLError):
    """A repeat of an experiment failed; the message names the repeat and arm."""


@dataclass(frozen=True)
class ClassGrouping:
    name: str
    classes: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(sorted({int(c) for c in self.classes})))


# ET = label 1, TC = labels 1 and 4, WT = labels 1, 2 and 4; label 4 is class index 3 here
DEFAULT_GROUPINGS = (
    ClassGrouping("ET", (1,)),
    ClassGrouping("TC", (1, 3)),
    ClassGrouping("WT", (1, 2, 3)),
)


@dataclass(frozen=True, eq=False)
class PseudoLabeledSet:
    features: np.ndarray
    pseudo_labels: np.ndarray
    confidence: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        labels = np.array(self.pseudo_labels, dtype=np.int64).reshape(-1)
        conf = np.array(self.confidence, dtype=float).reshape(-1)
        if features.ndim != 2 or labels.shape[0] != features.shape[0] or conf.shape != labels.shape:
            raise InvalidInputError("pseudo-labeled set arrays must have one entry per feature row")
        for arr in (features, labels, conf):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "pseudo_labels", labels)
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "num_classes", int(self.num_classes))

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    def to_dataset(self) -> LabeledDataset:
        return LabeledDataset.from_arrays(self.features, self.pseudo_labels, self.num_classes, Provenance.PSEUDO_LABEL)

    def with_labels(self, labels) -> "PseudoLabeledSet":
        return PseudoLabeledSet(self.features, labels, self.confidence, self.num_classes)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = TASK_CLASSIFICATION
    labeled_fraction: float = 0.1
    teacher_sgd: SgdConfig = field(default_factory=SgdConfig)
    student_sgd: SgdConfig = field(default_factory=SgdConfig)
    robust_losses: Tuple[RobustLossConfig, ...] = (RobustLossConfig(family=LossFamily.BCE, beta=5.0),)
    architecture: Architecture = field(default_factory=Architecture)
    repeats: int = 3
    seed: int = 0
    mixture: Optional[MixtureSpec] = None
    test_count_per_class: int = 300
    train_dataset: Optional[LabeledDataset] = None
    test_dataset: Optional[LabeledDataset] = None
    pseudo_noise: Optional[NoiseSpec] = None
    min_confidence: Optional[float] = None
    train_scenes: int = 30
    test_scenes: int = 20
    scene_height: int = 32
    scene_width: int = 32
    seg_classes: int = 4
    groupings: Tuple[ClassGrouping, ...] = DEFAULT_GROUPINGS
    n_jobs: int = 1

    def __post_init__(self):
        if self.task not in (TASK_CLASSIFICATION, TASK_SEGMENTATION):
            raise InvalidInputError(f"unknown task {self.task!r}")
        if not 0.0 < float(self.labeled_fraction) < 1.0:
            raise InvalidInputError(f"labeled_fraction must lie in (0, 1), got {self.labeled_fraction}")
        if int(self.repeats) < 1:
            raise InvalidInputError(f"repeats must be >= 1, got {self.repeats}")
        robust = tuple(self.robust_losses)
        families = [cfg.family for cfg in robust]
        if len(set(families)) != len(families):
            raise InvalidInputError("robust_losses must name each family at most once")
        object.__setattr__(self, "robust_losses", robust)
        object.__setattr__(self, "groupings", tuple(self.groupings))
        if self.task == TASK_CLASSIFICATION and self.mixture is None and self.train_dataset is None:
            raise InvalidInputError("classification needs a mixture spec or a training dataset")

    @property
    def arm_names(self) -> List[str]:
        return [LOWER_BOUND, STUDENT_CE] + [robust_arm_name(cfg) for cfg in self.robust_losses] + [UPPER_BOUND]


@dataclass
class MetricSummary:
    values: List[float]
    mean: float
    std: Optional[float]

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "MetricSummary":
        vals = [float(v) for v in values]
        mean = float(sum(vals) / len(vals))
        std = float(np.std(vals, ddof=1)) if len(vals) >= 2 else None
        return cls(values=vals, mean=mean, std=std)

    def to_dict(self) -> Dict[str, object]:
        return {"values": self.values, "mean": self.mean, "std": self.std}


@dataclass
class RepeatOutcome:
    repeat: int
    metrics: Dict[str, Dict[str, float]]
    teacher_pseudo_error: Optional[float]
    pseudo_label_error: Optional[float]
    arm_seconds: Dict[str, float]


@dataclass
class ExperimentResult:
    labeled_fraction: float
    arms: List[str]
    repeats: List[RepeatOutcome]
    summary: Dict[str, Dict[str, MetricSummary]]
    pseudo_label_error: Optional[MetricSummary]
    teacher_pseudo_error: Optional[MetricSummary]

    def mean(self, arm: str, metric: str) -> float:
        return self.summary[arm][metric].mean

    def metric_names(self) -> List[str]:
        names: List[str] = []
        for arm in self.arms:
            for metric in self.summary.get(arm, {}):
                if metric not in names:
                    names.append(metric)
        return names


def robust_arm_name(cfg: RobustLossConfig) -> str:
    return f"student_{cfg.family.value}"


# ---------- Protocol steps ----------
def _fresh_model(architecture: Architecture, input_dim: int, num_classes: int, seed: int) -> MlpClassifier:
    return init_model(architecture.layer_dims(input_dim, num_classes), architecture.activation, seed)


def train_teacher(labeled: LabeledDataset, cfg: SgdConfig, architecture: Architecture = Architecture()) -> MlpClassifier:
    if labeled.n == 0:
        raise InvalidInputError("teacher needs a non-empty labeled set")
    if labeled.provenance_set() != {Provenance.TRUE_LABEL}:
        raise InvalidInputError("teacher must only see true labels")
    model = _fresh_model(architecture, labeled.d, labeled.num_classes, cfg.seed)
    model, record = train(model, labeled, {Provenance.TRUE_LABEL: RobustLossConfig.cross_entropy()}, cfg)
    if record.epochs:
        LOGGER.debug("teacher: final loss=%.5f acc=%.4f", record.epochs[-1].mean_loss, record.epochs[-1].accuracy)
    return model


def generate_pseudo_labels(
    teacher: MlpClassifier,
    unlabeled: Union[UnlabeledPool, np.ndarray],
    min_confidence: Optional[float] = None,
) -> PseudoLabeledSet:
    features = unlabeled.features if isinstance(unlabeled, UnlabeledPool) else np.asarray(unlabeled, dtype=float)
    if features.ndim != 2:
        raise InvalidInputError(f"unlabeled features must be 2-D, got shape {features.shape}")
    if features.shape[0] == 0:
        return PseudoLabeledSet(np.empty((0, teacher.input_dim)), np.empty(0, dtype=np.int64), np.empty(0), teacher.num_classes)
    if features.shape[1] != teacher.input_dim:
        raise InvalidInputError(f"unlabeled features have {features.shape[1]} columns, teacher expects {teacher.input_dim}")
    probs = predict_proba_batch(teacher, features)
    labels = np.argmax(probs, axis=1)
    confidence = probs[np.arange(len(labels)), labels]
    pseudo = PseudoLabeledSet(features, labels, confidence, teacher.num_classes)
    if min_confidence is not None:
        keep = confidence >= float(min_confidence)
        pseudo = PseudoLabeledSet(features[keep], labels[keep], confidence[keep], teacher.num_classes)
    return pseudo


def train_student(
    labeled: LabeledDataset,
    pseudo: PseudoLabeledSet,
    robust_cfg: RobustLossConfig,
    cfg: SgdConfig,
    architecture: Architecture = Architecture(),
) -> MlpClassifier:
    if labeled.provenance_set() - {Provenance.TRUE_LABEL}:
        raise InvalidInputError("labeled part of the student set must carry true labels only")
    union = labeled.concat(pseudo.to_dataset()) if pseudo.n else labeled
    num_classes = max(labeled.num_classes, pseudo.num_classes)
    model = _fresh_model(architecture, union.d, num_classes, cfg.seed)
    loss_map = {Provenance.TRUE_LABEL: RobustLossConfig.cross_entropy(), Provenance.PSEUDO_LABEL: robust_cfg}
    model, _record = train(model, union, loss_map, cfg)
    return model


def run_bounds(
    dataset: LabeledDataset,
    p: float,
    cfg: SgdConfig,
    architecture: Architecture = Architecture(),
    split_seed: int = 0,
) -> Tuple[MlpClassifier, MlpClassifier]:
    labeled, _pool = split_labeled_unlabeled(dataset, p, split_seed)
    lower = train_teacher(labeled, cfg, architecture)
    upper = train_teacher(dataset, cfg, architecture)
    return lower, upper


def pseudo_label_error_rate(pseudo: PseudoLabeledSet, pool: UnlabeledPool) -> Optional[float]:
    truth = pool.diagnostic_labels()
    if truth is None or pseudo.n == 0 or pseudo.n != pool.n:
        return None
    return float(np.mean(pseudo.pseudo_labels != truth))


# ---------- Metrics ----------
def confusion_counts(model: MlpClassifier, dataset: LabeledDataset) -> np.ndarray:
    preds = predict_batch(model, dataset.features)
    return confusion_matrix(dataset.labels, preds, labels=list(range(max(dataset.num_classes, model.num_classes))))


def dice_score(pred, truth, class_set: Iterable[int]) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"prediction shape {pred.shape} differs from truth shape {truth.shape}")
    classes = np.asarray(sorted({int(c) for c in class_set}))
    p_set = np.isin(pred, classes)
    t_set = np.isin(truth, classes)
    denom = int(p_set.sum()) + int(t_set.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p_set, t_set).sum()) / denom


Segmenter = Union[MlpClassifier, Callable[[SegScene], np.ndarray]]


def segment_scene(model: Segmenter, scene: SegScene) -> np.ndarray:
    if isinstance(model, MlpClassifier):
        return predict_batch(model, scene_pixel_features(scene)).reshape(scene.shape)
    return np.asarray(model(scene)).reshape(scene.shape)


def _as_groupings(groupings) -> List[ClassGrouping]:
    if isinstance(groupings, Mapping):
        return [ClassGrouping(str(k), tuple(v)) for k, v in groupings.items()]
    out = []
    for idx, g in enumerate(groupings):
        out.append(g if isinstance(g, ClassGrouping) else ClassGrouping(f"group_{idx}", tuple(g)))
    return out


def evaluate_segmentation(model: Segmenter, scenes: Sequence[SegScene], groupings=DEFAULT_GROUPINGS) -> Dict[str, float]:
    if not scenes:
        raise InvalidInputError("no scenes to evaluate")
    groups = _as_groupings(groupings)
    totals = {g.name: 0.0 for g in groups}
    for scene in scenes:
        pred = segment_scene(model, scene)
        for g in groups:
            totals[g.name] += dice_score(pred, scene.label_grid, g.classes)
    return {name: total / len(scenes) for name, total in totals.items()}


# ---------- Experiment ----------
@dataclass(frozen=True, eq=False)
class _TaskData:
    pool_labeled: LabeledDataset  # full training set with true labels
    evaluate: Callable[[MlpClassifier], Dict[str, float]]
    split: Callable[[float, int], Tuple[LabeledDataset, UnlabeledPool]]


def _classification_data(cfg: ExperimentConfig) -> _TaskData:
    if cfg.train_dataset is not None:
        train_ds = cfg.train_dataset
    else:
        train_ds = gen_gaussian_mixture(cfg.mixture, derive_seed(cfg.seed, "data"))
    if cfg.test_dataset is not None:
        test_ds = cfg.test_dataset
    elif cfg.mixture is not None:
        test_ds = gen_gaussian_mixture(cfg.mixture.scaled(cfg.test_count_per_class), derive_seed(cfg.seed, "test"), include_outliers=False)
    else:
        raise InvalidInputError("classification from a dataset file needs a test dataset")

    def evaluate(model: MlpClassifier) -> Dict[str, float]:
        return {"accuracy": evaluate_accuracy(model, test_ds)}

    def split(p: float, seed: int):
        return split_labeled_unlabeled(train_ds, p, seed)

    return _TaskData(pool_labeled=train_ds, evaluate=evaluate, split=split)


def _segmentation_data(cfg: ExperimentConfig) -> _TaskData:
    train_scenes = gen_toy_segmentation(cfg.train_scenes, cfg.scene_height, cfg.scene_width, derive_seed(cfg.seed, "data"), cfg.seg_classes)
    test_scenes = gen_toy_segmentation(cfg.test_scenes, cfg.scene_height, cfg.scene_width, derive_seed(cfg.seed, "test"), cfg.seg_classes)
    full = scenes_to_dataset(train_scenes)
    test_pixels = scenes_to_dataset(test_scenes)

    def evaluate(model: MlpClassifier) -> Dict[str, float]:
        out = {f"dice_{name}": value for name, value in evaluate_segmentation(model, test_scenes, cfg.groupings).items()}
        out["pixel_accuracy"] = evaluate_accuracy(model, test_pixels)
        return out

    def split(p: float, seed: int):
        # split whole scenes, the way subjects are split
        labeled_idx, unlabeled_idx = split_indices(len(train_scenes), p, seed)
        labeled = scenes_to_dataset([train_scenes[i] for i in labeled_idx])
        pool = scenes_to_pool([train_scenes[i] for i in unlabeled_idx])
        return labeled, pool

    return _TaskData(pool_labeled=full, evaluate=evaluate, split=split)


def _task_data(cfg: ExperimentConfig) -> _TaskData:
    if cfg.task == TASK_SEGMENTATION:
        return _segmentation_data(cfg)
    return _classification_data(cfg)


def _timed(label: str, fn: Callable[[], MlpClassifier], timings: Dict[str, float]) -> MlpClassifier:
    start = time.perf_counter()
    model = fn()
    timings[label] = time.perf_counter() - start
    LOGGER.info("arm %s trained in %s", label, format_timespan(timings[label]))
    return model


def _run_repeat(cfg: ExperimentConfig, data: _TaskData, repeat: int) -> RepeatOutcome:
    split_seed = derive_seed(cfg.seed, "split", repeat)
    init_seed = derive_seed(cfg.seed, "init", repeat)
    teacher_sgd = replace(cfg.teacher_sgd, seed=init_seed)
    student_sgd = replace(cfg.student_sgd, seed=init_seed)
    arch = cfg.architecture
    timings: Dict[str, float] = {}
    metrics: Dict[str, Dict[str, float]] = {}
    stage = "split"
    try:
        labeled, pool = data.split(cfg.labeled_fraction, split_seed)
        stage = LOWER_BOUND
        teacher = _timed(LOWER_BOUND, lambda: train_teacher(labeled, teacher_sgd, arch), timings)
        metrics[LOWER_BOUND] = data.evaluate(teacher)

        stage = "pseudo_labels"
        pseudo = generate_pseudo_labels(teacher, pool, cfg.min_confidence)
        teacher_error = pseudo_label_error_rate(pseudo, pool)
        if cfg.pseudo_noise is not None and pseudo.n:
            noisy = inject_label_noise(pseudo.to_dataset(), cfg.pseudo_noise, derive_seed(cfg.seed, "noise", repeat))
            pseudo = pseudo.with_labels(noisy.labels)
        final_error = pseudo_label_error_rate(pseudo, pool)

        stage = STUDENT_CE
        student = _timed(STUDENT_CE, lambda: train_student(labeled, pseudo, RobustLossConfig.cross_entropy(), student_sgd, arch), timings)
        metrics[STUDENT_CE] = data.evaluate(student)
        for robust in cfg.robust_losses:
            name = stage = robust_arm_name(robust)
            student = _timed(name, lambda: train_student(labeled, pseudo, robust, student_sgd, arch), timings)
            metrics[name] = data.evaluate(student)

        stage = UPPER_BOUND
        upper = _timed(UPPER_BOUND, lambda: train_teacher(data.pool_labeled, teacher_sgd, arch), timings)
        metrics[UPPER_BOUND] = data.evaluate(upper)
    except RobustPLError as exc:
        raise ExperimentError(f"repeat {repeat} (p={cfg.labeled_fraction:g}) failed in {stage}: {exc}") from exc
    return RepeatOutcome(repeat, metrics, teacher_error, final_error, timings)


def _summaries(values_by_repeat: List[Optional[float]]) -> Optional[MetricSummary]:
    vals = [v for v in values_by_repeat if v is not None]
    return MetricSummary.from_values(vals) if vals else None


def run_experiment(cfg: ExperimentConfig, n_jobs: Optional[int] = None) -> ExperimentResult:
    data = _task_data(cfg)
    jobs = int(n_jobs if n_jobs is not None else cfg.n_jobs) or 1
    LOGGER.info("experiment: task=%s p=%.3f repeats=%d arms=%s", cfg.task, cfg.labeled_fraction, cfg.repeats, cfg.arm_names)
    if jobs == 1:
        outcomes = [_run_repeat(cfg, data, r) for r in range(cfg.repeats)]
    else:
        outcomes = Parallel(n_jobs=jobs)(delayed(_run_repeat)(cfg, data, r) for r in range(cfg.repeats))
    outcomes = sorted(outcomes, key=lambda o: o.repeat)

    arms = cfg.arm_names
    summary: Dict[str, Dict[str, MetricSummary]] = {}
    for arm in arms:
        metric_names = list(outcomes[0].metrics[arm])
        summary[arm] = {m: MetricSummary.from_values([o.metrics[arm][m] for o in outcomes]) for m in metric_names}
    return ExperimentResult(
        labeled_fraction=float(cfg.labeled_fraction),
        arms=arms,
        repeats=outcomes,
        summary=summary,
        pseudo_label_error=_summaries([o.pseudo_label_error for o in outcomes]),
        teacher_pseudo_error=_summaries([o.teacher_pseudo_error for o in outcomes]),
    )


def run_sweep(cfg: ExperimentConfig, fractions: Sequence[float], n_jobs: Optional[int] = None) -> List[ExperimentResult]:
    return [run_experiment(replace(cfg, labeled_fraction=float(p)), n_jobs=n_jobs) for p in fractions]
