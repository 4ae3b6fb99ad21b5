"""
Deterministic synthetic data: Gaussian mixtures with mislabeled clusters,
symmetric label noise, labeled/unlabeled splits and toy segmentation scenes.

Every generator is a pure function of its spec and seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from sklearn.model_selection import train_test_split

from main import InvalidInputError, stable_digest

LOGGER = logging.getLogger("RobustPL.Datagen")

FIG2_SIDE = 6.0
FIG2_CLASS_COUNT = 300
FIG2_OUTLIER_COUNT = 60
FIG2_OUTLIER_MEAN = (-4.0, -3.0)
FIG2_OUTLIER_VARIANCE = 0.25
TOY_SIDE = 5.0

MIN_GRID = 8
SEG_BACKGROUND = 0.0
SEG_NOISE_STD = 0.35
SEG_MAX_PLACEMENT_TRIES = 200


class Provenance(str, Enum):
    TRUE_LABEL = "true_label"
    PSEUDO_LABEL = "pseudo_label"

    @classmethod
    def parse(cls, value) -> "Provenance":
        if isinstance(value, cls):
            return value
        key = str(value or "").strip().lower()
        for member in cls:
            if member.value == key:
                return member
        raise InvalidInputError(f"unknown provenance {value!r}")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,)
    provenance: np.ndarray  # (n,) of Provenance values
    num_classes: int

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        if features.ndim == 1 and features.size == 0:
            features = features.reshape(0, 0)
        if features.ndim != 2:
            raise InvalidInputError(f"features must be 2-D, got shape {features.shape}")
        labels = np.array(self.labels, dtype=np.int64).reshape(-1)
        provenance = np.array([Provenance.parse(p).value for p in np.asarray(self.provenance).reshape(-1)], dtype="<U12")
        n = features.shape[0]
        if labels.shape[0] != n or provenance.shape[0] != n:
            raise InvalidInputError(f"features ({n}), labels ({labels.shape[0]}) and provenance ({provenance.shape[0]}) lengths differ")
        K = int(self.num_classes)
        if K < 1:
            raise InvalidInputError(f"num_classes must be positive, got {K}")
        if n and (labels.min() < 0 or labels.max() >= K):
            raise InvalidInputError(f"labels must lie in [0, {K})")
        if not np.all(np.isfinite(features)):
            raise InvalidInputError("features contain non-finite values")
        for arr in (features, labels, provenance):
            arr.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "provenance", provenance)
        object.__setattr__(self, "num_classes", K)

    @classmethod
    def from_arrays(cls, features, labels, num_classes: int, provenance: Provenance = Provenance.TRUE_LABEL) -> "LabeledDataset":
        labels = np.asarray(labels)
        return cls(features=features, labels=labels, provenance=np.full(labels.shape[0], Provenance.parse(provenance).value), num_classes=num_classes)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def provenance_set(self) -> set:
        return {Provenance(p) for p in np.unique(self.provenance)}

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.provenance[idx], self.num_classes)

    def with_labels(self, labels) -> "LabeledDataset":
        return LabeledDataset(self.features, labels, self.provenance, self.num_classes)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        if other.d != self.d:
            raise InvalidInputError(f"cannot concatenate datasets with {self.d} and {other.d} features")
        return LabeledDataset(
            np.vstack([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            np.concatenate([self.provenance, other.provenance]),
            max(self.num_classes, other.num_classes),
        )


@dataclass(frozen=True, eq=False)
class UnlabeledPool:
    """Features without labels.

    The ground truth rides along in a diagnostics side channel that only the
    pseudo-label error report reads; nothing in training accepts this type.
    """

    features: np.ndarray
    num_classes: int
    _diagnostic_labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        features = np.array(self.features, dtype=float)
        if features.ndim != 2:
            raise InvalidInputError(f"features must be 2-D, got shape {features.shape}")
        features.setflags(write=False)
        object.__setattr__(self, "features", features)
        if self._diagnostic_labels is not None:
            truth = np.array(self._diagnostic_labels, dtype=np.int64)
            if truth.shape != (features.shape[0],):
                raise InvalidInputError("diagnostic labels must have one entry per row")
            truth.setflags(write=False)
            object.__setattr__(self, "_diagnostic_labels", truth)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    def diagnostic_labels(self) -> Optional[np.ndarray]:
        return self._diagnostic_labels


@dataclass(frozen=True, eq=False)
class MixtureComponent:
    mean: np.ndarray
    covariance: np.ndarray
    count: int
    assigned_label: int
    generating_class: Optional[int] = None

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.covariance, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise InvalidInputError(f"covariance shape {cov.shape} does not match mean dimension {mean.size}")
        if int(self.count) <= 0:
            raise InvalidInputError(f"component count must be positive, got {self.count}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "assigned_label", int(self.assigned_label))
        if self.generating_class is not None:
            object.__setattr__(self, "generating_class", int(self.generating_class))

    @property
    def dim(self) -> int:
        return int(self.mean.size)

    def cholesky(self) -> np.ndarray:
        if not np.allclose(self.covariance, self.covariance.T, rtol=0.0, atol=1e-12):
            raise InvalidInputError("covariance is not symmetric")
        try:
            return np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError:
            raise InvalidInputError("covariance is not positive definite") from None

    def to_dict(self) -> Dict[str, object]:
        out: Dict[str, object] = {
            "mean": self.mean.tolist(),
            "covariance": self.covariance.tolist(),
            "count": self.count,
            "label": self.assigned_label,
        }
        if self.generating_class is not None:
            out["generating_class"] = self.generating_class
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "MixtureComponent":
        return cls(
            mean=data["mean"],
            covariance=data["covariance"],
            count=data["count"],
            assigned_label=data["label"],
            generating_class=data.get("generating_class"),
        )


@dataclass(frozen=True, eq=False)
class MixtureSpec:
    components: Tuple[MixtureComponent, ...]
    outliers: Tuple[MixtureComponent, ...] = ()
    num_classes: int = 0

    def __post_init__(self):
        components = tuple(self.components)
        outliers = tuple(self.outliers)
        if not components:
            raise InvalidInputError("a mixture needs at least one component")
        dims = {c.dim for c in components + outliers}
        if len(dims) != 1:
            raise InvalidInputError(f"all components must share one dimension, got {sorted(dims)}")
        K = int(self.num_classes) or 1 + max(c.assigned_label for c in components + outliers)
        for comp in components + outliers:
            if not 0 <= comp.assigned_label < K:
                raise InvalidInputError(f"assigned label {comp.assigned_label} outside [0, {K})")
            comp.cholesky()
        for comp in outliers:
            if comp.generating_class is not None and comp.generating_class == comp.assigned_label:
                raise InvalidInputError("an outlier component must be assigned a label other than its generating class")
        object.__setattr__(self, "components", components)
        object.__setattr__(self, "outliers", outliers)
        object.__setattr__(self, "num_classes", K)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    @property
    def total_count(self) -> int:
        return sum(c.count for c in self.components + self.outliers)

    def clean(self) -> "MixtureSpec":
        return MixtureSpec(components=self.components, outliers=(), num_classes=self.num_classes)

    def scaled(self, count: int) -> "MixtureSpec":
        """Same geometry with ``count`` points per class component and no outliers."""
        comps = tuple(
            MixtureComponent(c.mean, c.covariance, count, c.assigned_label, c.generating_class) for c in self.components
        )
        return MixtureSpec(components=comps, outliers=(), num_classes=self.num_classes)

    def to_dict(self) -> Dict[str, object]:
        return {
            "num_classes": self.num_classes,
            "components": [c.to_dict() for c in self.components],
            "outliers": [c.to_dict() for c in self.outliers],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, object]) -> "MixtureSpec":
        return cls(
            components=tuple(MixtureComponent.from_dict(c) for c in data.get("components") or []),
            outliers=tuple(MixtureComponent.from_dict(c) for c in data.get("outliers") or []),
            num_classes=int(data.get("num_classes") or 0),
        )

    def digest(self) -> str:
        return stable_digest(self.to_dict())


@dataclass(frozen=True)
class NoiseSpec:
    flip_rate: float = 0.0
    scheme: str = "uniform_symmetric"

    def __post_init__(self):
        rate = float(self.flip_rate)
        if not 0.0 <= rate < 1.0:
            raise InvalidInputError(f"flip rate must lie in [0, 1), got {rate}")
        if self.scheme != "uniform_symmetric":
            raise InvalidInputError(f"unsupported noise scheme {self.scheme!r}")
        object.__setattr__(self, "flip_rate", rate)


@dataclass(frozen=True)
class Lesion:
    center_row: float
    center_col: float
    radius_row: float
    radius_col: float
    class_index: int

    def mask(self, height: int, width: int) -> np.ndarray:
        rows, cols = np.mgrid[0:height, 0:width]
        return ((rows - self.center_row) / self.radius_row) ** 2 + ((cols - self.center_col) / self.radius_col) ** 2 <= 1.0

    def contains(self, row: int, col: int) -> bool:
        return ((row - self.center_row) / self.radius_row) ** 2 + ((col - self.center_col) / self.radius_col) ** 2 <= 1.0

    def to_dict(self) -> Dict[str, object]:
        return {
            "center_row": self.center_row,
            "center_col": self.center_col,
            "radius_row": self.radius_row,
            "radius_col": self.radius_col,
            "class_index": self.class_index,
        }


@dataclass(frozen=True, eq=False)
class SegScene:
    image: np.ndarray  # (H, W) intensities
    label_grid: np.ndarray  # (H, W) class indices
    num_classes: int
    lesions: Tuple[Lesion, ...] = ()

    def __post_init__(self):
        image = np.array(self.image, dtype=float)
        grid = np.array(self.label_grid, dtype=np.int64)
        if image.ndim != 2 or image.shape != grid.shape:
            raise InvalidInputError(f"image {image.shape} and label grid {grid.shape} must be equal 2-D shapes")
        K = int(self.num_classes)
        if grid.size and (grid.min() < 0 or grid.max() >= K):
            raise InvalidInputError(f"label grid values must lie in [0, {K})")
        image.setflags(write=False)
        grid.setflags(write=False)
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "label_grid", grid)
        object.__setattr__(self, "num_classes", K)
        object.__setattr__(self, "lesions", tuple(self.lesions))

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.image.shape)  # type: ignore[return-value]


# ---------- Mixtures ----------
def gen_gaussian_mixture(spec: MixtureSpec, seed: int, include_outliers: bool = True) -> LabeledDataset:
    rng = np.random.default_rng(int(seed))
    blocks = []
    labels = []
    comps = spec.components + (spec.outliers if include_outliers else ())
    for comp in comps:
        chol = comp.cholesky()
        z = rng.standard_normal((comp.count, comp.dim))
        blocks.append(comp.mean + z @ chol.T)
        labels.append(np.full(comp.count, comp.assigned_label, dtype=np.int64))
    features = np.vstack(blocks)
    labels_arr = np.concatenate(labels)
    LOGGER.debug("Generated mixture: n=%d d=%d K=%d (outliers=%s)", features.shape[0], spec.dim, spec.num_classes, include_outliers)
    return LabeledDataset.from_arrays(features, labels_arr, spec.num_classes)


def default_fig2_spec() -> MixtureSpec:
    """Three unit-variance classes on a triangle of side 6 plus one mislabeled cluster.

    Class means: (0, 0), (6, 0), (3, 3*sqrt(3)); 300 points each. The outlier
    cluster (60 points, variance 0.25) sits at (-4, -3), below-left of class 0
    and nearest to it, and is labeled class 1. A straight class-0/class-1
    boundary can only put the cluster on the class-1 side by also handing over
    roughly a third of class 0, more points than the cluster holds.
    """
    side = FIG2_SIDE
    means = [(0.0, 0.0), (side, 0.0), (side / 2.0, side * math.sqrt(3.0) / 2.0)]
    eye = np.eye(2)
    comps = tuple(MixtureComponent(m, eye, FIG2_CLASS_COUNT, k) for k, m in enumerate(means))
    outlier = MixtureComponent(FIG2_OUTLIER_MEAN, FIG2_OUTLIER_VARIANCE * eye, FIG2_OUTLIER_COUNT, 1, generating_class=0)
    return MixtureSpec(components=comps, outliers=(outlier,), num_classes=3)


def toy_classification_spec(count_per_class: int = 500) -> MixtureSpec:
    """Four unit-variance classes on the corners of a square of side 5.

    The corners are not centred on the origin, so a model that has taken few
    SGD steps still has its class boundaries pulled off the midlines; the
    teacher, trained on the labeled fraction only, sees the fewest steps.
    """
    side = TOY_SIDE
    corners = [(0.0, 0.0), (side, 0.0), (0.0, side), (side, side)]
    eye = np.eye(2)
    comps = tuple(MixtureComponent(m, eye, count_per_class, k) for k, m in enumerate(corners))
    return MixtureSpec(components=comps, num_classes=4)


PRESETS = {
    "fig2": default_fig2_spec,
    "toy_classification": toy_classification_spec,
}


def preset_spec(name: str) -> MixtureSpec:
    try:
        return PRESETS[str(name)]()
    except KeyError:
        raise InvalidInputError(f"unknown mixture preset {name!r} (known: {sorted(PRESETS)})") from None


# ---------- Noise and splits ----------
def inject_label_noise(ds: LabeledDataset, noise: NoiseSpec, seed: int) -> LabeledDataset:
    if ds.num_classes < 2:
        raise InvalidInputError("label noise needs at least 2 classes")
    if noise.flip_rate == 0.0 or ds.n == 0:
        return ds
    rng = np.random.default_rng(int(seed))
    flip = rng.random(ds.n) < noise.flip_rate
    # a uniform offset in [1, K) always lands on a different class
    offsets = rng.integers(1, ds.num_classes, size=ds.n)
    labels = np.where(flip, (ds.labels + offsets) % ds.num_classes, ds.labels)
    LOGGER.debug("Injected label noise: %d/%d flipped (eta=%.3f)", int(flip.sum()), ds.n, noise.flip_rate)
    return LabeledDataset(ds.features, labels, ds.provenance, ds.num_classes)


def labeled_count(n: int, p: float) -> int:
    # guard against float artefacts such as 960 * 0.1 = 96.00000000000001
    return int(math.ceil(round(n * p, 9)))


def split_indices(n: int, p: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    if not 0.0 < p < 1.0:
        raise InvalidInputError(f"labeled fraction must lie in (0, 1), got {p}")
    n_labeled = labeled_count(n, p)
    if n_labeled < 1:
        raise InvalidInputError(f"n*p must be at least 1 (n={n}, p={p})")
    indices = np.arange(n)
    if n_labeled >= n:
        return indices, np.empty(0, dtype=np.int64)
    labeled, unlabeled = train_test_split(indices, train_size=n_labeled, random_state=int(seed) % (2 ** 32), shuffle=True)
    return np.asarray(labeled, dtype=np.int64), np.asarray(unlabeled, dtype=np.int64)


def split_labeled_unlabeled(ds: LabeledDataset, p: float, seed: int) -> Tuple[LabeledDataset, UnlabeledPool]:
    labeled_idx, unlabeled_idx = split_indices(ds.n, p, seed)
    pool = UnlabeledPool(
        features=ds.features[unlabeled_idx].reshape(len(unlabeled_idx), ds.d),
        num_classes=ds.num_classes,
        _diagnostic_labels=ds.labels[unlabeled_idx],
    )
    return ds.subset(labeled_idx), pool


# ---------- Segmentation scenes ----------
def _place_lesions(rng: np.random.Generator, height: int, width: int, count: int, num_classes: int) -> List[Lesion]:
    lesions: List[Lesion] = []
    occupied = np.zeros((height, width), dtype=bool)
    max_r_row = max(2.0, height / 6.0)
    max_r_col = max(2.0, width / 6.0)
    tries = 0
    while len(lesions) < count and tries < SEG_MAX_PLACEMENT_TRIES:
        tries += 1
        r_row = rng.uniform(1.5, max_r_row)
        r_col = rng.uniform(1.5, max_r_col)
        c_row = rng.uniform(r_row, height - 1 - r_row)
        c_col = rng.uniform(r_col, width - 1 - r_col)
        cls = int(rng.integers(1, num_classes))
        lesion = Lesion(float(c_row), float(c_col), float(r_row), float(r_col), cls)
        mask = lesion.mask(height, width)
        if not mask.any() or (mask & occupied).any():
            continue
        occupied |= mask
        lesions.append(lesion)
    return lesions


def render_scene(
    lesions: Sequence[Lesion],
    height: int,
    width: int,
    num_classes: int,
    rng: Optional[np.random.Generator] = None,
    noise_std: float = SEG_NOISE_STD,
) -> SegScene:
    grid = np.zeros((height, width), dtype=np.int64)
    for lesion in lesions:
        grid[lesion.mask(height, width)] = lesion.class_index
    # mean intensity of a pixel is its class index
    image = SEG_BACKGROUND + grid.astype(float)
    if rng is not None and noise_std > 0.0:
        image = image + rng.normal(0.0, noise_std, size=(height, width))
    return SegScene(image=image, label_grid=grid, num_classes=num_classes, lesions=tuple(lesions))


def gen_toy_segmentation(
    num_scenes: int,
    height: int = 32,
    width: int = 32,
    seed: int = 0,
    num_classes: int = 4,
    min_lesions: int = 1,
    max_lesions: int = 3,
    noise_std: float = SEG_NOISE_STD,
) -> List[SegScene]:
    if height < MIN_GRID or width < MIN_GRID:
        raise InvalidInputError(f"grid must be at least {MIN_GRID}x{MIN_GRID}, got {height}x{width}")
    if num_classes < 2:
        raise InvalidInputError("segmentation needs background plus at least one lesion class")
    if not 0 <= min_lesions <= max_lesions:
        raise InvalidInputError(f"invalid lesion range [{min_lesions}, {max_lesions}]")
    if num_scenes < 0:
        raise InvalidInputError("num_scenes must be >= 0")
    rng = np.random.default_rng(int(seed))
    scenes = []
    for _ in range(int(num_scenes)):
        count = int(rng.integers(min_lesions, max_lesions + 1))
        lesions = _place_lesions(rng, height, width, count, num_classes)
        scenes.append(render_scene(lesions, height, width, num_classes, rng=rng, noise_std=noise_std))
    LOGGER.debug("Generated %d segmentation scenes (%dx%d, K=%d)", len(scenes), height, width, num_classes)
    return scenes


def scene_pixel_features(scene: SegScene) -> np.ndarray:
    """Per-pixel (intensity, row/H, col/W) rows in row-major order."""
    height, width = scene.shape
    rows, cols = np.mgrid[0:height, 0:width]
    return np.column_stack([scene.image.reshape(-1), (rows / height).reshape(-1), (cols / width).reshape(-1)])


def scenes_to_dataset(scenes: Sequence[SegScene], provenance: Provenance = Provenance.TRUE_LABEL) -> LabeledDataset:
    if not scenes:
        raise InvalidInputError("no scenes given")
    features = np.vstack([scene_pixel_features(s) for s in scenes])
    labels = np.concatenate([s.label_grid.reshape(-1) for s in scenes])
    return LabeledDataset.from_arrays(features, labels, scenes[0].num_classes, provenance)


def scenes_to_pool(scenes: Sequence[SegScene]) -> UnlabeledPool:
    if not scenes:
        return UnlabeledPool(features=np.empty((0, 3)), num_classes=0, _diagnostic_labels=np.empty(0, dtype=np.int64))
    features = np.vstack([scene_pixel_features(s) for s in scenes])
    truth = np.concatenate([s.label_grid.reshape(-1) for s in scenes])
    return UnlabeledPool(features=features, num_classes=scenes[0].num_classes, _diagnostic_labels=truth)
