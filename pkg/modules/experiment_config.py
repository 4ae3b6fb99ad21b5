"""
JSON configuration files (schema version 1) for the experiment, simulate and
datagen commands.

Raw dicts are validated field by field; any problem raises ``ConfigError``
carrying the dotted path of the offending field. Command-line overrides are
applied to the raw dict before parsing so they go through the same checks.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

from main import (
    CLASSIFICATION_DEFAULTS,
    SEGMENTATION_DEFAULTS,
    ConfigError,
    RobustPLError,
    stable_digest,
)
from modules.datagen import MixtureSpec, NoiseSpec, preset_spec
from modules.losses import LossFamily, RobustLossConfig
from modules.model import Architecture, SgdConfig
from modules.pipeline import (
    TASK_CLASSIFICATION,
    TASK_SEGMENTATION,
    ClassGrouping,
    DEFAULT_GROUPINGS,
    ExperimentConfig,
)

LOGGER = logging.getLogger("RobustPL.CLI")

SCHEMA_VERSION = 1
DATAGEN_MIXTURE = "mixture"
DATAGEN_SEGMENTATION = "segmentation"
DEFAULT_LATTICE = 200
DEFAULT_MARGIN = 2.0

_LOSS_OVERRIDES = ("q_exponent", "beta", "A", "alpha", "gamma")


# ---------- Raw access helpers ----------
def load_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("top-level value must be an object", "$")
    return data


def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def _require(data: Mapping[str, Any], key: str, prefix: str = "") -> Any:
    if key not in data or data[key] is None:
        raise ConfigError("missing required field", _join(prefix, key))
    return data[key]


def _section(data: Mapping[str, Any], key: str, prefix: str = "") -> Dict[str, Any]:
    value = data.get(key)
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError("must be an object", _join(prefix, key))
    return value


def _as_int(value: Any, path: str, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"must be an integer, got {value!r}", path)
    value = int(value)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}, got {value}", path)
    return value


def _as_float(value: Any, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"must be a number, got {value!r}", path)
    return float(value)


def _check_schema(data: Mapping[str, Any]) -> None:
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema version {version!r} (expected {SCHEMA_VERSION})", "schema_version")


def _wrap(path: str, fn, *args, **kwargs):
    """Run a constructor and re-raise library validation errors as ConfigError at ``path``."""
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except (RobustPLError, TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc), path) from None
    except OSError as exc:
        raise ConfigError(f"cannot read {exc.filename or 'file'}: {exc.strerror or exc}", path) from None


# ---------- Shared sections ----------
def parse_mixture(value: Any, path: str) -> MixtureSpec:
    if isinstance(value, str):
        return _wrap(path, preset_spec, value)
    if not isinstance(value, dict):
        raise ConfigError("must be a preset name or a mixture object", path)
    if not value.get("components"):
        raise ConfigError("missing required field", _join(path, "components"))
    return _wrap(path, MixtureSpec.from_dict, value)


_SGD_FIELDS = {"learning_rate", "momentum", "weight_decay", "lr_schedule", "epochs", "batch_size"}


def parse_sgd(data: Mapping[str, Any], path: str, base: Optional[Mapping[str, Any]] = None, base_path: str = "sgd") -> SgdConfig:
    for section, section_path in ((base or {}, base_path), (data, path)):
        for key in section:
            if key not in _SGD_FIELDS:
                raise ConfigError("unknown field", _join(section_path, key))
    merged = dict(base or {})
    merged.update(data)
    return _wrap(path, SgdConfig, **merged)


def parse_architecture(data: Mapping[str, Any], path: str) -> Architecture:
    hidden = data.get("hidden", [])
    if not isinstance(hidden, list):
        raise ConfigError("must be a list of layer widths", _join(path, "hidden"))
    widths = tuple(_as_int(h, f"{path}.hidden[{i}]", minimum=1) for i, h in enumerate(hidden))
    return _wrap(path, Architecture, hidden=widths, activation=data.get("activation", "relu"))


def parse_loss(data: Any, path: str, defaults: Optional[Mapping[str, Any]] = None) -> RobustLossConfig:
    if isinstance(data, str):
        data = {"family": data}
    if not isinstance(data, dict):
        raise ConfigError("must be a family name or a loss object", path)
    _require(data, "family", path)
    return _wrap(path, RobustLossConfig.from_dict, data, defaults)


def parse_noise(data: Any, path: str) -> Optional[NoiseSpec]:
    if data is None:
        return None
    if not isinstance(data, dict):
        raise ConfigError("must be an object", path)
    rate = _as_float(_require(data, "flip_rate", path), _join(path, "flip_rate"))
    return _wrap(path, NoiseSpec, flip_rate=rate, scheme=data.get("scheme", "uniform_symmetric"))


def parse_fractions(value: Any, path: str) -> List[float]:
    if isinstance(value, str):
        parts = [v.strip() for v in value.split(",") if v.strip()]
        try:
            values = [float(v) for v in parts]
        except ValueError:
            raise ConfigError(f"not a comma-separated list of numbers: {value!r}", path) from None
    elif isinstance(value, list):
        values = [_as_float(v, f"{path}[{i}]") for i, v in enumerate(value)]
    else:
        values = [_as_float(value, path)]
    if not values:
        raise ConfigError("needs at least one fraction", path)
    for v in values:
        if not 0.0 < v < 1.0:
            raise ConfigError(f"fractions must lie in (0, 1), got {v}", path)
    return values


def task_defaults(task: str, settings: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    key = "segmentation_defaults" if task == TASK_SEGMENTATION else "classification_defaults"
    base = SEGMENTATION_DEFAULTS if task == TASK_SEGMENTATION else CLASSIFICATION_DEFAULTS
    merged = dict(base)
    if settings and isinstance(settings.get(key), dict):
        merged.update(settings[key])
    return merged


# ---------- Overrides ----------
def apply_overrides(raw: Mapping[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    """Return a copy of ``raw`` with flag values applied on top.

    Known keys: p, robust, q, beta, A, alpha, gamma, seed, repeats, n_jobs.
    ``None`` means "not given". Loss hyperparameters are applied to every
    robust loss entry (or to the one named by ``robust``).
    """
    data = json.loads(json.dumps(raw))
    if overrides.get("p") is not None:
        data["labeled_fraction"] = overrides["p"]
    for key in ("seed", "repeats", "n_jobs"):
        if overrides.get(key) is not None:
            data[key] = overrides[key]
    loss_fields = {}
    for key in _LOSS_OVERRIDES:
        flag = "q" if key == "q_exponent" else key
        if overrides.get(flag) is not None:
            loss_fields[key] = overrides[flag]
    if overrides.get("robust"):
        families = [f.strip() for f in str(overrides["robust"]).split(",") if f.strip()]
        data["robust_losses"] = [dict({"family": f}, **loss_fields) for f in families]
        data["robust"] = dict(data["robust_losses"][0])
    elif loss_fields:
        if isinstance(data.get("robust_losses"), list):
            data["robust_losses"] = [_merged_loss(entry, loss_fields) for entry in data["robust_losses"]]
        if isinstance(data.get("robust"), (dict, str)):
            data["robust"] = _merged_loss(data["robust"], loss_fields)
    return data


def _merged_loss(entry: Any, fields: Mapping[str, Any]) -> Any:
    if isinstance(entry, str):
        entry = {"family": entry}
    if not isinstance(entry, dict):
        return entry
    out = dict(entry)
    if "q_exponent" in fields:
        out.pop("q", None)
    out.update(fields)
    return out


# ---------- Experiment ----------
@dataclass(frozen=True, eq=False)
class ExperimentSpec:
    config: ExperimentConfig
    fractions: Tuple[float, ...]
    echo: Dict[str, Any] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return stable_digest(self.echo)


def _parse_groupings(value: Any, path: str) -> Tuple[ClassGrouping, ...]:
    if value is None:
        return DEFAULT_GROUPINGS
    if not isinstance(value, dict) or not value:
        raise ConfigError("must be an object mapping region names to class lists", path)
    out = []
    for name, classes in value.items():
        if not isinstance(classes, list):
            raise ConfigError("must be a list of class indices", _join(path, name))
        idx = tuple(_as_int(c, f"{path}.{name}[{i}]", minimum=0) for i, c in enumerate(classes))
        out.append(_wrap(_join(path, name), ClassGrouping, str(name), idx))
    return tuple(out)


def parse_experiment(raw: Mapping[str, Any], settings: Optional[Mapping[str, Any]] = None, base_dir: str = ".") -> ExperimentSpec:
    _check_schema(raw)
    task = _require(raw, "task")
    if task not in (TASK_CLASSIFICATION, TASK_SEGMENTATION):
        raise ConfigError(f"must be {TASK_CLASSIFICATION!r} or {TASK_SEGMENTATION!r}, got {task!r}", "task")
    fractions = parse_fractions(_require(raw, "labeled_fraction"), "labeled_fraction")
    seed = _as_int(raw.get("seed", 0), "seed", minimum=0)
    repeats = _as_int(raw.get("repeats", 3), "repeats", minimum=1)
    n_jobs = _as_int(raw.get("n_jobs", (settings or {}).get("n_jobs", 1)), "n_jobs", minimum=1)

    shared_sgd = _section(raw, "sgd")
    teacher_sgd = parse_sgd(_section(raw, "teacher_sgd"), "teacher_sgd", shared_sgd)
    student_sgd = parse_sgd(_section(raw, "student_sgd"), "student_sgd", shared_sgd)
    architecture = parse_architecture(_section(raw, "architecture"), "architecture")

    defaults = task_defaults(task, settings)
    losses_raw = raw.get("robust_losses")
    if losses_raw is None:
        losses_raw = [{"family": LossFamily.BCE.value}]
    if not isinstance(losses_raw, list) or not losses_raw:
        raise ConfigError("must be a non-empty list", "robust_losses")
    robust = tuple(parse_loss(entry, f"robust_losses[{i}]", defaults) for i, entry in enumerate(losses_raw))

    data = _section(raw, "data")
    kwargs: Dict[str, Any] = {}
    if task == TASK_CLASSIFICATION:
        if data.get("train_csv"):
            from modules.dataset_io import read_dataset_csv

            kwargs["train_dataset"] = _wrap("data.train_csv", read_dataset_csv, os.path.join(base_dir, data["train_csv"]))
            if not data.get("test_csv"):
                raise ConfigError("missing required field (needed with train_csv)", "data.test_csv")
            kwargs["test_dataset"] = _wrap("data.test_csv", read_dataset_csv, os.path.join(base_dir, data["test_csv"]))
        else:
            kwargs["mixture"] = parse_mixture(_require(data, "mixture", "data"), "data.mixture")
        kwargs["test_count_per_class"] = _as_int(data.get("test_count_per_class", 300), "data.test_count_per_class", minimum=1)
    else:
        kwargs["train_scenes"] = _as_int(data.get("train_scenes", 30), "data.train_scenes", minimum=2)
        kwargs["test_scenes"] = _as_int(data.get("test_scenes", 20), "data.test_scenes", minimum=1)
        kwargs["scene_height"] = _as_int(data.get("height", 32), "data.height", minimum=8)
        kwargs["scene_width"] = _as_int(data.get("width", 32), "data.width", minimum=8)
        kwargs["seg_classes"] = _as_int(data.get("num_classes", 4), "data.num_classes", minimum=2)
        kwargs["groupings"] = _parse_groupings(raw.get("groupings"), "groupings")

    min_conf = raw.get("min_confidence")
    if min_conf is not None:
        min_conf = _as_float(min_conf, "min_confidence")
        if not 0.0 <= min_conf <= 1.0:
            raise ConfigError(f"must lie in [0, 1], got {min_conf}", "min_confidence")

    cfg = _wrap(
        "$",
        ExperimentConfig,
        task=task,
        labeled_fraction=fractions[0],
        teacher_sgd=teacher_sgd,
        student_sgd=student_sgd,
        robust_losses=robust,
        architecture=architecture,
        repeats=repeats,
        seed=seed,
        pseudo_noise=parse_noise(raw.get("pseudo_noise"), "pseudo_noise"),
        min_confidence=min_conf,
        n_jobs=n_jobs,
        **kwargs,
    )
    return ExperimentSpec(config=cfg, fractions=tuple(fractions), echo=experiment_echo(cfg, fractions, data))


def experiment_echo(cfg: ExperimentConfig, fractions: Sequence[float], data_section: Mapping[str, Any]) -> Dict[str, Any]:
    """Normalised view of a parsed experiment; equal configs give equal echoes."""
    echo: Dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "task": cfg.task,
        "labeled_fraction": [float(p) for p in fractions],
        "seed": cfg.seed,
        "repeats": cfg.repeats,
        "teacher_sgd": _sgd_echo(cfg.teacher_sgd),
        "student_sgd": _sgd_echo(cfg.student_sgd),
        "architecture": cfg.architecture.to_dict(),
        "robust_losses": [loss.to_dict() for loss in cfg.robust_losses],
        "pseudo_noise": None if cfg.pseudo_noise is None else {"flip_rate": cfg.pseudo_noise.flip_rate, "scheme": cfg.pseudo_noise.scheme},
        "min_confidence": cfg.min_confidence,
    }
    if cfg.task == TASK_CLASSIFICATION:
        echo["data"] = {"test_count_per_class": cfg.test_count_per_class}
        if cfg.mixture is not None:
            echo["data"]["mixture"] = cfg.mixture.to_dict()
        else:
            echo["data"]["train_csv"] = data_section.get("train_csv")
            echo["data"]["test_csv"] = data_section.get("test_csv")
    else:
        echo["data"] = {
            "train_scenes": cfg.train_scenes,
            "test_scenes": cfg.test_scenes,
            "height": cfg.scene_height,
            "width": cfg.scene_width,
            "num_classes": cfg.seg_classes,
        }
        echo["groupings"] = {g.name: list(g.classes) for g in cfg.groupings}
    return echo


def _sgd_echo(cfg: SgdConfig) -> Dict[str, Any]:
    out = cfg.to_dict()
    out.pop("seed", None)
    return out


# ---------- Simulate ----------
@dataclass(frozen=True, eq=False)
class SimulateSpec:
    mixture: MixtureSpec
    robust: RobustLossConfig
    sgd: SgdConfig
    architecture: Architecture
    seed: int = 0
    repeats: int = 3
    test_count_per_class: int = 300
    lattice: int = DEFAULT_LATTICE
    x_range: Optional[Tuple[float, float]] = None
    y_range: Optional[Tuple[float, float]] = None
    echo: Dict[str, Any] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return stable_digest(self.echo)


def _parse_range(value: Any, path: str) -> Optional[Tuple[float, float]]:
    if value is None:
        return None
    if not isinstance(value, list) or len(value) != 2:
        raise ConfigError("must be a [low, high] pair", path)
    low, high = _as_float(value[0], f"{path}[0]"), _as_float(value[1], f"{path}[1]")
    if not low < high:
        raise ConfigError(f"low must be < high, got [{low}, {high}]", path)
    return low, high


def parse_simulate(raw: Mapping[str, Any], settings: Optional[Mapping[str, Any]] = None) -> SimulateSpec:
    _check_schema(raw)
    mixture = parse_mixture(raw.get("mixture", "fig2"), "mixture")
    if mixture.dim != 2:
        raise ConfigError(f"the decision grid needs 2-D features, got d={mixture.dim}", "mixture")
    robust = parse_loss(raw.get("robust", {"family": LossFamily.BCE.value}), "robust", task_defaults(TASK_CLASSIFICATION, settings))
    sgd = parse_sgd(_section(raw, "sgd"), "sgd")
    architecture = parse_architecture(_section(raw, "architecture"), "architecture")
    lattice_section = _section(raw, "lattice")
    spec = SimulateSpec(
        mixture=mixture,
        robust=robust,
        sgd=sgd,
        architecture=architecture,
        seed=_as_int(raw.get("seed", 0), "seed", minimum=0),
        repeats=_as_int(raw.get("repeats", 3), "repeats", minimum=1),
        test_count_per_class=_as_int(raw.get("test_count_per_class", 300), "test_count_per_class", minimum=1),
        lattice=_as_int(lattice_section.get("resolution", DEFAULT_LATTICE), "lattice.resolution", minimum=2),
        x_range=_parse_range(lattice_section.get("x_range"), "lattice.x_range"),
        y_range=_parse_range(lattice_section.get("y_range"), "lattice.y_range"),
    )
    echo = {
        "schema_version": SCHEMA_VERSION,
        "mixture": mixture.to_dict(),
        "robust": robust.to_dict(),
        "sgd": _sgd_echo(sgd),
        "architecture": architecture.to_dict(),
        "seed": spec.seed,
        "repeats": spec.repeats,
        "test_count_per_class": spec.test_count_per_class,
        "lattice": {"resolution": spec.lattice, "x_range": spec.x_range and list(spec.x_range), "y_range": spec.y_range and list(spec.y_range)},
    }
    object.__setattr__(spec, "echo", echo)
    return spec


# ---------- Datagen ----------
@dataclass(frozen=True, eq=False)
class DatagenSpec:
    kind: str
    seed: int
    name: str
    mixture: Optional[MixtureSpec] = None
    include_outliers: bool = True
    noise: Optional[NoiseSpec] = None
    scenes: int = 0
    height: int = 32
    width: int = 32
    num_classes: int = 4
    echo: Dict[str, Any] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return stable_digest(self.echo)


def parse_datagen(raw: Mapping[str, Any]) -> DatagenSpec:
    _check_schema(raw)
    kind = raw.get("kind", DATAGEN_MIXTURE)
    if kind not in (DATAGEN_MIXTURE, DATAGEN_SEGMENTATION):
        raise ConfigError(f"must be {DATAGEN_MIXTURE!r} or {DATAGEN_SEGMENTATION!r}, got {kind!r}", "kind")
    seed = _as_int(raw.get("seed", 0), "seed", minimum=0)
    name = raw.get("name", "dataset")
    if not isinstance(name, str) or not name or os.sep in name:
        raise ConfigError(f"must be a plain file stem, got {name!r}", "name")
    if kind == DATAGEN_MIXTURE:
        mixture = parse_mixture(_require(raw, "mixture"), "mixture")
        include_outliers = bool(raw.get("include_outliers", True))
        noise = parse_noise(raw.get("noise"), "noise")
        echo = {
            "schema_version": SCHEMA_VERSION,
            "kind": kind,
            "mixture": mixture.to_dict(),
            "include_outliers": include_outliers,
            "noise": None if noise is None else {"flip_rate": noise.flip_rate, "scheme": noise.scheme},
        }
        return DatagenSpec(kind, seed, name, mixture=mixture, include_outliers=include_outliers, noise=noise, echo=echo)
    spec = DatagenSpec(
        kind,
        seed,
        name,
        scenes=_as_int(_require(raw, "scenes"), "scenes", minimum=1),
        height=_as_int(raw.get("height", 32), "height", minimum=8),
        width=_as_int(raw.get("width", 32), "width", minimum=8),
        num_classes=_as_int(raw.get("num_classes", 4), "num_classes", minimum=2),
    )
    echo = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "scenes": spec.scenes,
        "height": spec.height,
        "width": spec.width,
        "num_classes": spec.num_classes,
    }
    object.__setattr__(spec, "echo", echo)
    return spec
