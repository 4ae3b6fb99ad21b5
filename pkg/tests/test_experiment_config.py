import json
import os
import sys
import tempfile

import pytest

# Ensure we can import from repo root
ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), os.pardir))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from main import ConfigError
from modules.experiment_config import (
    apply_overrides,
    load_config_file,
    parse_datagen,
    parse_experiment,
    parse_fractions,
    parse_simulate,
)
from modules.losses import LossFamily

CONFIGS = os.path.join(ROOT, "configs")


def _minimal():
    return {
        "schema_version": 1,
        "task": "classification",
        "labeled_fraction": 0.1,
        "data": {"mixture": "toy_classification"},
    }


def test_shipped_configs_parse():
    cls = parse_experiment(load_config_file(os.path.join(CONFIGS, "classification_experiment.json")))
    assert cls.config.repeats == 5
    assert cls.config.pseudo_noise.flip_rate == 0.3
    assert cls.config.mixture.num_classes == 4
    seg = parse_experiment(load_config_file(os.path.join(CONFIGS, "segmentation_experiment.json")))
    assert seg.config.repeats == 3
    assert seg.fractions == (0.3, 0.5, 0.7)
    assert [g.name for g in seg.config.groupings] == ["ET", "TC", "WT"]
    sim = parse_simulate(load_config_file(os.path.join(CONFIGS, "fig2_simulate.json")))
    assert sim.mixture.total_count == 960 and sim.lattice == 200
    gen = parse_datagen(load_config_file(os.path.join(CONFIGS, "fig2_datagen.json")))
    assert gen.name == "fig2"


def test_missing_required_field_names_path():
    raw = _minimal()
    del raw["labeled_fraction"]
    with pytest.raises(ConfigError) as info:
        parse_experiment(raw)
    assert info.value.field_path == "labeled_fraction"
    raw = _minimal()
    raw["data"] = {}
    with pytest.raises(ConfigError) as info:
        parse_experiment(raw)
    assert info.value.field_path == "data.mixture"


def test_invalid_values_are_config_errors():
    raw = _minimal()
    raw["robust_losses"] = [{"family": "bce", "beta": -1.0}]
    with pytest.raises(ConfigError) as info:
        parse_experiment(raw)
    assert info.value.field_path == "robust_losses[0]"
    raw = _minimal()
    raw["schema_version"] = 2
    with pytest.raises(ConfigError):
        parse_experiment(raw)
    raw = _minimal()
    raw["sgd"] = {"learning_rate": 0.1, "nesterov": True}
    with pytest.raises(ConfigError) as info:
        parse_experiment(raw)
    assert info.value.field_path == "sgd.nesterov"


def test_task_defaults_fill_loss_hyperparameters():
    spec = parse_experiment(dict(_minimal(), robust_losses=["gce", "sce"]))
    gce, sce = spec.config.robust_losses
    assert gce.q_exponent == 0.9
    assert (sce.alpha, sce.gamma) == (0.1, 0.01)
    raw = {"schema_version": 1, "task": "segmentation", "labeled_fraction": 0.5, "robust_losses": ["bce"]}
    assert parse_experiment(raw).config.robust_losses[0].beta == 0.001


def test_overrides_take_precedence():
    raw = dict(_minimal(), robust_losses=[{"family": "gce", "q": 0.9}])
    updated = apply_overrides(raw, {"p": "0.3,0.5,0.7", "robust": "bce", "beta": 1.0, "seed": 4})
    spec = parse_experiment(updated)
    assert spec.fractions == (0.3, 0.5, 0.7)
    assert spec.config.seed == 4
    (loss,) = spec.config.robust_losses
    assert loss.family is LossFamily.BCE and loss.beta == 1.0
    assert raw["labeled_fraction"] == 0.1
    q_only = parse_experiment(apply_overrides(raw, {"q": 0.5}))
    assert q_only.config.robust_losses[0].q_exponent == 0.5


def test_digest_is_stable_under_key_order_and_aliases():
    a = parse_experiment(dict(_minimal(), robust_losses=[{"family": "gce", "q": 0.7}]))
    reordered = json.loads(json.dumps(dict(reversed(list(_minimal().items())))))
    reordered["robust_losses"] = [{"q_exponent": 0.7, "family": "gce"}]
    b = parse_experiment(reordered)
    assert a.digest == b.digest
    c = parse_experiment(dict(_minimal(), robust_losses=[{"family": "gce", "q": 0.8}]))
    assert c.digest != a.digest


def test_parse_fractions_forms():
    assert parse_fractions("0.3, 0.5", "p") == [0.3, 0.5]
    assert parse_fractions(0.2, "p") == [0.2]
    with pytest.raises(ConfigError):
        parse_fractions("0.5,1.5", "p")
    with pytest.raises(ConfigError):
        parse_fractions("a,b", "p")


def test_load_config_file_errors():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "bad.json")
        with open(path, "w", encoding="utf-8") as f:
            f.write("{not json")
        with pytest.raises(ConfigError):
            load_config_file(path)
    with pytest.raises(ConfigError):
        load_config_file(os.path.join(ROOT, "does_not_exist.json"))


def test_datagen_digest_changes_with_spec():
    base = {"schema_version": 1, "kind": "mixture", "mixture": "fig2"}
    assert parse_datagen(base).digest == parse_datagen(dict(base, seed=7)).digest
    assert parse_datagen(base).digest != parse_datagen(dict(base, include_outliers=False)).digest
    with pytest.raises(ConfigError) as info:
        parse_datagen({"schema_version": 1, "kind": "segmentation"})
    assert info.value.field_path == "scenes"
