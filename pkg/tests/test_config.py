import json

import pytest

from pscnn.config import EXPERIMENT_SCHEMA, ExperimentConfig, GenConfig, ManualConfig, config_hash, load_json
from pscnn.errors import ConfigurationError
from pscnn.synthetic import default_spec, single_part_spec


def test_experiment_round_trip():
    cfg = ExperimentConfig().with_seed(11)
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert back.localizer.seed == back.classifier.seed == 11


def test_partial_sections_fill_defaults():
    cfg = ExperimentConfig.from_dict({"schema": EXPERIMENT_SCHEMA, "classifier": {"epochs": 2, "part_order": [3, 1]}})
    assert cfg.classifier.epochs == 2 and cfg.classifier.part_order == (3, 1)
    assert cfg.classifier.lr == ExperimentConfig().classifier.lr
    assert cfg.localizer == ExperimentConfig().localizer


@pytest.mark.parametrize(
    "doc, match",
    [
        ({"schema": EXPERIMENT_SCHEMA, "classifer": {}}, "unknown keys"),
        ({"schema": EXPERIMENT_SCHEMA, "localizer": {"learning_rate": 1}}, "unknown keys in localizer"),
        ({"schema": "pscnn.experiment/0"}, "schema"),
        ({}, "schema"),
        ({"schema": EXPERIMENT_SCHEMA, "localizer": {"lr": -1}}, "non-negative"),
        ({"schema": EXPERIMENT_SCHEMA, "manual": {"K": -1}}, "non-negative"),
        ({"schema": EXPERIMENT_SCHEMA, "model": []}, "JSON object"),
    ],
)
def test_experiment_errors(doc, match):
    with pytest.raises(ConfigurationError, match=match):
        ExperimentConfig.from_dict(doc)


def test_gen_presets():
    assert GenConfig().creature_spec() == default_spec()
    assert GenConfig("single_part").creature_spec() == single_part_spec()
    cfg = GenConfig.from_dict({"schema": "pscnn.gen/1", "spec": {"occlusion": 0.0}, "per_class": 4})
    assert cfg.creature_spec().occlusion == 0.0
    custom = GenConfig("custom", default_spec().to_dict())
    assert custom.creature_spec() == default_spec()


def test_gen_errors():
    for doc in (
        {"schema": "pscnn.gen/1", "preset": "birds"},
        {"schema": "pscnn.gen/1", "per_class": 1},
        {"schema": "pscnn.gen/1", "seed": 3},
        {"preset": "default"},
    ):
        with pytest.raises(ConfigurationError):
            GenConfig.from_dict(doc)
    with pytest.raises(ConfigurationError, match="unknown keys in spec"):
        GenConfig(spec={"wings": 2}).creature_spec()


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_load_json_reports_bad_files(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{nope")
    with pytest.raises(ConfigurationError, match="invalid JSON"):
        load_json(p)


def test_manual_sizes():
    assert ManualConfig(0, 0, 0).K == 0
    with pytest.raises(ConfigurationError):
        ManualConfig(T=-1)
