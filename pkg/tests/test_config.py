import json

import pytest

from beamguard import config


def test_defaults_validate():
    cfg = config.build()
    assert cfg["dataset"]["n"] == 4000 and cfg["train"]["epochs"] == 30
    assert cfg["train"]["batch_size"] == 32 and cfg["attack"]["data_fraction"] == 0.5
    assert cfg["grid"]["epsilons"] == [0.02, 0.03, 0.04, 0.05]


def test_precedence_flags_over_file_over_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"dataset": {"n": 50}, "train": {"epochs": 2}}))
    cfg = config.build({"train": {"epochs": 5}}, path)
    assert cfg["dataset"]["n"] == 50 and cfg["train"]["epochs"] == 5
    assert cfg["train"]["batch_size"] == 32


@pytest.mark.parametrize("bad", [
    {"datset": {"n": 5}},
    {"dataset": {"size": 5}},
    {"dataset": {"n": "five"}},
    {"frm": {"enabled": 1}},
    {"train": {"learning_rate": float("nan")}},
    {"dataset": 3},
])
def test_unknown_or_mistyped_entries_rejected(bad):
    with pytest.raises(config.ConfigError):
        config.build(bad)


@pytest.mark.parametrize("bad", [
    {"dataset": {"fractions": [0.5, 0.5, 0.5]}},
    {"attack": {"data_fraction": 0.0}},
    {"attack": {"detector": "yolo"}},
    {"grid": {"epsilons": [0.02]}},
    {"grid": {"topk": [17]}},
    {"train": {"epochs": -1}},
])
def test_semantic_validation(bad):
    with pytest.raises(config.ConfigError):
        config.build(bad)


def test_nullable_bottleneck():
    assert config.build({"frm": {"bottleneck_channels": None}})["frm"]["bottleneck_channels"] is None
    assert config.build({"frm": {"bottleneck_channels": 8}})["frm"]["bottleneck_channels"] == 8
    with pytest.raises(config.ConfigError):
        config.build({"frm": {"depth": None}})


def test_bad_file(tmp_path):
    with pytest.raises(config.ConfigError):
        config.build(path=tmp_path / "absent.json")
    (tmp_path / "x.json").write_text("{not json")
    with pytest.raises(config.ConfigError):
        config.build(path=tmp_path / "x.json")
    (tmp_path / "y.json").write_text("[1, 2]")
    with pytest.raises(config.ConfigError):
        config.build(path=tmp_path / "y.json")


def test_config_hash_stable_and_sensitive():
    a, b = config.build(), config.build()
    assert config.config_hash(a) == config.config_hash(b)
    c = config.build({"seeds": {"train": 1}})
    assert config.config_hash(a) != config.config_hash(c)
    assert config.config_hash(a, ["dataset"]) == config.config_hash(c, ["dataset"])


def test_build_does_not_mutate_defaults():
    config.build({"dataset": {"scenarios": ["single"]}})
    assert config.DEFAULTS["dataset"]["scenarios"] == ["single", "sparse", "dense", "mixed"]
