"""Config schema: strict keys, round-tripping, validation."""
import json

import pytest

from mltr.config import config_to_doc, load_config, parse_config
from mltr.errors import ConfigError


def minimal_doc():
    return {
        "model": {"image": [16, 16], "patch": 4, "dim": 16, "heads": 2,
                  "enc_depth": 1, "dec_depth": 1,
                  "backbone": {"stages": [[4, 3, 2]]}},
        "train": {"epochs": 1, "batch": 4},
        "data": {"synth": {"n_per_class": 2, "seed": 0}},
    }


def test_parse_and_roundtrip():
    run = parse_config(minimal_doc())
    doc = config_to_doc(run)
    again = parse_config(doc)
    assert config_to_doc(again) == doc


def test_unknown_top_level_key():
    doc = minimal_doc()
    doc["optimizer"] = {}
    with pytest.raises(ConfigError, match="optimizer"):
        parse_config(doc)


def test_unknown_toggle_rejected():
    doc = minimal_doc()
    doc["model"]["toggles"] = {"aux_los": True}
    with pytest.raises(ConfigError, match="aux_los"):
        parse_config(doc)


def test_unknown_nested_keys_rejected():
    for section, key in (("model", "dimension"), ("train", "lr"),
                         ("data", "synthetic")):
        doc = minimal_doc()
        doc[section][key] = 1
        with pytest.raises(ConfigError, match=key):
            parse_config(doc)


def test_dim_heads_divisibility_checked():
    doc = minimal_doc()
    doc["model"]["heads"] = 3
    with pytest.raises(ConfigError, match="heads"):
        parse_config(doc)


def test_ratio_range_validated():
    doc = minimal_doc()
    doc["model"]["ratio_range"] = [0.9, 0.3]
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_backbone_channels_default_to_image_channels():
    doc = minimal_doc()
    doc["model"]["channels"] = 1
    run = parse_config(doc)
    assert run.model.backbone.input_channels == 1


def test_invalid_json_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{]")
    with pytest.raises(ConfigError, match="JSON"):
        load_config(path)


def test_defaults_follow_training_protocol():
    run = parse_config(minimal_doc())
    assert run.train.lr_max == 1e-4
    assert run.train.weight_decay == 1e-5
    assert run.model.ratio_lo == 0.3 and run.model.ratio_hi == 0.8
    assert run.model.n_classes == 4
    doc = config_to_doc(run)
    assert doc["train"]["batch"] == 4  # explicit value preserved
    assert json.dumps(doc)  # serializable
