import json
import re

import numpy as np
import pytest

from mciat.config import (
    ConfigError,
    ExperimentConfig,
    apply_override,
    config_schema,
    from_dict,
    load_config,
)


def test_defaults_are_consistent():
    cfg = ExperimentConfig()
    assert cfg.encoder.n_tokens == 150 and cfg.encoder.patch_len == 216
    assert cfg.pretrain.encoder == cfg.encoder


def test_json_roundtrip():
    cfg = ExperimentConfig()
    assert from_dict(json.loads(cfg.to_json())) == cfg
    assert "encoder" not in cfg.to_dict()["pretrain"]


def test_schema_lists_every_section():
    assert set(config_schema()) == {"phantom", "data", "encoder", "pretrain", "finetune", "probe", "association", "seeds"}


def test_unknown_key_names_its_path():
    with pytest.raises(ConfigError, match=r"^pretrain\.weights\.bogus: unknown key"):
        from_dict({"pretrain": {"weights": {"bogus": 1}}})


@pytest.mark.parametrize(
    "data, path",
    [
        ({"pretrain": {"epochs": "10"}}, "pretrain.epochs"),
        ({"pretrain": {"epochs": 1.5}}, "pretrain.epochs"),
        ({"finetune": {"iat": 1}}, "finetune.iat"),
        ({"phantom": {"shape": [30, 36]}}, "phantom.shape"),
        ({"data": []}, "data"),
    ],
)
def test_type_errors_name_the_field(data, path):
    with pytest.raises(ConfigError, match="^" + re.escape(path) + ":"):
        from_dict(data)


def test_value_errors_name_the_section():
    with pytest.raises(ConfigError, match=r"^pretrain:.*mask_ratio"):
        from_dict({"pretrain": {"mask_ratio": 1.5}})


def test_inconsistent_patching_rejected():
    with pytest.raises(ConfigError):
        from_dict({"encoder": {"n_tokens": 10}})


def test_ints_accepted_as_floats():
    cfg = from_dict({"pretrain": {"weights": {"pixel": 1}}})
    assert cfg.pretrain.weights.pixel == 1.0 and isinstance(cfg.pretrain.weights.pixel, float)


def test_override_parses_json_values():
    d = apply_override({}, "pretrain.weights.sd=0")
    apply_override(d, "finetune.iat=false")
    apply_override(d, "finetune.mats.score_source=post")
    assert d == {"pretrain": {"weights": {"sd": 0}}, "finetune": {"iat": False, "mats": {"score_source": "post"}}}


@pytest.mark.parametrize("bad", ["noequals", "a..b=1", "=1"])
def test_malformed_overrides(bad):
    with pytest.raises(ConfigError):
        apply_override({}, bad)


def test_override_into_scalar_rejected():
    with pytest.raises(ConfigError):
        apply_override({"a": 1}, "a.b=2")


def test_load_order_file_then_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"pretrain": {"epochs": 7, "mode": 2}}))
    cfg = load_config(path, ["pretrain.epochs=9"])
    assert cfg.pretrain.epochs == 9 and cfg.pretrain.mode == 2


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "missing.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(bad)
    bad.write_text("[1]")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_seed_flag_shifts_streams_but_explicit_wins(tmp_path):
    cfg = load_config(seed=10)
    assert (cfg.seeds.data, cfg.seeds.init, cfg.seeds.mask, cfg.seeds.folds) == (10, 11, 12, 13)
    cfg = load_config(overrides=["seeds.mask=99"], seed=10)
    assert cfg.seeds.mask == 99 and cfg.seeds.data == 10


def test_seed_streams_are_independent():
    a = ExperimentConfig()
    b = from_dict({"seeds": {"init": 50}})
    assert a.seed("data") == b.seed("data") and a.seed("mask") == b.seed("mask")
    assert a.seed("init") != b.seed("init")
    assert a.seed("data", 0) != a.seed("data", 1)
    np.testing.assert_array_equal(a.rng("folds").random(3), a.rng("folds").random(3))
    with pytest.raises(KeyError):
        a.rng("other")
