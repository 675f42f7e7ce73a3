import json

import pytest

from asknav.config import (
    RunConfig,
    apply_overrides,
    config_hash,
    from_dict,
    load_config,
    save_config,
    to_dict,
)
from asknav.errors import ConfigError


def test_defaults_validate():
    RunConfig().validate()


def test_dict_roundtrip():
    cfg = RunConfig()
    assert from_dict(to_dict(cfg)) == cfg


def test_file_roundtrip(tmp_path):
    cfg = apply_overrides(RunConfig(), ["seed=7", "world.nodes=12"])
    p = tmp_path / "cfg.json"
    save_config(cfg, str(p))
    assert load_config(str(p)) == cfg
    # valid JSON on disk
    json.loads(p.read_text())


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        from_dict({"seed": 0, "bogus": 1})
    with pytest.raises(ConfigError, match="unknown config key"):
        from_dict({"world": {"bogus": 1}})
    with pytest.raises(ConfigError, match="unknown config key"):
        apply_overrides(RunConfig(), ["world.bogus=1"])


def test_override_parsing():
    cfg = apply_overrides(
        RunConfig(),
        [
            "finetune.space=turn-based",
            "finetune.use_pretrained=false",
            "pretrain.train.lr=0.0003",
            "data.gen.question_period=[2, 4]",
            "gameplay.mode=general",
        ],
    )
    assert cfg.finetune.space == "turn-based"
    assert cfg.finetune.use_pretrained is False
    assert cfg.pretrain.train.lr == pytest.approx(3e-4)
    assert tuple(cfg.data.gen.question_period) == (2, 4)
    assert cfg.gameplay.mode == "general"
    cfg.validate()


def test_override_requires_equals():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["seed"])


def test_config_hash_stability_and_sensitivity():
    a = RunConfig()
    assert config_hash(a) == config_hash(RunConfig())
    assert len(config_hash(a)) == 12
    b = apply_overrides(a, ["seed=1"])
    assert config_hash(a) != config_hash(b)


def test_seed_pool_validation():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["train_seeds=[0, 0]"]).validate()
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["unseen_seeds=[0]"]).validate()
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["train_seeds=[]"]).validate()


def test_bad_space_rejected():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["finetune.space=diagonal"]).validate()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.json"))
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(p))


def test_feature_dim_coupling():
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["world.feature_dim=32"]).validate()
    apply_overrides(
        RunConfig(), ["world.feature_dim=32", "encoder.feature_dim=32"]
    ).validate()
