import pydantic
import pytest

from config import (
    CONFIG_ENV_VAR,
    PipelineConfig,
    config_hash,
    dump_config,
    load_config,
    network_hash,
    parse_config,
)
from conftest import ROOT
from errors import ConfigError

TOY = ROOT / "configs" / "toy.toml"


def test_defaults_follow_published_settings():
    cfg = PipelineConfig()
    assert cfg.media.sample_rate == 16000 and cfg.media.fps == 25.0 and cfg.media.window_ms == 200.0
    opt = cfg.stage1.optimizer
    assert (opt.learning_rate, opt.beta1, opt.beta2, opt.constant_epochs) == (0.002, 0.0, 0.9, 50)
    w = cfg.stage1.weights
    assert (w.lambda_FM, w.lambda_PL, w.lambda_CL, w.lambda_BL, w.lambda_RL, w.margin) == (10, 10, 1, 10, 1, 1)
    assert cfg.stage1.adapt_epochs == 5
    assert cfg.stage2.network.past_frames == 2


def test_toy_config_loads():
    cfg = load_config(TOY)
    assert cfg.stage1.network.resolution == 16
    assert cfg.stage2.network.n_res_blocks == 1


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="lambda_XX"):
        parse_config({"stage1": {"weights": {"lambda_XX": 1.0}}})


def test_negative_weight_rejected():
    with pytest.raises(ConfigError, match="lambda_cam"):
        parse_config({"stage2": {"weights": {"lambda_cam": -1.0}}})


def test_non_power_of_two_resolution_rejected():
    with pytest.raises(ConfigError):
        parse_config({"stage1": {"network": {"resolution": 48}}})


def test_assignment_is_validated():
    cfg = PipelineConfig()
    with pytest.raises(pydantic.ValidationError):
        cfg.seed = -1


def test_hashes():
    a, b = PipelineConfig(), PipelineConfig()
    assert config_hash(a) == config_hash(b)
    b.stage1.epochs = 3
    assert config_hash(a) != config_hash(b)
    assert network_hash(a.stage1.network) == network_hash(b.stage1.network)
    b.stage1.network.base_channels = 4
    assert network_hash(a.stage1.network) != network_hash(b.stage1.network)


def test_dump_and_reload(tmp_path):
    cfg = load_config(TOY)
    cfg.stage1.advance_at_epochs = [3, 7]
    path = dump_config(cfg, tmp_path / "run" / "config.toml")
    again = load_config(path)
    assert again == cfg
    assert config_hash(again) == config_hash(cfg)


def test_path_from_environment(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv(CONFIG_ENV_VAR, str(TOY))
    assert load_config().stage2.network.resolution == 16


def test_missing_config_errors(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)
    with pytest.raises(ConfigError, match=CONFIG_ENV_VAR):
        load_config()
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[stage1\nepochs = ", encoding="utf-8")
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(bad)


def test_provider_names_are_checked_at_load():
    with pytest.raises(ConfigError, match="pose"):
        parse_config({"providers": {"pose": "mediapipe"}})
    with pytest.raises(ConfigError, match="perceptual"):
        parse_config({"providers": {"perceptual": "none"}})
    assert parse_config({"providers": {"landmark": "sidecar", "lip_reader": "transcript_echo"}}).providers.landmark == "sidecar"
    cfg = PipelineConfig()
    with pytest.raises(pydantic.ValidationError):
        cfg.providers.embedding = "vgg_face"
