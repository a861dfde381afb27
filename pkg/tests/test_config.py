from pathlib import Path

import pytest

from config import (
    ModelConfig,
    SynthSpec,
    TrainConfig,
    build_config,
    from_text,
    log_level,
    output_dir,
    read_config_file,
    runs_database_url,
    split_sections,
    to_text,
)
from errors import ConfigError

DESK_CONF = Path(__file__).resolve().parent.parent / "configs" / "desk_train.conf"


def test_file_values_override_defaults_and_overrides_win(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("EPOCHS=5\nLR_START=0.002\nGRU_HIDDEN=32\n")
    model_vals, train_vals = split_sections(read_config_file(str(conf)), ModelConfig, TrainConfig)
    train_cfg = build_config(TrainConfig, train_vals)
    train_cfg = build_config(TrainConfig, {"epochs": 7}, base=train_cfg)
    model_cfg = build_config(ModelConfig, model_vals)
    assert train_cfg.epochs == 7
    assert train_cfg.lr_start == 0.002
    assert train_cfg.patience == TrainConfig().patience
    assert model_cfg.gru_hidden == 32


def test_keys_shared_between_sections_reach_both(tmp_path):
    conf = tmp_path / "shared.conf"
    conf.write_text("FRAMES=9\nNUM_CLASSES=4\n")
    model_vals, synth_vals = split_sections(read_config_file(str(conf)), ModelConfig, SynthSpec)
    assert build_config(ModelConfig, model_vals).frames == 9
    assert build_config(SynthSpec, synth_vals).num_classes == 4


def test_unknown_key_is_a_config_error(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("EPOCHZ=3\n")
    with pytest.raises(ConfigError, match="EPOCHZ"):
        split_sections(read_config_file(str(conf)), TrainConfig)
    with pytest.raises(ConfigError):
        build_config(TrainConfig, {"epochz": "3"})


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        read_config_file(str(tmp_path / "nope.conf"))


@pytest.mark.parametrize(
    "key,raw,expected",
    [
        ("record_wallclock", "yes", True),
        ("record_wallclock", "off", False),
        ("lr_floor", "1e-6", 1e-6),
        ("variant", "glmim", "glmim"),
    ],
)
def test_string_values_are_coerced(key, raw, expected):
    assert getattr(build_config(TrainConfig, {key: raw}), key) == expected


def test_tuple_and_pair_fields_parse():
    model = build_config(ModelConfig, {"backbone_channels": "8,16", "backbone_strides": "1,2", "lmim_hidden": "none"})
    assert model.backbone_channels == (8, 16)
    assert model.lmim_hidden is None
    assert model.lmim_width == 32
    spec = build_config(SynthSpec, {"confusable_pairs": "0-1,6-7", "speed_warp": "0.8,1.2"})
    assert spec.confusable_pairs == ((0, 1), (6, 7))
    assert spec.speed_warp == (0.8, 1.2)


def test_unparseable_value_names_the_key():
    with pytest.raises(ConfigError, match="epochs"):
        build_config(TrainConfig, {"epochs": "many"})
    with pytest.raises(ConfigError, match="conv3d_kernel"):
        build_config(ModelConfig, {"conv3d_kernel": "3,3"})


def test_text_form_reproduces_the_config():
    cfg = ModelConfig(frames=7, backbone_channels=(4, 8), backbone_strides=(1, 2), resnet_stem=True, lmim_hidden=5)
    assert from_text(ModelConfig, to_text(cfg)) == cfg
    spec = SynthSpec(confusable_pairs=((2, 5),), speed_warp=(0.9, 1.1))
    assert from_text(SynthSpec, to_text(spec)) == spec


def test_desk_config_file_is_valid():
    model_vals, train_vals, synth_vals = split_sections(read_config_file(str(DESK_CONF)), ModelConfig, TrainConfig, SynthSpec)
    assert build_config(ModelConfig, model_vals).validate().feature_channels == 32
    train_cfg = build_config(TrainConfig, train_vals).validate()
    assert train_cfg.lr_start == 0.001
    assert train_cfg.phase1_epochs == 3
    spec = build_config(SynthSpec, synth_vals).validate()
    assert spec.confusable_pairs == ((0, 1), (2, 3), (4, 5))
    assert spec.glyph_distractors and spec.distractor_gain == 0.5


def test_full_scale_layout():
    cfg = ModelConfig.full_scale().validate()
    assert (cfg.frames, cfg.image_size, cfg.num_classes) == (29, 88, 500)
    assert cfg.feature_channels == 512
    assert cfg.lmim_width == 1024
    assert cfg.gru_hidden == 1024


@pytest.mark.parametrize(
    "overrides",
    [
        {"conv3d_stride": (2, 2, 2)},
        {"conv3d_padding": (0, 2, 2)},
        {"backbone_strides": (1,)},
        {"keep_prob": 0.0},
        {"gru_layers": 0},
    ],
)
def test_invalid_model_configs(overrides):
    with pytest.raises(ConfigError):
        ModelConfig(**overrides).validate()


@pytest.mark.parametrize(
    "overrides",
    [
        {"variant": "deluxe"},
        {"phase_schedule": "backend-only"},
        {"lr_floor": 1.0},
        {"batch_size": 1},
        {"patience": 0},
    ],
)
def test_invalid_train_configs(overrides):
    with pytest.raises(ConfigError):
        TrainConfig(**overrides).validate()


@pytest.mark.parametrize(
    "overrides",
    [
        {"window_min": 1},
        {"window_max": 20},
        {"confusable_pairs": ((0, 0),)},
        {"confusable_pairs": ((0, 1), (1, 2))},
        {"confusable_pairs": ((0, 10),)},
        {"speed_warp": (1.5, 1.0)},
        {"distractor_gain": 1.5},
        {"distractor_pool": -1},
    ],
)
def test_invalid_synth_specs(overrides):
    with pytest.raises(ConfigError):
        SynthSpec(**overrides).validate()


def test_environment_helpers(monkeypatch):
    monkeypatch.setenv("MIM_RUNS_DATABASE_URL", "  sqlite:///x.db ")
    monkeypatch.setenv("MIM_LOG_LEVEL", "debug")
    monkeypatch.setenv("MIM_OUTPUT_DIR", "out/runs")
    assert runs_database_url() == "sqlite:///x.db"
    assert log_level() == "DEBUG"
    assert output_dir() == Path("out/runs")
    monkeypatch.delenv("MIM_RUNS_DATABASE_URL")
    monkeypatch.delenv("MIM_LOG_LEVEL")
    assert runs_database_url() == ""
    assert log_level() == "INFO"
