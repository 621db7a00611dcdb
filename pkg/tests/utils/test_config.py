"""Tests for configuration loading and the key=value grammar."""

import json

import pytest

from src.core.config import BNMode, SepcVariant, SizeMode
from src.utils.config import (Calibration, ConfigValidationError, format_calibration, load_calibration,
                              load_config, load_cost_model, load_head_config, load_scale_space_settings,
                              read_key_value_file, split_sections, validate_config_schema, write_calibration)


@pytest.fixture
def kv_file(tmp_path):
    """Provide a writer for key=value files."""
    def write(text, name="head.cfg"):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return write


def test_committed_config_is_valid():
    """Test config/config.json passes schema validation."""
    config = load_config()
    assert config["head"]["stacks"] == 4
    assert config["cost_model"]["img_height"] == 1280


def test_committed_config_has_only_consumed_sections():
    """Test every section of config/config.json is read by a loader."""
    assert set(load_config()) == {"head", "cost_model", "scale_space"}


def test_schema_validation_names_missing_parts():
    """Test missing sections and fields raise ConfigValidationError."""
    config = load_config()
    broken = {key: value for key, value in config.items() if key != "scale_space"}
    with pytest.raises(ConfigValidationError, match="scale_space"):
        validate_config_schema(broken)
    broken = {**config, "head": {"stacks": 4}}
    with pytest.raises(ConfigValidationError, match="channels"):
        validate_config_schema(broken)


def test_config_path_from_environment(tmp_path, monkeypatch):
    """Test PYRAMID_CONFIG selects another JSON file."""
    config = load_config()
    config["head"]["stacks"] = 3
    path = tmp_path / "alt.json"
    path.write_text(json.dumps(config))
    monkeypatch.setenv("PYRAMID_CONFIG", str(path))
    assert load_config()["head"]["stacks"] == 3
    assert load_head_config().stacks == 3


def test_missing_config_file(tmp_path):
    """Test a missing JSON file raises FileNotFoundError."""
    with pytest.raises(FileNotFoundError):
        load_config(str(tmp_path / "absent.json"))


def test_read_key_value_file(kv_file):
    """Test comments and blank lines are ignored and keys are lower-cased."""
    path = kv_file("# head settings\n\nSTACKS=3\nbn_mode=single\nsepc_variant=lite\n")
    assert read_key_value_file(path) == {"stacks": "3", "bn_mode": "single", "sepc_variant": "lite"}


def test_key_without_value(kv_file):
    """Test a bare key is rejected."""
    with pytest.raises(ConfigValidationError):
        read_key_value_file(kv_file("stacks\n"))


def test_unknown_key(kv_file):
    """Test keys outside every section are rejected."""
    with pytest.raises(ConfigValidationError, match="colour"):
        load_head_config(kv_file("colour=red\n"))


def test_split_sections_routes_shared_keys():
    """Test channels feeds both the head and the cost model."""
    sections = split_sections({"channels": "64", "size_mode": "ceil", "s0": "0.25"})
    assert sections["head"] == {"channels": "64"}
    assert sections["cost_model"] == {"channels": "64", "size_mode": "ceil"}
    assert sections["general"] == {"s0": "0.25"}


def test_head_config_precedence(kv_file):
    """Test defaults < base < file < overrides."""
    path = kv_file("stacks=3\nchannels=16\nbn_mode=off\n")
    cfg = load_head_config(path, overrides={"channels": 8, "sepc_variant": None}, base={"stacks": 2, "seed": 5})
    assert cfg.stacks == 3
    assert cfg.channels == 8
    assert cfg.seed == 5
    assert cfg.bn_mode is None
    assert cfg.sepc_variant == SepcVariant.NONE


def test_head_config_outputs(kv_file):
    """Test num_classes and anchors populate the output pair."""
    cfg = load_head_config(kv_file("num_classes=80\nanchors=9\nbn_mode=independent\n"))
    assert cfg.outputs == (80, 9)
    assert cfg.bn_mode == BNMode.INDEPENDENT


@pytest.mark.parametrize("text", ["stacks=9\n", "sepc_variant=huge\n", "num_classes=80\n", "channels=0\n"])
def test_invalid_head_values(kv_file, text):
    """Test out-of-range or inconsistent values raise ConfigValidationError."""
    with pytest.raises(ConfigValidationError):
        load_head_config(kv_file(text))


def test_cost_model_overrides(kv_file):
    """Test cost-model keys from a file and overrides."""
    inp = load_cost_model(kv_file("img_height=640\nstacks=2\n"), overrides={"size_mode": "ceil"})
    assert inp.img_height == 640
    assert inp.img_width == 800
    assert inp.size_mode == SizeMode.CEIL


def test_scale_space_settings(kv_file):
    """Test general keys override the scale_space defaults."""
    assert load_scale_space_settings().s0 == 0.5
    settings = load_scale_space_settings(kv_file("s0=0.25\nsize=64\n"))
    assert settings.s0 == 0.25
    assert settings.size == 64
    assert settings.pre_blur == 2.0


def test_committed_calibration_loads():
    """Test config/calibration.txt parses into a Calibration."""
    cal = load_calibration()
    assert cal.seed == 7
    assert cal.size == 128
    assert cal.lemma1_m1_n1 > 0


def test_calibration_round_trip(tmp_path):
    """Test write_calibration output reads back to an equal model."""
    cal = Calibration(lemma1_m1_n1=0.0012345678901234567, equivariance_separation_min=123.5, seed=11)
    path = str(tmp_path / "cal.txt")
    write_calibration(cal, path)
    assert load_calibration(path) == cal
    assert format_calibration(cal).startswith("#")


def test_calibration_rejects_unknown_keys(kv_file):
    """Test stray keys in a calibration file are rejected."""
    with pytest.raises(ConfigValidationError):
        load_calibration(kv_file("seed=1\nmystery=2\n", name="cal.txt"))
