"""Configuration management for the pyramid convolution toolkit."""

import json
import os
from typing import Any, Dict, Mapping, Optional, Type, TypeVar

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from ..core.config import CostModelInput, HeadConfig
from .logging import setup_logger

logger = setup_logger(__name__)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), "..", "..", "config")
DEFAULT_CONFIG_PATH = os.path.join(CONFIG_DIR, "config.json")
DEFAULT_CALIBRATION_PATH = os.path.join(CONFIG_DIR, "calibration.txt")
# Measured values may exceed their committed calibration by this factor.
CALIBRATION_MARGIN = 1.1

ModelT = TypeVar("ModelT", bound=BaseModel)


class ConfigValidationError(Exception):
    """Raised when configuration validation fails."""
    pass


class Calibration(BaseModel):
    """Golden thresholds and the run parameters that produced them."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 7
    size: int = 128
    s0: float = Field(default=0.5, gt=0)
    pre_blur: float = Field(default=2.0, ge=0)
    lemma1_m1_n1: float = Field(default=1.74e-5, gt=0)
    semigroup_t1: float = Field(default=1.0, ge=0)
    semigroup_t2: float = Field(default=1.5, ge=0)
    semigroup_max_abs: float = Field(default=3.77e-6, gt=0)
    jump_max_abs: float = Field(default=2.74e-6, gt=0)
    equivariance_seed: int = 0
    equivariance_size: int = 256
    equivariance_levels: int = 4
    equivariance_m: int = 1
    equivariance_gaussian_max: float = Field(default=1.51e-5, gt=0)
    equivariance_separation_min: float = Field(default=5.0, gt=0)


def validate_config_schema(config: Dict[str, Any]) -> bool:
    """
    Validate the configuration schema.

    Args:
        config (Dict[str, Any]): Configuration dictionary to validate

    Returns:
        bool: True if valid, raises ConfigValidationError if invalid
    """
    required_fields = {
        "head": ["stacks", "channels", "bn_mode", "sepc_variant"],
        "cost_model": ["img_height", "img_width", "levels", "channels"],
        "scale_space": ["s0", "pre_blur"],
    }

    for section, fields in required_fields.items():
        if section not in config:
            raise ConfigValidationError(f"Missing required section: {section}")
        for field in fields:
            if field not in config[section]:
                raise ConfigValidationError(f"Missing required field '{field}' in section '{section}'")
    return True


def load_config(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Load the committed defaults from config.json and the environment.

    Args:
        config_path (Optional[str]): Alternative JSON file, defaults to config/config.json

    Returns:
        Dict[str, Any]: The configuration dictionary

    Raises:
        ConfigValidationError: If configuration validation fails
        FileNotFoundError: If config file not found
        json.JSONDecodeError: If config file is invalid JSON
    """
    load_dotenv()

    try:
        config_path = config_path or os.getenv("PYRAMID_CONFIG", DEFAULT_CONFIG_PATH)

        if not os.path.exists(config_path):
            raise FileNotFoundError(f"Configuration file not found at: {config_path}")

        with open(config_path, "r") as f:
            config = json.load(f)

        validate_config_schema(config)

        return config
    except Exception as e:
        logger.error(f"Failed to load configuration: {e}")
        raise


def read_key_value_file(path: str) -> Dict[str, str]:
    """
    Read a flat key=value file (``#`` comments, blank lines ignored).

    Args:
        path (str): File to read

    Returns:
        Dict[str, str]: Keys mapped to their raw string values

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigValidationError: If a line carries a key without a value
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Configuration file not found at: {path}")
    values = dotenv_values(path)
    missing = [key for key, value in values.items() if value is None]
    if missing:
        raise ConfigValidationError(f"Keys without '=value' in {path}: {', '.join(missing)}")
    return {key.strip().lower(): value.strip() for key, value in values.items()}


def _build(model: Type[ModelT], *layers: Mapping[str, Any]) -> ModelT:
    merged: Dict[str, Any] = {}
    for layer in layers:
        merged.update({k: v for k, v in layer.items() if v is not None})
    try:
        return model(**merged)
    except ValidationError as e:
        logger.error(f"Invalid {model.__name__}: {e}")
        raise ConfigValidationError(str(e)) from e


def split_sections(values: Mapping[str, str]) -> Dict[str, Dict[str, str]]:
    """
    Route flat keys to the head, cost-model and general sections.

    Raises:
        ConfigValidationError: If a key belongs to no section
    """
    head_keys = set(HeadConfig.model_fields)
    cost_keys = set(CostModelInput.model_fields)
    general_keys = {"s0", "pre_blur", "size"}
    sections: Dict[str, Dict[str, str]] = {"head": {}, "cost_model": {}, "general": {}}
    for key, value in values.items():
        known = False
        if key in head_keys:
            sections["head"][key] = value
            known = True
        if key in cost_keys:
            sections["cost_model"][key] = value
            known = True
        if key in general_keys:
            sections["general"][key] = value
            known = True
        if not known:
            raise ConfigValidationError(f"Unknown configuration key: {key}")
    return sections


def load_head_config(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None,
                     base: Optional[Mapping[str, Any]] = None) -> HeadConfig:
    """
    Build a HeadConfig from defaults, an optional key=value file and overrides.

    Args:
        path (Optional[str]): key=value configuration file
        overrides (Optional[Mapping[str, Any]]): Explicit values (e.g. CLI flags); None entries are ignored
        base (Optional[Mapping[str, Any]]): Command-specific defaults, applied below the file

    Returns:
        HeadConfig: The validated configuration
    """
    defaults = load_config()["head"]
    from_file = split_sections(read_key_value_file(path))["head"] if path else {}
    return _build(HeadConfig, defaults, base or {}, from_file, overrides or {})


def load_cost_model(path: Optional[str] = None, overrides: Optional[Mapping[str, Any]] = None) -> CostModelInput:
    """Build a CostModelInput from defaults, an optional key=value file and overrides."""
    defaults = load_config()["cost_model"]
    from_file = split_sections(read_key_value_file(path))["cost_model"] if path else {}
    return _build(CostModelInput, defaults, from_file, overrides or {})


def load_calibration(path: Optional[str] = None) -> Calibration:
    """
    Load the committed golden thresholds.

    Args:
        path (Optional[str]): Calibration file, defaults to config/calibration.txt

    Returns:
        Calibration: Thresholds with the seed, sizes and s0 they were recorded with
    """
    values = read_key_value_file(path or DEFAULT_CALIBRATION_PATH)
    return _build(Calibration, values)


def format_calibration(calibration: Calibration) -> str:
    """Render a calibration in the key=value grammar read by load_calibration."""
    lines = ["# Golden thresholds; regenerate with `python -m src.main calibrate`."]
    for key, value in calibration.model_dump().items():
        lines.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return "\n".join(lines) + "\n"


def write_calibration(calibration: Calibration, path: str):
    with open(path, "w") as f:
        f.write(format_calibration(calibration))
    logger.info(f"Calibration written to {path}")


class ScaleSpaceSettings(BaseModel):
    """Scale-space run parameters: base scale, pre-blur of synthetic noise and image size."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    s0: float = Field(default=0.5, gt=0)
    pre_blur: float = Field(default=2.0, ge=0)
    size: int = Field(default=128, ge=1)


def load_scale_space_settings(path: Optional[str] = None) -> ScaleSpaceSettings:
    """Build ScaleSpaceSettings from the scale_space defaults and the general keys of a key=value file."""
    defaults = load_config()["scale_space"]
    from_file = split_sections(read_key_value_file(path))["general"] if path else {}
    return _build(ScaleSpaceSettings, defaults, from_file)
