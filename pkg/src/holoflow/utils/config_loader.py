"""
Run configuration loading: packaged YAML defaults, optional user file, CLI overrides.
"""

from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import ValidationError

from src.holoflow.exceptions import ConfigurationError
from src.holoflow.models import RunConfig
from src.holoflow.utils.logging_setup import get_logger

logger = get_logger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config" / "run.yaml"


def _read_yaml(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError(f"cannot read config {path}: {e}")
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must be a mapping, got {type(data).__name__}")
    return data


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; ``override`` wins, nested mappings are merged key by key."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Packaged defaults, then ``path`` (if given), then ``overrides``; validated into RunConfig.

    Raises ConfigurationError for unreadable files; invalid values surface as
    pydantic ValidationError.
    """
    data = _read_yaml(DEFAULT_CONFIG_PATH) if DEFAULT_CONFIG_PATH.exists() else {}
    if path:
        data = _merge(data, _read_yaml(Path(path)))
        logger.debug(f"📄 Loaded config from {path}")
    if overrides:
        data = _merge(data, {k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(data)
    except ValidationError:
        logger.error("❌ Invalid run configuration", exc_info=True)
        raise
