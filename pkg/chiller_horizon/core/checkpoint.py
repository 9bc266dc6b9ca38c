from pathlib import Path
from typing import Any, Dict, Optional, Union
import json
import os

from chiller_horizon.core.errors import ConfigError


CHECKPOINT_VERSION = 1
CHECKPOINT_KEYS = (
    "version",
    "kind",
    "config_hash",
    "architecture",
    "params",
    "obs_norm",
    "optimizer",
    "rng_state",
    "batch_index",
    "extra",
)


def save_checkpoint(path: Union[str, Path], payload: Dict[str, Any]) -> Path:
    """Write a checkpoint document atomically: temp file first, then ``os.replace``."""
    path = Path(path)
    document = {key: payload.get(key) for key in CHECKPOINT_KEYS}
    document["version"] = CHECKPOINT_VERSION
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_suffix(path.suffix + ".tmp")
    with open(temp_path, "w", encoding="utf-8") as f:
        json.dump(document, f, separators=(",", ":"))
    os.replace(temp_path, path)
    return path


def load_checkpoint(path: Union[str, Path], kind: Optional[str] = None) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc

    if not isinstance(payload, dict):
        raise ConfigError(f"checkpoint {path} is not a JSON object")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')!r} in {path}")
    missing = [key for key in CHECKPOINT_KEYS if key not in payload]
    if missing:
        raise ConfigError(f"checkpoint {path} is missing {missing}")
    if kind is not None and payload["kind"] != kind:
        raise ConfigError(f"checkpoint {path} holds {payload['kind']!r}, expected {kind!r}")
    return payload
