"""
Resolves ambient settings (quiet mode, thread count, output directory).
Works the same from the CLI, from run_experiment.py subprocesses and from tests.
"""
import json
import os
from pathlib import Path

from dotenv import dotenv_values

_ENV_FILE = Path(__file__).resolve().parent / ".env"
_CONFIG_ENV_KEY = "POSEUNC_CONFIG"


def _read_dotenv() -> dict:
    """Parses .env next to this file; missing file gives an empty dict."""
    if not _ENV_FILE.exists():
        return {}
    return {k: v for k, v in dotenv_values(_ENV_FILE).items() if v is not None}


def _read_config_settings() -> dict:
    """
    Reads the "settings" block of the experiment JSON named by POSEUNC_CONFIG.
    Keys are matched case-insensitively against setting names.
    """
    path = os.environ.get(_CONFIG_ENV_KEY, "")
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            block = json.load(f).get("settings", {})
    except (OSError, json.JSONDecodeError, AttributeError):
        return {}
    return {str(k).upper(): str(v) for k, v in block.items()}


def get_setting(key: str, default: str = "") -> str:
    """
    Returns the value of a setting using this priority:
      1. Environment variable
      2. .env file next to the code
      3. "settings" block of the experiment config (POSEUNC_CONFIG)
      4. default
    """
    val = os.environ.get(key, "")
    if val:
        return val

    val = _read_dotenv().get(key, "")
    if val:
        return val

    val = _read_config_settings().get(key.upper(), "")
    if val:
        return val

    return default
