"""
Per-user povmap directories following the XDG base directory layout.

Logs go to the data directory; user-wide defaults (an env file read after the
project's .env) live in the config directory.
"""

import os
from pathlib import Path

APP_DIR = "povmap"
USER_ENV_FILE = "povmap.env"


def _base(env_var: str, fallback: str) -> Path:
    # an empty variable counts as unset
    value = os.environ.get(env_var)
    return Path(value) if value else Path.home() / fallback


def get_config_dir() -> Path:
    return _base("XDG_CONFIG_HOME", ".config") / APP_DIR


def get_data_dir() -> Path:
    return _base("XDG_DATA_HOME", ".local/share") / APP_DIR


def user_env_file() -> Path:
    """Env file holding user-wide POVMAP_* defaults."""
    return get_config_dir() / USER_ENV_FILE
