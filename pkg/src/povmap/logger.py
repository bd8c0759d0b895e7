"""
Logging configuration for the povmap CLI and pipeline internals.
"""

import logging

from concurrent_log_handler import ConcurrentRotatingFileHandler as RotatingFileHandler

from povmap.xdg import get_data_dir

LOG_FILE_NAME = "povmap.log"


def setup_logging(level: int = logging.INFO) -> None:
    """
    Configure global logging:
      - Write all log records (including third-party libraries) to DATA_DIR/povmap.log
      - Rotate the file at 10 MiB, keep 3 backups
      - Silence overly verbose dependencies
    """
    log_dir = get_data_dir()
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / LOG_FILE_NAME

    file_handler = RotatingFileHandler(
        filename=str(log_file),
        maxBytes=10 * 1024 * 1024,
        backupCount=3,
        encoding="utf-8",
    )
    file_handler.setFormatter(
        logging.Formatter("%(asctime)s %(name)s [%(levelname)s] %(message)s")
    )

    root = logging.root
    root.setLevel(level)
    root.addHandler(file_handler)

    logging.getLogger("povmap").setLevel(level)

    # Silence overly verbose third-party modules
    for pkg in ("PIL", "matplotlib", "numexpr"):
        logging.getLogger(pkg).setLevel(logging.WARNING)


def parse_level(name: str | None, default: int = logging.INFO) -> int:
    """Map a level name such as "debug" to its logging constant."""
    if not name:
        return default
    value = logging.getLevelName(name.strip().upper())
    return value if isinstance(value, int) else default
