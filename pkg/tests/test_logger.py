import logging
from pathlib import Path

import pytest

from povmap.logger import LOG_FILE_NAME, parse_level, setup_logging
from povmap.xdg import get_data_dir


def test_setup_logging_creates_log_dir_and_file(tmp_path: Path) -> None:
    # Capture original handlers to restore later
    root = logging.root
    orig_handlers = list(root.handlers)
    orig_level = root.level

    log_dir = get_data_dir()
    assert log_dir == tmp_path / "data" / "povmap"
    assert not log_dir.exists()

    try:
        setup_logging(level=logging.DEBUG)
        logging.getLogger("povmap.test").debug("test log entry")
        assert log_dir.is_dir()
        log_file = log_dir / LOG_FILE_NAME
        assert log_file.exists(), "Log file should be created by handler"
        for h in root.handlers:
            h.flush()
        assert "test log entry" in log_file.read_text()

        assert root.level == logging.DEBUG
        new_handlers = [h for h in root.handlers if h not in orig_handlers]
        assert len(new_handlers) == 1
        assert logging.getLogger("povmap").level == logging.DEBUG

        # Overly verbose packages are silenced to WARNING level
        for pkg in ("PIL", "matplotlib", "numexpr"):
            assert logging.getLogger(pkg).level == logging.WARNING
    finally:
        for h in root.handlers[:]:
            if h not in orig_handlers:
                root.removeHandler(h)
                h.close()
        root.handlers = orig_handlers
        root.setLevel(orig_level)


@pytest.mark.parametrize(
    "name,expected",
    [
        ("debug", logging.DEBUG),
        (" WARNING ", logging.WARNING),
        (None, logging.INFO),
        ("", logging.INFO),
        ("chatty", logging.INFO),
    ],
)
def test_parse_level(name: str | None, expected: int) -> None:
    assert parse_level(name) == expected
