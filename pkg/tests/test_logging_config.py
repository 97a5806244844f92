import logging
from logging.handlers import RotatingFileHandler

import pytest

import logging_config


@pytest.fixture
def bare_root_logger():
    root = logging.getLogger()
    saved_handlers, saved_level = root.handlers[:], root.level
    root.handlers = []
    yield root
    for handler in root.handlers:
        handler.close()
    root.handlers = saved_handlers
    root.setLevel(saved_level)


def test_log_file_comes_from_settings(tmp_path, monkeypatch, bare_root_logger):
    path = tmp_path / "pcno.log"
    monkeypatch.setattr(logging_config, "LOG_FILE_PATH", str(path))
    logging_config.setup_logging()
    (handler,) = [h for h in bare_root_logger.handlers if isinstance(h, RotatingFileHandler)]
    assert handler.baseFilename == str(path)
    logging.info("written to the rotating file")
    handler.flush()
    assert "written to the rotating file" in path.read_text()


def test_setup_is_idempotent_and_adjusts_console_level(tmp_path, monkeypatch, bare_root_logger):
    monkeypatch.setattr(logging_config, "LOG_FILE_PATH", str(tmp_path / "pcno.log"))
    logging_config.setup_logging(console_level="INFO")
    logging_config.setup_logging(console_level="ERROR")
    assert len(bare_root_logger.handlers) == 2
    (console,) = [h for h in bare_root_logger.handlers if getattr(h, "_pcno_console", False)]
    assert console.level == logging.ERROR
