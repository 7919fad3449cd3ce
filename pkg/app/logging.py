import logging
import sys
from pathlib import Path

LOGGER_NAME: str = "dfedsim"
LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class LogFilter(logging.Filter):
    def filter(self, record):
        return record.name.startswith(LOGGER_NAME)


def get_logger() -> logging.Logger:
    logger = logging.getLogger(LOGGER_NAME)

    # handlers are attached once, every module calls this at import time
    if not logger.handlers:
        logger.setLevel(logging.INFO)

        stream_handler = logging.StreamHandler(sys.stderr)
        stream_handler.setLevel(logging.INFO)
        stream_handler.setFormatter(logging.Formatter(LOG_FORMAT))

        logger.addHandler(stream_handler)
        logger.addFilter(LogFilter())
        logger.propagate = False

    return logger


def attach_run_log(path: Path) -> logging.Handler:
    """Mirrors the simulator log into `path` until the returned handler is
    passed to `detach_run_log`
    """
    file_handler = logging.FileHandler(path)
    file_handler.setLevel(logging.INFO)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))

    get_logger().addHandler(file_handler)
    return file_handler


def detach_run_log(handler: logging.Handler):
    get_logger().removeHandler(handler)
    handler.close()
