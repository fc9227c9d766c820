import logging
import os
import random
import string
import threading
from datetime import datetime
from pathlib import Path

from rich import traceback
from rich.console import Console
from rich.logging import RichHandler

logger = logging.getLogger(__name__)


class ThreadSafeFileHandler(logging.FileHandler):
    def __init__(self, filename, mode="a", encoding=None, delay=False):
        super().__init__(filename, mode, encoding, delay)
        self._file_access_lock = threading.Lock()

    def emit(self, record):
        with self._file_access_lock:
            super().emit(record)


def generate_log_name(command: str = "exprag") -> str:
    """Log file name from the command, a timestamp and a random suffix."""
    timestamp = datetime.now().strftime("%Y-%m-%d_%H.%M.%S")
    suffix = "".join(random.choice(string.ascii_uppercase + string.digits) for _ in range(6))
    return f"{command}_{timestamp}_{suffix}.log"


def setup_logger(
    level: str = "INFO", path_serialization_dir: Path | None = None, command: str = "exprag"
) -> None:
    """Setup the logger to log on stderr through rich, and optionally to a file.

    Args:
        level (str): Root logging level; the ``LOGLEVEL`` environment variable wins when set.
        path_serialization_dir (Path | None): The directory where the log file will be saved.
            If None, only console logging is configured.
        command (str): Prefix of the log file name.
    """
    loglevel = os.environ.get("LOGLEVEL", level).upper()
    traceback.install(show_locals=False)

    fmt = "| %(asctime)s | %(name)s | %(message)s"
    date_format = "[%Y-%m-%d %H:%M:%S]"

    console_columns = int(os.environ.get("COLUMNS", 180))
    console = Console(width=console_columns, stderr=True)

    handlers: list[logging.Handler] = [
        RichHandler(show_time=False, console=console),
    ]

    if path_serialization_dir is not None:
        Path(path_serialization_dir).mkdir(parents=True, exist_ok=True)
        log_name = generate_log_name(command)
        handlers.append(
            ThreadSafeFileHandler(os.path.join(path_serialization_dir, log_name), delay=True)
        )

    logging.basicConfig(
        level=loglevel,
        format=fmt,
        datefmt=date_format,
        handlers=handlers,
        force=True,
    )
    for noisy in ("httpx", "httpcore", "urllib3"):
        logging.getLogger(noisy).setLevel(logging.WARNING)
