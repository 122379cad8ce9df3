# utils.py
# Shared helpers: logging setup, command-line value parsing and output directories.

import logging
import math
from pathlib import Path
from typing import List, Union

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
LOG_DATEFMT = "%Y-%m-%d %H:%M:%S"

_LEVELS = {
    "quiet": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}


def setup_logging(level: str = "info") -> int:
    """
    Configures the root logger once ('quiet', 'info' or 'debug') and returns the
    numeric level. Chatty third-party loggers are held at WARNING unless debugging.
    """
    numeric = _LEVELS.get(level.lower(), logging.INFO)
    logging.basicConfig(level=numeric, format=LOG_FORMAT, datefmt=LOG_DATEFMT, force=True)
    if numeric > logging.DEBUG:
        logging.getLogger("werkzeug").setLevel(logging.WARNING)
        logging.getLogger("urllib3").setLevel(logging.WARNING)
    return numeric


def progress_enabled(level: str) -> bool:
    """tqdm bars are shown unless running quiet."""
    return level.lower() != "quiet"


def parse_grid(text: str) -> List[float]:
    """Parses '0.1,0.3,1' into retention ratios in (0, 1]."""
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            value = float(part)
        except ValueError as e:
            raise ValueError(f"'{part}' is not a number") from e
        if not math.isfinite(value) or not (0.0 < value <= 1.0):
            raise ValueError(f"retention ratio {value} outside (0, 1]")
        values.append(value)
    if not values:
        raise ValueError("retention grid is empty")
    return values


def ensure_dir(path: Union[str, Path]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def parse_counts(text: str, minimum: int = 0) -> List[int]:
    """Parses '10,20,40' into integers >= minimum."""
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            value = int(part)
        except ValueError as e:
            raise ValueError(f"'{part}' is not an integer") from e
        if value < minimum:
            raise ValueError(f"{value} is below the minimum {minimum}")
        values.append(value)
    if not values:
        raise ValueError("no values given")
    return values
