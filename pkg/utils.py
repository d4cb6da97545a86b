#!/usr/bin/env python3
"""
Shared utilities for the active-learning emitter identifier.

Contains the exception hierarchy, console/file logging setup, named
random-number streams and the small CSV helpers every stage uses to
write its history files.
"""

import csv
import logging
import os
import zlib
from datetime import datetime
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from colorama import Fore, Style


class SEIError(ValueError):
    """Base class for every error raised by this package."""


class ConfigurationError(SEIError):
    """Invalid shapes, hyperparameters or CLI/config values."""


class NumericalError(SEIError):
    """Non-finite gradients or undefined numeric quantities."""


class SelectionError(SEIError):
    """Invalid query indices or budgets."""


class IQFormatError(SEIError):
    """Malformed I/Q dataset file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointError(SEIError):
    """Malformed checkpoint or architecture mismatch."""


class ReportError(SEIError):
    """Incomplete run directory."""

    def __init__(self, message: str, missing: Sequence[str]):
        details = ", ".join(missing)
        super().__init__(f"{message}: {details}" if details else message)
        self.missing = list(missing)


# --- Logging ---

_LEVEL_COLORS = {
    logging.DEBUG: Fore.WHITE,
    logging.INFO: "",
    logging.WARNING: Fore.YELLOW,
    logging.ERROR: Fore.RED,
    logging.CRITICAL: Fore.RED + Style.BRIGHT,
}


class ColorFormatter(logging.Formatter):
    """Renders records as timestamped `[HH:MM:SS] message` lines."""

    def __init__(self, use_color: bool = True):
        super().__init__()
        self.use_color = use_color

    def format(self, record: logging.LogRecord) -> str:
        timestamp = datetime.fromtimestamp(record.created).strftime("%H:%M:%S")
        line = f"[{timestamp}] {record.getMessage()}"
        if record.exc_info:
            line += "\n" + self.formatException(record.exc_info)
        color = _LEVEL_COLORS.get(record.levelno, "") if self.use_color else ""
        return f"{color}{line}{Style.RESET_ALL}" if color else line


def setup_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once, honouring SEI_LOG_LEVEL."""
    level_name = (level or os.getenv("SEI_LOG_LEVEL", "INFO")).upper()
    root = logging.getLogger()
    root.setLevel(getattr(logging, level_name, logging.INFO))
    if not any(getattr(h, "_sei_console", False) for h in root.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(ColorFormatter())
        handler._sei_console = True
        root.addHandler(handler)


def attach_run_log(run_dir: str) -> logging.Handler:
    """Mirror all log output into run_dir/run.log. Caller removes the handler."""
    handler = logging.FileHandler(os.path.join(run_dir, "run.log"), encoding="utf-8")
    handler.setFormatter(ColorFormatter(use_color=False))
    logging.getLogger().addHandler(handler)
    return handler


# --- Randomness ---

def named_stream(seed: int, *names: Any) -> np.random.Generator:
    """
    Derive an independent generator for a named consumer of a master seed.

    Streams keyed by different names never share state, so adding a new
    consumer leaves every existing stream untouched.

    Example:
        >>> a = named_stream(7, "train", 0).standard_normal()
        >>> b = named_stream(7, "train", 0).standard_normal()
        >>> a == b
        True
    """
    key = [zlib.crc32(str(name).encode("utf-8")) for name in names]
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + key))


# --- CSV helpers ---

def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    """Write a header plus rows; floats keep full repr precision."""
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))
