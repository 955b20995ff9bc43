"""
Utility functions for the supply-chain risk toolkit.
Logging setup, month arithmetic, config files and atomic artifact writers.
"""

import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import numpy as np
import pandas as pd
import yaml

from errors import DataValidationError, InputMissingError

PathLike = Union[str, Path]

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
CSV_FLOAT_FORMAT = '%.10g'


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> logging.Logger:
    """Set up logging configuration"""
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
    return logging.getLogger("scrisk")


def progress_enabled() -> bool:
    """tqdm bars are shown only when INFO messages would be"""
    return logging.getLogger().isEnabledFor(logging.INFO)


# Months are carried as integers (year * 12 + month - 1) so window checks
# are plain integer comparisons.

def parse_month(text: str, line: Optional[int] = None, module: str = "utils") -> int:
    """Parse a YYYY-MM string into a month index"""
    try:
        period = pd.Period(str(text).strip(), freq="M")
    except (ValueError, TypeError):
        raise DataValidationError(f"invalid month {text!r}, expected YYYY-MM", module, line)
    if len(str(text).strip()) != 7:
        raise DataValidationError(f"invalid month {text!r}, expected YYYY-MM", module, line)
    return period.year * 12 + period.month - 1


def format_month(month: int) -> str:
    """Format a month index as YYYY-MM"""
    year, month0 = divmod(int(month), 12)
    return f"{year:04d}-{month0 + 1:02d}"


def month_span(start: int, end: int) -> range:
    """Half-open range of month indices [start, end)"""
    return range(int(start), int(end))


def convert_numpy_types(obj):
    """Convert numpy types to Python native types for JSON serialization"""
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [convert_numpy_types(item) for item in obj.tolist()]
    if isinstance(obj, dict):
        return {str(k): convert_numpy_types(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [convert_numpy_types(item) for item in obj]
    return obj


def atomic_write_text(path: PathLike, text: str) -> Path:
    """Write text to a temp file next to the target, then rename over it"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logging.getLogger(__name__).info(f"Wrote {path}")
    return path


def dumps_json(results: Any) -> str:
    """Deterministic JSON text for reports and models"""
    return json.dumps(convert_numpy_types(results), indent=2, sort_keys=True, allow_nan=False) + "\n"


def save_json(results: Any, path: PathLike) -> Path:
    """Save results to a JSON file atomically"""
    return atomic_write_text(path, dumps_json(results))


def load_json(path: PathLike) -> Any:
    """Load results from a JSON file"""
    path = require_file(path)
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def save_csv(frame: pd.DataFrame, path: PathLike) -> Path:
    """Save a DataFrame as CSV atomically with a fixed float format"""
    text = frame.to_csv(index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return atomic_write_text(path, text)


def require_file(path: PathLike, module: str = "utils") -> Path:
    """Return the path if it exists, otherwise raise InputMissingError"""
    path = Path(path)
    if not path.exists():
        raise InputMissingError(f"missing input {path}", module)
    return path


def load_yaml_mapping(path: PathLike, allowed_keys: Iterable[str], module: str = "config") -> Dict[str, Any]:
    """Load a flat YAML mapping and reject keys outside the documented set"""
    path = require_file(path, module)
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f) or {}
        except yaml.YAMLError as exc:
            raise DataValidationError(f"{path} is not valid YAML: {exc}", module)
    if not isinstance(data, dict):
        raise DataValidationError(f"{path} must hold a key-value mapping", module)
    unknown = sorted(set(data) - set(allowed_keys))
    if unknown:
        raise DataValidationError(f"unknown config keys in {path}: {', '.join(unknown)}", module)
    return data
