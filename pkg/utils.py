# utils.py
import hashlib
import json
import logging
import os

import numpy as np

from errors import DataError

logger = logging.getLogger(__name__)


# --- HELPER FUNCTIONS FOR PATHS ---
def get_project_root():
    """Absolute path of the project root directory."""
    return os.path.dirname(os.path.abspath(__file__))


def get_asset_path(*path_segments):
    """
    Absolute path to a file or directory inside the project.
    Example: get_asset_path('data', 'mnist')
    """
    return os.path.join(get_project_root(), *path_segments)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def load_json_file(file_path):
    """Loads a JSON file; logs and raises DataError when it is missing or malformed."""
    try:
        with open(file_path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        logger.error("CRITICAL: Could not load JSON file. Path: '%s'. Error: %s", file_path, e)
        raise DataError(f"Could not load JSON file '{file_path}': {e}") from e


def to_jsonable(value):
    """numpy scalars / arrays -> plain Python, so reports serialise with the json module."""
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serialisable")


# --- SEEDS ---
def substream(seed, name):
    """Independent 64-bit seed derived from the root seed and a stream name ('data/train', 'init', ...)."""
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little')


# --- FORMATTING ---
def mean_sd(values):
    """(mean, sample sd) of the finite values; sd is 0 for a single value, both None for none."""
    values = np.asarray([v for v in values if v is not None], dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size == 0:
        return None, None
    sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), sd

