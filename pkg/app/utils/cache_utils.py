"""
Caching utilities for quantization grids.
Provides functions for storing and retrieving grids as CSV files.
"""

import logging
import os
import tempfile
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from app.config import config

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def get_grid_key(distribution: str, q: int, size: int, seed: int) -> str:
    """
    Build the cache key of a grid.

    Args:
        distribution: Name of the quantized law (e.g. "normal")
        q: Dimension of the law
        size: Number of grid points
        seed: Seed of any stochastic component

    Returns:
        File stem used for the cache entry
    """
    return f"{distribution}_q{q}_N{size}_seed{seed}"


def grid_cache_path(key: str, cache_dir: Optional[Path] = None) -> Path:
    """Path of the CSV file holding a cached grid."""
    return Path(cache_dir or config.GRID_CACHE_DIR) / f"{key}.csv"


def write_grid_csv(path: Path, points: np.ndarray, weights: Optional[np.ndarray]) -> None:
    """
    Write grid points and cell weights with header ``index,coord_1,...,coord_q,weight``.

    Args:
        path: Target file
        points: Array of shape (N, q)
        weights: Cell weights, or None (written as empty fields)
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    frame = pd.DataFrame(points, columns=[f"coord_{c + 1}" for c in range(points.shape[1])])
    frame.insert(0, "index", np.arange(points.shape[0]))
    frame["weight"] = np.nan if weights is None else np.asarray(weights, dtype=float)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="")


def read_grid_csv(path: Path) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Read a grid written by ``write_grid_csv``.

    Returns:
        (points of shape (N, q), weights or None)
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    frame = frame.sort_values("index")
    coords = [c for c in frame.columns if c.startswith("coord_")]
    points = frame[coords].to_numpy(dtype=float)
    weights = frame["weight"].to_numpy(dtype=float)
    if np.isnan(weights).all():
        return points, None
    return points, weights


def save_to_cache(key: str, points: np.ndarray, weights: Optional[np.ndarray],
                  cache_dir: Optional[Path] = None) -> bool:
    """
    Save a grid to the cache.

    Returns:
        True if successful, False otherwise
    """
    try:
        path = grid_cache_path(key, cache_dir)
        path.parent.mkdir(parents=True, exist_ok=True)
        # readers never see a partially written file
        with tempfile.NamedTemporaryFile(dir=path.parent, suffix=".tmp", delete=False) as tmp:
            tmp_path = Path(tmp.name)
        write_grid_csv(tmp_path, points, weights)
        os.replace(tmp_path, path)
        logger.info(f"Saved grid to cache with key {key}")
        return True
    except OSError as e:
        logger.error(f"Error saving grid to cache: {str(e)}")
        return False


def load_from_cache(key: str, cache_dir: Optional[Path] = None
                    ) -> Optional[Tuple[np.ndarray, Optional[np.ndarray]]]:
    """
    Load a grid from the cache.

    Returns:
        (points, weights) if found, None otherwise
    """
    path = grid_cache_path(key, cache_dir)
    if not path.exists():
        return None
    try:
        data = read_grid_csv(path)
        logger.info(f"Loaded grid from cache with key {key}")
        return data
    except (OSError, ValueError, KeyError) as e:
        logger.error(f"Error loading grid from cache: {str(e)}")
    return None


def clear_cache(cache_dir: Optional[Path] = None) -> int:
    """
    Remove all cached grids.

    Returns:
        Number of files removed
    """
    directory = Path(cache_dir or config.GRID_CACHE_DIR)
    file_count = 0
    for file_path in directory.glob("*.csv"):
        file_path.unlink()
        file_count += 1
    logger.info(f"Cleared {file_count} files from cache")
    return file_count
