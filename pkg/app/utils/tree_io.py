"""
Saving and loading quantization trees.

A tree directory holds ``meta`` (key=value lines), ``grid_k.csv`` for
k = 0..n, and ``trans_k.csv`` / ``pi_k.csv`` for k = 0..n-1. Floats are
written with 17 significant digits so a save/load round trip is exact.
"""
import json
import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from app.core.diffusion_models import EulerModel
from app.core.markov_tree import QuantizationTree, TreeMethod
from app.core.quantizer import Grid
from app.utils.cache_utils import FLOAT_FORMAT, read_grid_csv, write_grid_csv
from app.utils.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

META_FILE = "meta"


def _format_value(value) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def save_tree(tree: QuantizationTree, directory: Union[str, Path]) -> Path:
    """
    Write a tree to a directory.

    Args:
        tree: Tree to save
        directory: Target directory, created if missing

    Returns:
        The directory path
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "method": tree.method.value,
        "model": tree.model.model_id.value,
        "n": tree.n,
        "dim": tree.model.dim,
        "noise_dim": tree.model.noise_dim,
        "sizes": tree.sizes,
    }
    for key, value in tree.metadata.items():
        if key not in meta:
            meta[key] = json.dumps(value) if isinstance(value, (list, dict)) and key != "sizes" else value
    with open(directory / META_FILE, "w", encoding="utf-8") as f:
        for key, value in meta.items():
            f.write(f"{key}={_format_value(value)}\n")

    for k, grid in enumerate(tree.grids):
        write_grid_csv(directory / f"grid_{k}.csv", grid.points, grid.cell_weights)
    for k, (P, Pi) in enumerate(zip(tree.transitions, tree.noise_moments)):
        rows, cols = np.indices(P.shape)
        pd.DataFrame({"i": rows.ravel(), "j": cols.ravel(), "p": P.ravel()}).to_csv(
            directory / f"trans_{k}.csv", index=False, float_format=FLOAT_FORMAT)
        frame = pd.DataFrame({"i": rows.ravel(), "j": cols.ravel()})
        for r in range(Pi.shape[2]):
            frame[f"pi_{r + 1}"] = Pi[:, :, r].ravel()
        frame.to_csv(directory / f"pi_{k}.csv", index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Saved {tree.method.value} tree to {directory}")
    return directory


def _read_matrix(path: Path, shape, columns) -> np.ndarray:
    frame = pd.read_csv(path, float_precision="round_trip")
    matrix = np.zeros(shape + (len(columns),))
    i = frame["i"].to_numpy(dtype=int)
    j = frame["j"].to_numpy(dtype=int)
    for r, column in enumerate(columns):
        matrix[i, j, r] = frame[column].to_numpy(dtype=float)
    return matrix


def load_tree(directory: Union[str, Path], model: EulerModel) -> QuantizationTree:
    """
    Read a tree written by ``save_tree``.

    Args:
        directory: Tree directory
        model: Model the tree was built for; its id and step count must match

    Returns:
        QuantizationTree
    """
    directory = Path(directory)
    meta_path = directory / META_FILE
    if not meta_path.exists():
        raise InvalidArgumentError(f"no tree found in {directory} (missing {META_FILE})")
    meta = dotenv_values(meta_path)
    if meta.get("model") != model.model_id.value:
        raise InvalidArgumentError(
            f"tree in {directory} was built for model {meta.get('model')}, not {model.model_id.value}")
    n = int(meta["n"])
    if n != model.n:
        raise InvalidArgumentError(f"tree in {directory} has {n} steps, model has {model.n}")

    grids = []
    for k in range(n + 1):
        points, weights = read_grid_csv(directory / f"grid_{k}.csv")
        grids.append(Grid(points, weights))
    q = model.noise_dim
    transitions, noise_moments = [], []
    for k in range(n):
        shape = (grids[k].size, grids[k + 1].size)
        transitions.append(_read_matrix(directory / f"trans_{k}.csv", shape, ["p"])[:, :, 0])
        noise_moments.append(_read_matrix(directory / f"pi_{k}.csv", shape,
                                          [f"pi_{r + 1}" for r in range(q)]))

    metadata = {key: value for key, value in meta.items()
                if key not in ("method", "model", "n", "dim", "noise_dim")}
    metadata["sizes"] = [int(s) for s in meta["sizes"].split(",")]
    logger.info(f"Loaded {meta['method']} tree from {directory}")
    return QuantizationTree(model, grids, transitions, noise_moments, TreeMethod(meta["method"]), metadata)
