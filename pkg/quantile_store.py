"""
Grouped FDR - Null Quantile Store
JSON file cache of NullQuantileTable calibrations, one file per
(m, group sizes, alpha, B, seed), kept in settings.quantile_dir.
"""

import logging
import os
from typing import Optional

from pydantic import ValidationError

from config import settings
from stabilize import NullQuantileTable, null_quantile_table

logger = logging.getLogger(__name__)


def table_path(group_sizes: list[int], alpha: float, replicates: int, seed: int,
               directory: Optional[str] = None) -> str:
    directory = directory or settings.quantile_dir
    m = sum(group_sizes)
    sizes = "-".join(str(int(n)) for n in group_sizes)
    return os.path.join(directory, f"z0_m{m}_g{sizes}_a{alpha!r}_B{replicates}_s{seed}.json")


def save_table(table: NullQuantileTable, path: str):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        f.write(table.model_dump_json(by_alias=True, indent=2))
    logger.info(f"Saved null quantile table ({table.replicates} samples) to {path}")


def load_table(path: str) -> NullQuantileTable:
    with open(path, "r") as f:
        return NullQuantileTable.model_validate_json(f.read())


def get_or_build_table(group_sizes: list[int], alpha: float, replicates: int, seed: int,
                       threads: Optional[int] = None,
                       directory: Optional[str] = None) -> NullQuantileTable:
    """Load the cached table for this key, or simulate and cache it."""
    group_sizes = [int(n) for n in group_sizes]
    path = table_path(group_sizes, alpha, replicates, seed, directory)
    if os.path.exists(path):
        try:
            table = load_table(path)
            if table.group_sizes == group_sizes and table.alpha == alpha and table.seed == seed:
                logger.debug(f"Null quantile table cache hit: {path}")
                return table
            logger.warning(f"Cached table {path} has another key, rebuilding")
        except (OSError, ValueError, ValidationError) as e:
            logger.warning(f"Unreadable null quantile table {path}, rebuilding: {e}")

    table = null_quantile_table(sum(group_sizes), group_sizes, alpha, replicates, seed, threads)
    try:
        save_table(table, path)
    except OSError as e:
        logger.warning(f"Could not cache null quantile table at {path}: {e}")
    return table
