"""
Grouped FDR - Configuration
All settings loaded from environment variables (prefix GROUPED_FDR_).
"""

from pydantic_settings import BaseSettings
import logging

_config_logger = logging.getLogger("grouped_fdr.config")


class Settings(BaseSettings):
    """Toolkit settings loaded from .env file or environment variables."""

    # --- Core ---
    log_level: str = "INFO"
    threads: int = 1  # default worker count for simulations and tables

    # --- Null proportion estimation ---
    storey_lambda: float = 0.5
    schedule_exponent: float = 0.25

    # --- Monte Carlo ---
    replications: int = 1000
    ci_replications: int = 200
    quantile_replicates: int = 1000
    min_quantile_replicates: int = 100
    quantile_dir: str = "data/quantile_tables"

    # --- Numerics ---
    cost_tolerance: float = 1e-12  # relative guard on minCost[r] <= alpha*u
    oracle_tolerance: float = 1e-12
    oracle_max_iter: int = 200

    class Config:
        env_prefix = "GROUPED_FDR_"
        env_file = ".env"
        env_file_encoding = "utf-8"


# Singleton instance
settings = Settings()

# Startup sanity warnings
if not 0.0 < settings.storey_lambda < 1.0:
    _config_logger.warning(
        f"GROUPED_FDR_STOREY_LAMBDA={settings.storey_lambda} is outside (0,1); "
        "storey estimates will be rejected until it is fixed."
    )
if settings.quantile_replicates < settings.min_quantile_replicates:
    _config_logger.warning(
        f"GROUPED_FDR_QUANTILE_REPLICATES={settings.quantile_replicates} is below "
        f"{settings.min_quantile_replicates}; stabilization quantiles will be noisy."
    )
