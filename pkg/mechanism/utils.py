"""
Utility functions for the mechanism package.
Provides logging, environment configuration and label formatting.
"""

import os
import logging
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

_handlers = [logging.StreamHandler()]
_log_file = os.getenv('MECHANISM_LOG_FILE')
if _log_file:
    _handlers.append(logging.FileHandler(_log_file))

# Configure logging (stderr; stdout is reserved for reports)
logging.basicConfig(
    level=getattr(logging, os.getenv('MECHANISM_LOG_LEVEL', 'INFO').upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=_handlers
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Settings:
    """Environment-level defaults; CLI flags take precedence."""
    log_level: str
    log_file: Optional[str]
    seed: int
    oracle_tol: float
    oracle_max_iters: int
    deviation_samples: int


def get_settings() -> Settings:
    """
    Read settings from environment variables.

    Reads:
    - MECHANISM_LOG_LEVEL (default: INFO)
    - MECHANISM_LOG_FILE (default: unset)
    - MECHANISM_SEED (default: 0)
    - MECHANISM_ORACLE_TOL (default: 1e-8)
    - MECHANISM_ORACLE_MAX_ITERS (default: 200000)
    - MECHANISM_DEVIATION_SAMPLES (default: 10000)

    Returns:
        Settings instance
    """
    return Settings(
        log_level=os.getenv('MECHANISM_LOG_LEVEL', 'INFO').upper(),
        log_file=os.getenv('MECHANISM_LOG_FILE') or None,
        seed=int(os.getenv('MECHANISM_SEED', '0')),
        oracle_tol=float(os.getenv('MECHANISM_ORACLE_TOL', '1e-8')),
        oracle_max_iters=int(os.getenv('MECHANISM_ORACLE_MAX_ITERS', '200000')),
        deviation_samples=int(os.getenv('MECHANISM_DEVIATION_SAMPLES', '10000')),
    )


def set_log_level(level: str) -> None:
    """Change the package log level at runtime (e.g. from a CLI flag)."""
    numeric = getattr(logging, level.upper(), None)
    if not isinstance(numeric, int):
        logger.warning(f"Unknown log level '{level}', keeping {logging.getLevelName(logger.level)}")
        return
    logging.getLogger().setLevel(numeric)


def label(name: str, *indices: int) -> str:
    """
    Build a 1-based report label from 0-based indices.

    Args:
        name: Quantity name, e.g. 'y' or 'nu'
        indices: 0-based indices

    Returns:
        Label such as 'y_2_1'
    """
    if not indices:
        return name
    return name + '_' + '_'.join(str(int(k) + 1) for k in indices)
