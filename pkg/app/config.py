import os
from pathlib import Path

from dotenv import load_dotenv

from app.errors import ConfigurationError

# Load environment variables from .env file
load_dotenv()

DEFAULT_TABLE_DIR = "tables"
DEFAULT_DATABASE_URL = "sqlite:///sparse_nngp.db"
DEFAULT_GRID_SIZE = 2049


def get_table_dir(override: str | None = None) -> Path:
    """
    Directory holding cached lookup tables.

    Priority:
    1. Explicit override (the --table-dir flag)
    2. SPARSE_NNGP_TABLE_DIR
    3. ./tables
    """
    if override:
        return Path(override)
    return Path(os.getenv("SPARSE_NNGP_TABLE_DIR", DEFAULT_TABLE_DIR))


def get_database_url() -> str:
    """Results-ledger URL; SQLite in the working directory unless overridden."""
    return os.getenv("SPARSE_NNGP_DATABASE_URL", DEFAULT_DATABASE_URL)


def get_log_level() -> str:
    return os.getenv("SPARSE_NNGP_LOG_LEVEL", "INFO").upper()


def get_grid_size() -> int:
    raw = os.getenv("SPARSE_NNGP_GRID_SIZE")
    if not raw:
        return DEFAULT_GRID_SIZE
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(
            f"Configuration error: SPARSE_NNGP_GRID_SIZE must be an integer, got {raw!r}"
        )
