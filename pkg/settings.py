"""
Runtime settings: .env loading, environment fallbacks and logging setup.
"""

import logging
import os

try:
    from dotenv import load_dotenv
except ImportError:  # pragma: no cover
    load_dotenv = None

logger = logging.getLogger(__name__)

DEFAULT_SEED = 0
DEFAULT_LOG_LEVEL = "INFO"
DEFAULT_DATA_DIR = "data"

_loaded = False


def load_env() -> None:
    """Load a .env file from the working directory once per process."""
    global _loaded
    if _loaded:
        return
    if load_dotenv is not None:
        load_dotenv()
    else:
        logger.warning("python-dotenv not found, .env file ignored.")
    _loaded = True


def default_seed() -> int:
    """Seed used when no --seed flag is given (DAVOC_SEED, else 0)."""
    raw = os.environ.get("DAVOC_SEED")
    if raw is None or raw.strip() == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        logger.warning("Ignoring non-integer DAVOC_SEED=%r.", raw)
        return DEFAULT_SEED


def data_dir() -> str:
    return os.environ.get("DAVOC_DATA_DIR", DEFAULT_DATA_DIR)


def configure_logging(level: str | None = None) -> None:
    """Configure root logging; level from the argument, DAVOC_LOG_LEVEL, or INFO."""
    name = (level or os.environ.get("DAVOC_LOG_LEVEL") or DEFAULT_LOG_LEVEL).upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
