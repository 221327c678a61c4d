"""Reference HTTP host for the extraction, generation, and embedding endpoints."""

from .config import HostConfig
from .service import create_app

__version__ = "0.1.0"

__all__ = ["HostConfig", "create_app"]
