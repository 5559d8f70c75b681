"""Self-hosted whole-slide image platform: tiling, annotation, analysis."""

from .config import PimipConfig
from .errors import PimipError

__version__ = "0.1.0"

__all__ = ["PimipConfig", "PimipError", "__version__"]
