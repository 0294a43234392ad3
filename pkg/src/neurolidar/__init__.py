"""Event-guided adaptive-rate LiDAR depth sensing at desk scale."""
from ._accel import NUMBA_AVAILABLE

__version__ = "0.1.0"
__all__ = ["NUMBA_AVAILABLE", "__version__"]
