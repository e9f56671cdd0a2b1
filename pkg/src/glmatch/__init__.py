"""Line segment matching: line descriptors, graph convolution and optimal transport."""

from .config import Config, load_config
from .losses import MatchGroundTruth
from .transport import MatchSet

__all__ = ["Config", "load_config", "MatchGroundTruth", "MatchSet"]
__version__ = "0.1.0"
