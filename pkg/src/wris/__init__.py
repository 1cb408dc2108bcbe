"""Weakly supervised referring image segmentation from image-text pairs.

Step 1 learns text-conditioned response maps with a bilateral prompt and a
calibrated classification objective; Step 2 distills pseudo masks chosen from
those maps into a segmentation network.
"""

from .config import RunConfig, desk_config, load_config
from .model import ResponseModel
from .segmentor import SegmentationModel

__all__ = ["RunConfig", "desk_config", "load_config", "ResponseModel", "SegmentationModel"]
__version__ = "0.1.0"
