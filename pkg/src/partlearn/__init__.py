"""Learning semantic part detectors from easy image sets, one stage at a time."""

from .geometry import BBox, Detection, iou, nms
from .raster import Raster, load_image, save_image

__all__ = ["BBox", "Detection", "Raster", "iou", "load_image", "nms", "save_image"]
__version__ = "0.1.0"
