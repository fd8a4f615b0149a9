"""Feature extraction from images to CFPD pyramid files.

Runs a torchvision encoder in eval mode over an MVTec-style directory
tree and writes multi-scale feature pyramids, masks, and a dataset
manifest in the formats consumed by the flowad engine. This package
communicates with that engine exclusively through the files it writes.
"""

__version__ = "0.1.0"

from .formats import verify_roundtrip, write_pyramid  # noqa: F401
from .pipeline import ExtractConfig, extract  # noqa: F401
