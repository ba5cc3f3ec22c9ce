"""Shape-guided local discrimination for weakly supervised 3D vessel segmentation."""

from .config import TrainConfig, load_config
from .network import BackboneConfig, Discriminator, SLDNet

__all__ = ["BackboneConfig", "Discriminator", "SLDNet", "TrainConfig", "load_config"]
__version__ = "0.1.0"
