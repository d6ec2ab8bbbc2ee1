"""Auto-encoding 3D WGAN-GP for volumetric brain MRI synthesis."""

from .config import ConfigError, ModelConfig, TrainConfig, load_config
from .data import Dataset, VolumeError, make_phantom, make_phantom_dataset

__version__ = "0.1.0"

__all__ = ["ConfigError", "Dataset", "ModelConfig", "TrainConfig", "VolumeError",
           "load_config", "make_phantom", "make_phantom_dataset"]
