"""Gaussian-splat scene reconstruction and viewpoint augmentation for robot demonstrations."""

from .errors import SplatAugError
from .gaussians import Scene
from .geometry import SE3, CameraModel, Rotation

__version__ = "0.1.0"

__all__ = ["SE3", "CameraModel", "Rotation", "Scene", "SplatAugError", "__version__"]
