"""Unsupervised partial point-cloud registration with overlap-biased matching."""
from .config import RunConfig
from .geometry import PointCloud, RigidTransform, registration_metrics
from .model import OBMNet

__all__ = ["OBMNet", "PointCloud", "RigidTransform", "RunConfig", "registration_metrics"]
__version__ = "0.1.0"
