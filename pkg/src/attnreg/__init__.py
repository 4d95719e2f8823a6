"""Attention-based rigid point-cloud registration toolkit."""

__version__ = "0.1.0"

from .geometry import PointCloud, RigidTransform  # noqa: F401
