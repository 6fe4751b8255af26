"""Elastic occupancy submaps with overlap-driven spawning and uncertainty-gated fusion."""

from .atlas import Atlas, LoopClosure, PoseGraphNode, Submap
from .config import AtlasConfig
from .occupancy import OccupancyGrid, VoxelState
from .se3 import PointCloud, PoseSE3

__all__ = [
    "Atlas",
    "AtlasConfig",
    "LoopClosure",
    "OccupancyGrid",
    "PointCloud",
    "PoseGraphNode",
    "PoseSE3",
    "Submap",
    "VoxelState",
]
