"""Event-camera streams to dense voxel reconstructions."""

from .events import CATEGORIES, Event, EventStream, TimeWindowPartition, partition
from .voxels import VoxelGrid

__version__ = "0.1.0"

__all__ = ["CATEGORIES", "Event", "EventStream", "TimeWindowPartition", "VoxelGrid", "partition", "__version__"]
