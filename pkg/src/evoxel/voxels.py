"""Dense occupancy grids indexed ``[x, y, z]`` with z pointing up."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    occupancy: np.ndarray
    category: Optional[str] = None
    object_id: Optional[str] = None

    def __post_init__(self):
        occ = np.asarray(self.occupancy).astype(bool)
        if occ.ndim != 3 or len(set(occ.shape)) != 1:
            raise ValueError(f"voxel grid must be cubic, got shape {occ.shape}")
        occ = np.ascontiguousarray(occ)
        occ.flags.writeable = False
        object.__setattr__(self, "occupancy", occ)

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def same_as(self, other: "VoxelGrid") -> bool:
        return (
            self.category == other.category
            and self.object_id == other.object_id
            and np.array_equal(self.occupancy, other.occupancy)
        )

    def replace(self, occupancy: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(occupancy, self.category, self.object_id)
