"""Overlap estimators used for spawning and fusion decisions.

* cloud overlap: share of a filtered scan with a close neighbour in a
  reference cloud, used to decide when to start a new submap;
* voxel overlap: share of a submap's known voxels whose state agrees with
  the co-located voxel of another submap, used to propose fusion;
* AABB overlap: a cheap volumetric prefilter for the voxel overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .occupancy import AABB, OccupancyGrid, VoxelState, pack_keys, unpack_keys
from .se3 import PointCloud, PoseSE3, as_points, between

SQRT3 = math.sqrt(3.0)


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class CloudOverlapResult:
    ratio: float
    overlapping_points: int
    total_points: int


@dataclass(frozen=True)
class SubmapOverlapResult:
    ratio_read: float
    ratio_ref: float
    overlap_count: int
    known_read: int
    known_ref: int

    @property
    def max_ratio(self) -> float:
        return max(self.ratio_read, self.ratio_ref)


@dataclass(frozen=True)
class AabbOverlapResult:
    ratio_read: float
    ratio_ref: float
    intersection_volume: float

    @property
    def max_ratio(self) -> float:
        return max(self.ratio_read, self.ratio_ref)


def voxel_filter(cloud, r_filter: float):
    """Replace the points of every ``r_filter`` cube by their centroid.

    Output is ordered by cube key, so it is deterministic.  A PointCloud in
    gives a PointCloud (same frame) out; arrays give arrays.
    """
    if not r_filter > 0:
        raise ValueError("r_filter must be positive")
    pts = as_points(cloud)
    if len(pts) == 0:
        out = np.zeros((0, 3))
    else:
        packed = pack_keys(np.floor(pts / r_filter).astype(np.int64))
        _, inv, counts = np.unique(packed, return_inverse=True, return_counts=True)
        inv = inv.reshape(-1)
        out = np.stack([np.bincount(inv, weights=pts[:, a]) for a in range(3)], axis=1)
        out /= counts[:, None]
    if isinstance(cloud, PointCloud):
        return PointCloud(out, cloud.frame)
    return out


def _count_close(read_pts: np.ndarray, ref_pts: np.ndarray, r_filter: float) -> int:
    if len(ref_pts) == 0:
        return 0
    dist, _ = cKDTree(ref_pts).query(read_pts, k=1)
    return int(np.count_nonzero(dist < SQRT3 * r_filter))


def cloud_overlap(read, ref, r_filter: float, *, prefiltered_ref: bool = False) -> CloudOverlapResult:
    """Fraction of the filtered ``read`` points with a filtered ``ref`` point
    closer than ``sqrt(3) * r_filter``.  Both clouds must share a frame."""
    read_f = voxel_filter(as_points(read), r_filter)
    if len(read_f) == 0:
        raise DegenerateInputError("read cloud is empty")
    ref_pts = as_points(ref)
    ref_f = ref_pts if prefiltered_ref else voxel_filter(ref_pts, r_filter)
    n = _count_close(read_f, ref_f, r_filter)
    return CloudOverlapResult(n / len(read_f), n, len(read_f))


def best_cloud_overlap(read, refs, r_filter: float) -> CloudOverlapResult:
    """Maximum cloud overlap of ``read`` over several constituent clouds."""
    read_f = voxel_filter(as_points(read), r_filter)
    if len(read_f) == 0:
        raise DegenerateInputError("read cloud is empty")
    best = CloudOverlapResult(0.0, 0, len(read_f))
    for ref in refs:
        n = _count_close(read_f, voxel_filter(as_points(ref), r_filter), r_filter)
        if n > best.overlapping_points:
            best = CloudOverlapResult(n / len(read_f), n, len(read_f))
    return best


def aabb_overlap(read: AABB, ref: AABB) -> AabbOverlapResult:
    if read.volume <= 0 or ref.volume <= 0:
        raise DegenerateInputError("zero-volume bounding box")
    lo = np.maximum(read.min, ref.min)
    hi = np.minimum(read.max, ref.max)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    return AabbOverlapResult(inter / read.volume, inter / ref.volume, inter)


def voxel_overlap(read_grid: OccupancyGrid, read_root: PoseSE3,
                  ref_grid: OccupancyGrid, ref_root: PoseSE3) -> SubmapOverlapResult:
    """Count read voxels whose co-located ref voxel is known with the same state.

    "Co-located" means: the read voxel centre, mapped into the ref submap
    frame through both root poses, falls inside the ref voxel.
    """
    read_mask = read_grid.known_mask()
    known_read = int(np.count_nonzero(read_mask))
    known_ref = ref_grid.known_count
    if known_read == 0 or known_ref == 0:
        raise DegenerateInputError("submap without known voxels")
    read_states = read_grid.allocated_states()[read_mask]
    centers = read_grid.centers(unpack_keys(read_grid.packed_keys[read_mask]))
    in_ref = between(ref_root, read_root).apply(centers)
    ref_keys = np.floor(in_ref / ref_grid.resolution).astype(np.int64)
    ref_states = ref_grid.states_packed(pack_keys(ref_keys))
    agree = (ref_states != VoxelState.UNKNOWN) & (ref_states == read_states)
    n = int(np.count_nonzero(agree))
    # several read voxels can land in one ref voxel under rotation
    return SubmapOverlapResult(n / known_read, min(1.0, n / known_ref), n, known_read, known_ref)


def submap_overlap(read, ref) -> SubmapOverlapResult:
    """``voxel_overlap`` for objects carrying ``grid`` and ``root_pose``."""
    return voxel_overlap(read.grid, read.root_pose, ref.grid, ref.root_pose)
