"""Sparse single-resolution log-odds occupancy grid.

Voxel ``k`` covers ``[k * res, (k + 1) * res)`` on every axis, so the key of
a point is ``floor(p / res)`` and its centre is ``(k + 0.5) * res``.

Storage is a pair of parallel arrays: packed int64 keys kept sorted, and
float64 log-odds.  Lookups are binary searches, updates are batched merges.
Reads never allocate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from numba import njit

from .se3 import PoseSE3, as_points

_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1
KEY_LIMIT = _OFFSET - 1

# memory model: a sorted key array (int64) + a log-odds array (float64)
BYTES_PER_VOXEL = 16
GRID_OVERHEAD_BYTES = 1024

DEFAULT_RESOLUTION = 0.065


class VoxelState(IntEnum):
    UNKNOWN = 0
    FREE = 1
    OCCUPIED = 2


class EmptyAABBError(ValueError):
    pass


@dataclass(frozen=True)
class LogOddsParams:
    l_hit: float = 0.85
    l_miss: float = -0.4
    l_occ: float = 1.5
    l_free: float = -1.5
    l_min: float = -5.0
    l_max: float = 5.0

    def __post_init__(self):
        if not (self.l_hit > 0 and self.l_miss < 0):
            raise ValueError("l_hit must be positive and l_miss negative")
        if not (self.l_min <= self.l_free < 0 < self.l_occ <= self.l_max):
            raise ValueError("need l_min <= l_free < 0 < l_occ <= l_max")


@dataclass(frozen=True)
class AABB:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=float).reshape(3)
        hi = np.asarray(self.max, dtype=float).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"AABB min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def volume(self) -> float:
        return float(np.prod(self.extent))

    def contains(self, other: AABB) -> bool:
        return bool(np.all(self.min <= other.min) and np.all(other.max <= self.max))

    def as_list(self) -> list:
        return [self.min.tolist(), self.max.tolist()]


def pack_keys(keys) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64).reshape(-1, 3)
    if k.size and (k.min() < -KEY_LIMIT or k.max() > KEY_LIMIT):
        raise ValueError("voxel key outside the representable range")
    k = k + _OFFSET
    return (k[:, 0] << (2 * _BITS)) | (k[:, 1] << _BITS) | k[:, 2]


def unpack_keys(packed) -> np.ndarray:
    p = np.asarray(packed, dtype=np.int64)
    out = np.empty((len(p), 3), dtype=np.int64)
    out[:, 0] = (p >> (2 * _BITS)) & _MASK
    out[:, 1] = (p >> _BITS) & _MASK
    out[:, 2] = p & _MASK
    return out - _OFFSET


@njit(cache=True)
def _traverse_rays(origin, ends, start_key, end_keys, carve_end, counts, res):
    """3D DDA from ``origin`` to every endpoint.

    Writes the traversed keys of all rays contiguously.  The end voxel is
    included only where ``carve_end`` is set (truncated rays).
    """
    total = 0
    for i in range(len(counts)):
        total += counts[i]
    out = np.empty((total, 3), dtype=np.int64)
    pos = 0
    for i in range(ends.shape[0]):
        d0 = ends[i, 0] - origin[0]
        d1 = ends[i, 1] - origin[1]
        d2 = ends[i, 2] - origin[2]
        d = (d0, d1, d2)
        key = np.empty(3, dtype=np.int64)
        step = np.empty(3, dtype=np.int64)
        t_max = np.empty(3)
        t_delta = np.empty(3)
        remaining = np.empty(3, dtype=np.int64)
        for a in range(3):
            key[a] = start_key[a]
            diff = end_keys[i, a] - start_key[a]
            remaining[a] = abs(diff)
            if d[a] > 0.0:
                step[a] = 1
                t_max[a] = ((key[a] + 1) * res - origin[a]) / d[a]
                t_delta[a] = res / d[a]
            elif d[a] < 0.0:
                step[a] = -1
                t_max[a] = (key[a] * res - origin[a]) / d[a]
                t_delta[a] = -res / d[a]
            else:
                step[a] = 0
                t_max[a] = np.inf
                t_delta[a] = np.inf
        n_steps = remaining[0] + remaining[1] + remaining[2]
        for s in range(n_steps):
            out[pos, 0] = key[0]
            out[pos, 1] = key[1]
            out[pos, 2] = key[2]
            pos += 1
            # advance along the axis whose boundary comes first, but never
            # past the end key on that axis (guards against round-off)
            best = -1
            best_t = np.inf
            for a in range(3):
                if remaining[a] > 0 and (best < 0 or t_max[a] < best_t):
                    best = a
                    best_t = t_max[a]
            key[best] += step[best]
            t_max[best] += t_delta[best]
            remaining[best] -= 1
        if carve_end[i]:
            out[pos, 0] = key[0]
            out[pos, 1] = key[1]
            out[pos, 2] = key[2]
            pos += 1
    return out


@dataclass
class IntegrationStats:
    rays: int = 0
    hits: int = 0
    truncated: int = 0
    below_min_range: int = 0
    non_finite: int = 0


@dataclass
class OccupancyGrid:
    resolution: float = DEFAULT_RESOLUTION
    params: LogOddsParams = field(default_factory=LogOddsParams)

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        self._keys = np.zeros(0, dtype=np.int64)
        self._values = np.zeros(0, dtype=np.float64)

    # -- storage -----------------------------------------------------------

    def copy(self) -> OccupancyGrid:
        g = OccupancyGrid(self.resolution, self.params)
        g._keys = self._keys.copy()
        g._values = self._values.copy()
        return g

    @classmethod
    def from_arrays(cls, resolution, packed_keys, values, params=None) -> OccupancyGrid:
        g = cls(resolution, params or LogOddsParams())
        order = np.argsort(packed_keys, kind="stable")
        g._keys = np.asarray(packed_keys, dtype=np.int64)[order]
        g._values = np.asarray(values, dtype=np.float64)[order]
        if len(np.unique(g._keys)) != len(g._keys):
            raise ValueError("duplicate voxel keys")
        return g

    @property
    def packed_keys(self) -> np.ndarray:
        return self._keys

    @property
    def values(self) -> np.ndarray:
        return self._values

    def keys(self) -> np.ndarray:
        """(N, 3) integer keys of all allocated voxels, sorted."""
        return unpack_keys(self._keys)

    def _locate(self, packed: np.ndarray):
        idx = np.searchsorted(self._keys, packed)
        found = idx < len(self._keys)
        found[found] = self._keys[idx[found]] == packed[found]
        return idx, found

    def _merge(self, packed: np.ndarray, values: np.ndarray, additive: bool) -> None:
        # packed must be unique and sorted
        if len(packed) == 0:
            return
        lo, hi = self.params.l_min, self.params.l_max
        idx, found = self._locate(packed)
        base = self._values[idx[found]] if additive else 0.0
        self._values[idx[found]] = np.clip(base + values[found], lo, hi)
        new = ~found
        if np.any(new):
            self._keys = np.insert(self._keys, idx[new], packed[new])
            self._values = np.insert(self._values, idx[new], np.clip(values[new], lo, hi))

    def update(self, keys, deltas) -> None:
        """Add log-odds ``deltas`` at (N, 3) ``keys``; repeated keys accumulate."""
        packed = pack_keys(keys)
        deltas = np.broadcast_to(np.asarray(deltas, dtype=float), packed.shape)
        uniq, inv = np.unique(packed, return_inverse=True)
        summed = np.bincount(inv, weights=deltas, minlength=len(uniq))
        self._merge(uniq, summed, additive=True)

    def set_logodds(self, keys, values) -> None:
        """Overwrite (clamped) values; mostly for fixtures."""
        packed = pack_keys(keys)
        values = np.broadcast_to(np.asarray(values, dtype=float), packed.shape)
        uniq, first = np.unique(packed, return_index=True)
        self._merge(uniq, np.asarray(values[first], dtype=float), additive=False)

    # -- queries -----------------------------------------------------------

    def logodds_packed(self, packed) -> np.ndarray:
        """Log-odds at packed keys; unallocated keys read as 0."""
        packed = np.asarray(packed, dtype=np.int64)
        out = np.zeros(len(packed))
        idx, ok = self._locate(packed)
        out[ok] = self._values[idx[ok]]
        return out

    def allocated_packed(self, packed) -> np.ndarray:
        return self._locate(np.asarray(packed, dtype=np.int64))[1]

    def _classify(self, values, allocated=None) -> np.ndarray:
        p = self.params
        st = np.full(len(values), VoxelState.UNKNOWN, dtype=np.int8)
        st[values <= p.l_free] = VoxelState.FREE
        st[values >= p.l_occ] = VoxelState.OCCUPIED
        if allocated is not None:
            st[~allocated] = VoxelState.UNKNOWN
        return st

    def states_packed(self, packed) -> np.ndarray:
        packed = np.asarray(packed, dtype=np.int64)
        return self._classify(self.logodds_packed(packed), self.allocated_packed(packed))

    def states(self, keys) -> np.ndarray:
        return self.states_packed(pack_keys(keys))

    def voxel_state(self, key) -> VoxelState:
        return VoxelState(int(self.states(np.asarray(key).reshape(1, 3))[0]))

    def logodds(self, key) -> float:
        return float(self.logodds_packed(pack_keys(np.asarray(key).reshape(1, 3)))[0])

    def allocated_states(self) -> np.ndarray:
        return self._classify(self._values)

    def known_mask(self) -> np.ndarray:
        p = self.params
        return (self._values <= p.l_free) | (self._values >= p.l_occ)

    @property
    def allocated_count(self) -> int:
        return len(self._keys)

    @property
    def free_count(self) -> int:
        return int(np.count_nonzero(self._values <= self.params.l_free))

    @property
    def occupied_count(self) -> int:
        return int(np.count_nonzero(self._values >= self.params.l_occ))

    @property
    def known_count(self) -> int:
        return self.free_count + self.occupied_count

    def key_of(self, points) -> np.ndarray:
        return np.floor(as_points(points) / self.resolution).astype(np.int64)

    def centers(self, keys=None) -> np.ndarray:
        k = self.keys() if keys is None else np.asarray(keys)
        return (k + 0.5) * self.resolution

    def memory_bytes(self) -> int:
        return memory_model(self.allocated_count)

    # -- integration -------------------------------------------------------

    def integrate_scan(self, sensor_pose: PoseSE3, scan, range_min=0.5, range_max=60.0) -> IntegrationStats:
        """Ray-integrate a scan given in the sensor frame.

        Each voxel is updated at most once per scan: endpoint voxels get
        ``l_hit``, every other traversed voxel gets ``l_miss``.  Returns
        beyond ``range_max`` carve free space up to ``range_max`` only.
        """
        pts = as_points(scan)
        stats = IntegrationStats()
        if len(pts) == 0:
            return stats
        finite = np.all(np.isfinite(pts), axis=1)
        stats.non_finite = int(np.count_nonzero(~finite))
        pts = pts[finite]
        rng = np.linalg.norm(pts, axis=1)
        keep = rng >= range_min
        stats.below_min_range = int(np.count_nonzero(~keep))
        pts, rng = pts[keep], rng[keep]
        stats.rays = len(pts)
        if len(pts) == 0:
            return stats

        truncated = rng > range_max
        stats.truncated = int(np.count_nonzero(truncated))
        stats.hits = stats.rays - stats.truncated
        if np.any(truncated):
            pts = pts.copy()
            pts[truncated] *= (range_max / rng[truncated])[:, None]

        origin = np.asarray(sensor_pose.translation, dtype=float)
        ends = sensor_pose.apply(pts)
        res = self.resolution
        start_key = np.floor(origin / res).astype(np.int64)
        end_keys = np.floor(ends / res).astype(np.int64)
        counts = np.abs(end_keys - start_key).sum(axis=1) + truncated.astype(np.int64)
        traversed = _traverse_rays(origin, ends, start_key, end_keys, truncated, counts, float(res))

        hit_packed = np.unique(pack_keys(end_keys[~truncated]))
        miss_packed = np.unique(pack_keys(traversed))
        miss_packed = miss_packed[~np.isin(miss_packed, hit_packed, assume_unique=True)]

        packed = np.concatenate([hit_packed, miss_packed])
        deltas = np.concatenate([
            np.full(len(hit_packed), self.params.l_hit),
            np.full(len(miss_packed), self.params.l_miss),
        ])
        order = np.argsort(packed, kind="stable")
        self._merge(packed[order], deltas[order], additive=True)
        return stats

    # -- geometry ----------------------------------------------------------

    def aabb(self, root_pose: PoseSE3) -> AABB:
        return compute_aabb(self, root_pose)

    def fuse(self, read: OccupancyGrid, t_ref_read: PoseSE3) -> None:
        fuse_grids(self, read, t_ref_read)


def memory_model(allocated: int) -> int:
    return GRID_OVERHEAD_BYTES + BYTES_PER_VOXEL * int(allocated)


def compute_aabb(grid: OccupancyGrid, root_pose: PoseSE3) -> AABB:
    """Tightest map-frame box containing every known voxel cube."""
    mask = grid.known_mask()
    if not np.any(mask):
        raise EmptyAABBError("grid has no known voxels")
    centers = root_pose.apply(grid.centers(unpack_keys(grid.packed_keys[mask])))
    # half-extent of a rotated cube along each map axis
    half = 0.5 * grid.resolution * np.abs(root_pose.rotation).sum(axis=1)
    return AABB(centers.min(axis=0) - half, centers.max(axis=0) + half)


def fuse_grids(ref: OccupancyGrid, read: OccupancyGrid, t_ref_read: PoseSE3) -> OccupancyGrid:
    """Add the log-odds of every allocated ``read`` voxel into ``ref``.

    Read voxel centres are mapped into the ref frame and resampled to the
    ref voxel containing them.
    """
    if read.allocated_count == 0:
        return ref
    centers = t_ref_read.apply(read.centers())
    keys = np.floor(centers / ref.resolution).astype(np.int64)
    ref.update(keys, read.values)
    return ref
