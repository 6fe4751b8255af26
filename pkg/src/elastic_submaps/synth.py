"""Box-world room networks, a ray-cast LiDAR model and mission synthesis.

Walls, floors and ceilings are axis-aligned boxes; doorways are boxes
subtracted from the one wall they cut.  Missions follow a waypoint polyline,
drop a pose-graph node every ``node_spacing`` metres, perturb the estimated
poses with chained odometry noise and track the first-order covariance of
every node (and between every pair of nodes) exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .atlas import LoopClosure, PoseGraphNode
from .se3 import PointCloud, PoseSE3, adjoint, between, exp, inverse, log


class EnvironmentSpecError(ValueError):
    pass


class DegeneratePoseError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    min: tuple
    max: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min)
        hi = tuple(float(v) for v in self.max)
        if len(lo) != 3 or len(hi) != 3 or any(a >= b for a, b in zip(lo, hi)):
            raise EnvironmentSpecError(f"degenerate box {lo} {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    def overlaps(self, other: Box) -> bool:
        """Positive-volume intersection (touching faces do not count)."""
        return all(a0 < b1 and b0 < a1 for a0, a1, b0, b1 in zip(self.min, self.max, other.min, other.max))

    def contains_point(self, p, strict: bool = True) -> bool:
        p = np.asarray(p, dtype=float)
        if strict:
            return bool(np.all(p > self.min) and np.all(p < self.max))
        return bool(np.all(p >= self.min) and np.all(p <= self.max))

    def to_json(self) -> dict:
        return {"min": list(self.min), "max": list(self.max)}

    @classmethod
    def from_json(cls, d) -> Box:
        return cls(tuple(d["min"]), tuple(d["max"]))


@dataclass(frozen=True)
class EnvironmentSpec:
    slabs: tuple
    doorways: tuple = ()
    floors: tuple = (0.0,)
    bounds: Box | None = None
    # named free-space interiors, only used for evaluation
    rooms: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "slabs", tuple(self.slabs))
        object.__setattr__(self, "doorways", tuple(self.doorways))
        object.__setattr__(self, "floors", tuple(float(z) for z in self.floors))
        if not self.slabs:
            raise EnvironmentSpecError("environment needs at least one slab")
        for i, d in enumerate(self.doorways):
            n = sum(d.overlaps(s) for s in self.slabs)
            if n != 1:
                raise EnvironmentSpecError(f"doorway {i} cuts {n} wall slabs; expected exactly one")
        if self.bounds is None:
            lo = np.min([s.min for s in self.slabs], axis=0)
            hi = np.max([s.max for s in self.slabs], axis=0)
            object.__setattr__(self, "bounds", Box(tuple(lo), tuple(hi)))

    def doorways_of(self, slab: Box) -> list:
        return [d for d in self.doorways if d.overlaps(slab)]

    def blocked(self, p) -> bool:
        """True if ``p`` lies inside solid material (a slab minus its doorways)."""
        for s in self.slabs:
            if s.contains_point(p) and not any(d.contains_point(p, strict=False) for d in self.doorways_of(s)):
                return True
        return False

    def to_json(self) -> dict:
        return {
            "slabs": [s.to_json() for s in self.slabs],
            "doorways": [d.to_json() for d in self.doorways],
            "floors": list(self.floors),
            "bounds": self.bounds.to_json(),
            "rooms": {k: v.to_json() for k, v in self.rooms.items()},
        }

    @classmethod
    def from_json(cls, d) -> EnvironmentSpec:
        return cls(
            slabs=tuple(Box.from_json(s) for s in d["slabs"]),
            doorways=tuple(Box.from_json(s) for s in d.get("doorways", [])),
            floors=tuple(d.get("floors", [0.0])),
            bounds=Box.from_json(d["bounds"]) if d.get("bounds") else None,
            rooms={k: Box.from_json(v) for k, v in d.get("rooms", {}).items()},
        )


@dataclass(frozen=True)
class ScanPattern:
    vertical_beams: int = 32
    horizontal_samples: int = 256
    vertical_fov_deg: float = 90.0
    max_range: float = 50.0

    def __post_init__(self):
        if self.vertical_beams < 2 or self.horizontal_samples < 2:
            raise ValueError("beam and sample counts must be at least 2")
        if not 0.0 < self.vertical_fov_deg < 180.0:
            raise ValueError("vertical FoV must lie in (0, 180) degrees")
        if not self.max_range > 0:
            raise ValueError("max_range must be positive")

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, elevation-major."""
        half = math.radians(self.vertical_fov_deg) / 2
        el = np.linspace(-half, half, self.vertical_beams)
        az = np.arange(self.horizontal_samples) * (2 * math.pi / self.horizontal_samples)
        E, A = np.meshgrid(el, az, indexing="ij")
        d = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1)
        return d.reshape(-1, 3)


@dataclass(frozen=True)
class NoiseModel:
    # per-step twist noise, [rotation (rad); translation (m)] ordering
    odometry_std: tuple = (0.001, 0.001, 0.001, 0.005, 0.005, 0.002)
    range_std: float = 0.005
    loop_correction: bool = True
    # on a closure the error is scaled by sqrt(f) and the covariance by f
    correction_factor: float = 0.1
    prior_std: float = 1e-4

    def __post_init__(self):
        std = tuple(float(v) for v in self.odometry_std)
        if len(std) != 6:
            raise ValueError("odometry_std needs 6 entries")
        object.__setattr__(self, "odometry_std", std)
        if min(std) < 0 or self.range_std < 0 or self.prior_std < 0:
            raise ValueError("standard deviations must be non-negative")
        if not 0.0 <= self.correction_factor <= 1.0:
            raise ValueError("correction_factor must lie in [0, 1]")


# -- ray casting ------------------------------------------------------------

def _ray_box(origin, dirs, inv, lo, hi):
    with np.errstate(invalid="ignore"):
        a = (np.asarray(lo) - origin) * inv
        b = (np.asarray(hi) - origin) * inv
    t_lo = np.minimum(a, b)
    t_hi = np.maximum(a, b)
    zero = dirs == 0.0
    if zero.any():
        inside = (origin >= lo) & (origin <= hi)
        t_lo = np.where(zero, np.where(inside, -np.inf, np.inf), t_lo)
        t_hi = np.where(zero, np.where(inside, np.inf, -np.inf), t_hi)
    return t_lo.max(axis=1), t_hi.min(axis=1)


def cast_rays(env: EnvironmentSpec, origin, dirs, max_range: float) -> np.ndarray:
    """Distance to the first solid surface along each unit ray; inf on a miss."""
    origin = np.asarray(origin, dtype=float)
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    with np.errstate(divide="ignore"):
        inv = 1.0 / dirs
    best = np.full(len(dirs), np.inf)
    for slab in env.slabs:
        enter, leave = _ray_box(origin, dirs, inv, slab.min, slab.max)
        t = np.maximum(enter, 0.0)
        live = (leave >= t) & (t <= max_range)
        if not live.any():
            continue
        doors = env.doorways_of(slab)
        if doors:
            cuts = [_ray_box(origin, dirs, inv, d.min, d.max) for d in doors]
            # a ray may chain through several adjacent cutouts
            for _ in range(len(cuts)):
                for c0, c1 in cuts:
                    t = np.where((c0 <= t) & (t < c1), c1, t)
            live &= t <= leave
        best = np.where(live & (t < best), t, best)
    best[best > max_range] = np.inf
    return best


def simulate_scan(env: EnvironmentSpec, sensor_pose: PoseSE3, pattern: ScanPattern,
                  noise: NoiseModel | None = None, seed: int = 0) -> PointCloud:
    """Sensor-frame LiDAR returns from ``sensor_pose``; misses are dropped."""
    noise = noise or NoiseModel()
    origin = sensor_pose.translation
    if not env.bounds.contains_point(origin, strict=False):
        raise DegeneratePoseError(f"sensor at {origin.tolist()} is outside the environment bounds")
    if env.blocked(origin):
        raise DegeneratePoseError(f"sensor at {origin.tolist()} is embedded in a wall slab")
    local = pattern.directions()
    t = cast_rays(env, origin, local @ sensor_pose.rotation.T, pattern.max_range)
    hit = np.isfinite(t)
    r = t[hit]
    if noise.range_std > 0:
        r = r + np.random.default_rng(seed).normal(0.0, noise.range_std, size=r.shape)
    return PointCloud(local[hit] * r[:, None], frame="sensor")


# -- room networks ----------------------------------------------------------

def _merge_intervals(items):
    out = []
    for lo, hi in sorted(items):
        if out and lo <= out[-1][1] + 1e-9:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return out


def room_network(rooms: dict, doors, *, height: float = 3.0, wall: float = 0.2,
                 door_width: float = 1.0, door_height: float = 2.2, floor_z: float = 0.0) -> EnvironmentSpec:
    """Closed box world from room rectangles ``name -> (x0, y0, x1, y1)``.

    Room edges are wall centre lines; shared edges become one slab.  Each
    door is an ``(x, y)`` point on a wall centre line.
    """
    h = wall / 2
    horiz: dict = {}
    vert: dict = {}
    for x0, y0, x1, y1 in rooms.values():
        for y in (y0, y1):
            horiz.setdefault(round(y, 9), []).append((x0, x1))
        for x in (x0, x1):
            vert.setdefault(round(x, 9), []).append((y0, y1))
    z0, z1 = floor_z, floor_z + height
    slabs = []
    segments = []
    for y, ivs in sorted(horiz.items()):
        for lo, hi in _merge_intervals(ivs):
            slabs.append(Box((lo - h, y - h, z0), (hi + h, y + h, z1)))
            segments.append(("h", y, lo, hi))
    for x, ivs in sorted(vert.items()):
        for lo, hi in _merge_intervals(ivs):
            slabs.append(Box((x - h, lo - h, z0), (x + h, hi + h, z1)))
            segments.append(("v", x, lo, hi))
    xs = [v for r in rooms.values() for v in (r[0], r[2])]
    ys = [v for r in rooms.values() for v in (r[1], r[3])]
    lo_xy = (min(xs) - h, min(ys) - h)
    hi_xy = (max(xs) + h, max(ys) + h)
    slabs.append(Box((*lo_xy, z0 - wall), (*hi_xy, z0)))
    slabs.append(Box((*lo_xy, z1), (*hi_xy, z1 + wall)))

    cutouts = []
    for dx, dy in doors:
        for axis, c, lo, hi in segments:
            along, across = (dx, dy) if axis == "h" else (dy, dx)
            if abs(across - c) < 1e-9 and lo < along < hi:
                half = door_width / 2
                if axis == "h":
                    cutouts.append(Box((dx - half, dy - wall, z0), (dx + half, dy + wall, z0 + door_height)))
                else:
                    cutouts.append(Box((dx - wall, dy - half, z0), (dx + wall, dy + half, z0 + door_height)))
                break
        else:
            raise EnvironmentSpecError(f"door at ({dx}, {dy}) is not on any wall")
    interiors = {
        name: Box((x0 + h, y0 + h, z0), (x1 - h, y1 - h, z1)) for name, (x0, y0, x1, y1) in rooms.items()
    }
    bounds = Box((*lo_xy, z0 - wall), (*hi_xy, z1 + wall))
    return EnvironmentSpec(tuple(slabs), tuple(cutouts), (floor_z,), bounds, interiors)


@dataclass(frozen=True)
class Preset:
    env: EnvironmentSpec
    waypoints: np.ndarray
    lap_lengths: tuple  # path length of each lap, metres


SENSOR_HEIGHT = 1.0


def _laps(routes, laps: int) -> tuple:
    if laps < 1:
        raise ValueError("need at least one lap")
    pts = [routes[0][0]]
    lengths = []
    for i in range(laps):
        route = np.asarray(routes[i % len(routes)], dtype=float)
        lengths.append(float(np.linalg.norm(np.diff(route, axis=0), axis=1).sum()))
        pts.extend(route[1:])
    wp = np.column_stack([np.asarray(pts), np.full(len(pts), SENSOR_HEIGHT)])
    return wp, tuple(lengths)


def _detour(a, b, length: float) -> tuple:
    """Apex of the isosceles path a -> apex -> b with the given total length."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    half = np.linalg.norm(b - a) / 2
    h = math.sqrt((length / 2) ** 2 - half ** 2)
    u = (b - a) / (2 * half)
    apex = (a + b) / 2 + h * np.array([u[1], -u[0]])
    return tuple(apex)


def small_network(laps: int = 3) -> Preset:
    """Four 8 m x 8 m rooms in a ring, one door between each neighbouring pair."""
    rooms = {
        "A": (0.0, 0.0, 8.0, 8.0),
        "B": (8.0, 0.0, 16.0, 8.0),
        "C": (8.0, 8.0, 16.0, 16.0),
        "D": (0.0, 8.0, 8.0, 16.0),
    }
    doors = [(8.0, 4.0), (12.0, 8.0), (8.0, 12.0), (4.0, 8.0)]
    env = room_network(rooms, doors)
    start = (4.0, 4.0)
    ring = [(8.0, 4.0), (12.0, 4.0), (12.0, 8.0), (12.0, 12.0), (8.0, 12.0), (4.0, 12.0), (4.0, 8.0)]
    # Every lap follows the same ring through room centres and doors.  The
    # later laps take a detour between the start point and the first/last
    # door whose length shifts their nodes off the earlier laps' nodes (by
    # 1 m on lap 2 and 0.5 m on lap 3) while still ending on the start
    # point, so revisits close loops only at lap ends.
    routes = [
        [start, *ring, start],
        [start, _detour(start, ring[-1], 5.0), *ring[::-1], _detour(ring[0], start, 5.0), start],
        [start, _detour(start, ring[0], 4.5), *ring, _detour(ring[-1], start, 5.5), start],
    ]
    wp, lengths = _laps(routes, laps)
    return Preset(env, wp, lengths)


def large_network(laps: int = 1) -> Preset:
    """A 36 m corridor lined by six small rooms to the south and three large
    rooms to the north; every room is entered and left through one door."""
    rooms = {"corridor": (0.0, 6.0, 36.0, 9.0)}
    south = [f"S{i}" for i in range(6)]
    north = [f"N{i}" for i in range(3)]
    for i, name in enumerate(south):
        rooms[name] = (6.0 * i, 0.0, 6.0 * i + 6.0, 6.0)
    for i, name in enumerate(north):
        rooms[name] = (12.0 * i, 9.0, 12.0 * i + 12.0, 17.0)
    doors = [(6.0 * i + 3.0, 6.0) for i in range(6)] + [(12.0 * i + 6.0, 9.0) for i in range(3)]
    env = room_network(rooms, doors)
    route = [(1.5, 7.5)]
    for i in range(6):
        cx = 6.0 * i + 3.0
        route += [(cx - 1.5, 7.5), (cx, 6.0), (cx - 1.5, 3.0), (cx + 1.5, 3.0), (cx, 6.0), (cx + 1.5, 7.5)]
    for i in reversed(range(3)):
        cx = 12.0 * i + 6.0
        route += [(cx + 2.0, 7.5), (cx, 9.0), (cx + 3.0, 13.0), (cx - 3.0, 13.0), (cx, 9.0), (cx - 2.0, 7.5)]
    route.append((1.5, 7.5))
    wp, lengths = _laps([route], laps)
    return Preset(env, wp, lengths)


PRESETS = {"small-network": small_network, "large-network": large_network}


# -- missions ---------------------------------------------------------------

def resample_path(waypoints, spacing: float):
    """Points every ``spacing`` metres of arc length plus the heading (yaw) of
    the segment each lies on.  Returns (positions, yaws, arclengths)."""
    wp = np.asarray(waypoints, dtype=float).reshape(-1, 3)
    if not spacing > 0:
        raise ValueError("node spacing must be positive")
    seg = np.diff(wp, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    keep = seg_len > 1e-12
    starts, seg, seg_len = wp[:-1][keep], seg[keep], seg_len[keep]
    if len(seg) == 0:
        return wp[:1].copy(), np.zeros(1), np.zeros(1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.arange(int(math.floor(cum[-1] / spacing + 1e-9)) + 1) * spacing
    idx = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[idx]) / seg_len[idx]
    pos = starts[idx] + seg[idx] * frac[:, None]
    yaw = np.arctan2(seg[idx, 1], seg[idx, 0])
    return pos, yaw, s


def _yaw_pose(yaw: float, t) -> PoseSE3:
    c, s = math.cos(yaw), math.sin(yaw)
    return PoseSE3.from_rt(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), t)


@dataclass
class Mission:
    env: EnvironmentSpec
    nodes: list  # PoseGraphNode with estimated poses
    scans: list  # (N, 3) float32 arrays, sensor frame
    loops: list  # (arrival_index, LoopClosure)
    cross: dict  # (id_a, id_b) -> E[xi_a xi_b^T]
    ground_truth: list  # PoseSE3
    arclength: np.ndarray

    def node_at_arclength(self, s: float) -> int:
        """Last node at or before arc length ``s``."""
        return int(np.searchsorted(self.arclength, s + 1e-9, side="right") - 1)


def generate_mission(env: EnvironmentSpec, waypoints, node_spacing: float = 2.0,
                     pattern: ScanPattern | None = None, noise: NoiseModel | None = None,
                     loop_closure_radius: float = 0.4, seed: int = 0, out_dir=None) -> Mission:
    """Synthesize a pose graph with scans, covariances and loop closures.

    Estimation error follows ``xi_{k+1} = Ad(delta^-1) xi_k - n_k`` for the
    right perturbation ``true = estimate * Exp(xi)``; the error of every node
    is kept as a linear map of all noise sources, so marginals and cross
    covariances are exact under that model.
    """
    pattern = pattern or ScanPattern()
    noise = noise or NoiseModel()
    wp = np.asarray(waypoints, dtype=float).reshape(-1, 3)
    for i, p in enumerate(wp):
        if env.blocked(p):
            raise EnvironmentSpecError(f"waypoint {i} at {p.tolist()} lies inside a wall slab")
    pos, yaw, arc = resample_path(wp, node_spacing)
    truth = [_yaw_pose(a, p) for a, p in zip(yaw, pos)]
    n = len(truth)

    rng = np.random.default_rng([seed, 0])
    q = np.concatenate([np.full(6, noise.prior_std ** 2), np.tile(np.square(noise.odometry_std), max(n - 1, 0))])
    sqrt_c = math.sqrt(noise.correction_factor)

    G = np.zeros((n, 6, 6 * n))
    G[0][:, :6] = -np.eye(6)
    xi0 = rng.normal(0.0, noise.prior_std, 6)
    est = [truth[0] @ exp(-xi0)]
    loops = []
    for k in range(1, n):
        delta = between(truth[k - 1], truth[k])
        nk = rng.normal(0.0, noise.odometry_std)
        delta_meas = delta @ exp(nk)
        est.append(est[k - 1] @ delta_meas)
        G[k] = adjoint(inverse(delta_meas)) @ G[k - 1]
        G[k][:, 6 * k:6 * k + 6] = -np.eye(6)

        d = np.linalg.norm(pos[:k - 1] - pos[k], axis=1) if k > 1 else np.zeros(0)
        close = np.flatnonzero(d < loop_closure_radius)
        if len(close):
            head = int(close[0])
            loops.append((k, LoopClosure(head, k)))
            if noise.loop_correction:
                err = log(between(est[k], truth[k]))
                est[k] = truth[k] @ exp(-sqrt_c * err)
                G[k] *= sqrt_c

    nodes = []
    scans = []
    for k in range(n):
        cov = (G[k] * q) @ G[k].T
        # timestamps assume 1 m/s
        nodes.append(PoseGraphNode(k, float(arc[k]), est[k], 0.5 * (cov + cov.T), scan_ref=f"scans/{k}.bin"))
        cloud = simulate_scan(env, truth[k], pattern, noise, seed=int(np.random.SeedSequence([seed, 1, k]).generate_state(1)[0]))
        scans.append(cloud.points.astype(np.float32))
    cross = {}
    for a in range(n):
        Ga = G[a] * q
        for b in range(a + 1, n):
            cross[(a, b)] = Ga @ G[b].T
    mission = Mission(env, nodes, scans, loops, cross, truth, arc)
    if out_dir is not None:
        from .dataset import write_dataset

        write_dataset(out_dir, mission)
    return mission
