import math

import numpy as np
import pytest

from elastic_submaps.se3 import PoseSE3, adjoint, between, exp, log
from elastic_submaps.synth import (
    PRESETS,
    Box,
    DegeneratePoseError,
    EnvironmentSpec,
    EnvironmentSpecError,
    NoiseModel,
    ScanPattern,
    cast_rays,
    generate_mission,
    large_network,
    resample_path,
    room_network,
    simulate_scan,
    small_network,
)

TINY = ScanPattern(2, 4)


def cube_room():
    return room_network({"r": (-5.0, -5.0, 5.0, 5.0)}, [], height=10.0, floor_z=-5.0)


def test_ray_along_x_hits_inner_wall_face():
    t = cast_rays(cube_room(), np.zeros(3), np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, 1.0]]), 50.0)
    # walls are centred on the room edge; floor and ceiling lie outside the interior
    assert np.allclose(t, [5.0 - 0.1, 5.0 - 0.1, 5.0], atol=1e-12)


def test_short_range_gives_empty_scan():
    cloud = simulate_scan(cube_room(), PoseSE3.identity(), ScanPattern(8, 16, max_range=3.0), NoiseModel(range_std=0.0))
    assert len(cloud.points) == 0


def test_scan_is_deterministic_per_seed():
    env, pose, pat = cube_room(), exp([0, 0, 0.3, 1, 1, 0]), ScanPattern(8, 32)
    a = simulate_scan(env, pose, pat, NoiseModel(), seed=7).points
    b = simulate_scan(env, pose, pat, NoiseModel(), seed=7).points
    c = simulate_scan(env, pose, pat, NoiseModel(), seed=8).points
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


def test_degenerate_sensor_poses():
    env = cube_room()
    with pytest.raises(DegeneratePoseError):
        simulate_scan(env, PoseSE3.from_rt(np.eye(3), [5.0, 0, 0]), TINY)
    with pytest.raises(DegeneratePoseError):
        simulate_scan(env, PoseSE3.from_rt(np.eye(3), [50.0, 0, 0]), TINY)


def test_doors_let_rays_through():
    env = room_network({"a": (0.0, 0.0, 4.0, 4.0), "b": (4.0, 0.0, 8.0, 4.0)}, [(4.0, 2.0)])
    t = cast_rays(env, np.array([2.0, 2.0, 1.0]), np.array([[1.0, 0, 0]]), 50.0)
    assert math.isclose(t[0], 8.0 - 0.1 - 2.0)
    t = cast_rays(env, np.array([2.0, 1.0, 1.0]), np.array([[1.0, 0, 0]]), 50.0)
    assert math.isclose(t[0], 4.0 - 0.1 - 2.0)


def test_environment_validation():
    wall = Box((0, 0, 0), (1, 10, 3))
    with pytest.raises(EnvironmentSpecError):
        EnvironmentSpec((wall,), (Box((5, 5, 0), (6, 6, 2)),))
    with pytest.raises(EnvironmentSpecError):
        Box((0, 0, 0), (0, 1, 1))
    with pytest.raises(EnvironmentSpecError):
        room_network({"r": (0.0, 0.0, 4.0, 4.0)}, [(2.0, 2.0)])
    with pytest.raises(ValueError):
        ScanPattern(1, 10)
    with pytest.raises(ValueError):
        ScanPattern(4, 10, vertical_fov_deg=180.0)
    with pytest.raises(ValueError):
        NoiseModel(odometry_std=(1, 2, 3))


def test_environment_json_round_trip():
    env = small_network().env
    assert EnvironmentSpec.from_json(env.to_json()) == env


def test_points_lie_on_surfaces_within_three_sigma():
    env, sigma = small_network().env, 0.01
    pose = exp([0, 0, 0.7, 4.0, 4.0, 1.0])
    pts = pose.apply(simulate_scan(env, pose, ScanPattern(32, 256), NoiseModel(range_std=sigma), seed=3).points)
    def outside(box):
        lo, hi = np.array(box.min), np.array(box.max)
        return np.linalg.norm(np.maximum(np.maximum(lo - pts, pts - hi), 0.0), axis=1)

    dist = np.full(len(pts), np.inf)
    for slab in env.slabs:
        lo, hi = np.array(slab.min), np.array(slab.max)
        # a point inside a slab is as far from free space as its nearest face or doorway
        inside = np.min(np.minimum(pts - lo, hi - pts), axis=1).clip(min=0.0)
        for door in env.doorways_of(slab):
            inside = np.minimum(inside, outside(door))
        out = outside(slab)
        dist = np.minimum(dist, np.where(out > 0, out, inside))
    assert np.mean(dist <= 3 * sigma) >= 0.99
    assert np.all(dist <= 6 * sigma)


def test_single_waypoint_and_corridor_node_counts():
    env = room_network({"c": (0.0, 0.0, 12.0, 3.0)}, [])
    one = generate_mission(env, [[1.0, 1.5, 1.0]], pattern=TINY)
    assert len(one.nodes) == 1 and one.loops == []
    line = generate_mission(env, [[1.0, 1.5, 1.0], [11.0, 1.5, 1.0]], node_spacing=2.0, pattern=TINY)
    assert len(line.nodes) == 6
    assert np.allclose([n.timestamp for n in line.nodes], np.arange(6) * 2.0)


def test_waypoint_inside_wall_is_rejected():
    env = room_network({"c": (0.0, 0.0, 12.0, 3.0)}, [])
    with pytest.raises(EnvironmentSpecError):
        generate_mission(env, [[1.0, 1.5, 1.0], [12.0, 1.5, 1.0]], pattern=TINY)


def test_resample_path_spacing():
    pos, yaw, s = resample_path([[0, 0, 0], [3, 0, 0], [3, 4, 0]], 1.0)
    assert len(pos) == 8 and np.allclose(np.diff(s), 1.0)
    assert np.allclose(pos[5], [3, 2, 0]) and math.isclose(yaw[5], math.pi / 2)


def _revisits(mission, radius):
    pos = np.array([t.translation for t in mission.ground_truth])
    out = []
    for k in range(2, len(pos)):
        close = np.flatnonzero(np.linalg.norm(pos[:k - 1] - pos[k], axis=1) < radius)
        if len(close):
            out.append((k, int(close[0])))
    return out


@pytest.mark.parametrize("laps", [1, 3])
def test_small_network_closures_match_proximity_oracle(laps):
    preset = small_network(laps)
    m = generate_mission(preset.env, preset.waypoints, pattern=TINY)
    got = [(k, e.head_id) for k, e in m.loops]
    assert all(e.tail_id == k for k, e in m.loops)
    assert got == _revisits(m, 0.4)
    lap_ends = np.cumsum(preset.lap_lengths)
    lap_of = [int(np.searchsorted(lap_ends, m.arclength[k] - 1e-9)) + 1 for k, _ in got]
    if laps == 1:
        assert got == [(len(m.nodes) - 1, 0)]
    else:
        assert {2, 3} <= set(lap_of) and len(got) >= 2


def test_presets_build():
    for name, make in PRESETS.items():
        p = make(1)
        assert len(p.lap_lengths) == 1 and p.waypoints.shape[1] == 3
        assert not any(p.env.blocked(w) for w in p.waypoints), name
    assert large_network().lap_lengths[0] > small_network(1).lap_lengths[0]


def test_mission_is_deterministic():
    p = small_network(1)
    a = generate_mission(p.env, p.waypoints, pattern=ScanPattern(4, 16), seed=5)
    b = generate_mission(p.env, p.waypoints, pattern=ScanPattern(4, 16), seed=5)
    for x, y in zip(a.nodes, b.nodes):
        assert np.array_equal(x.pose.matrix(), y.pose.matrix()) and np.array_equal(x.covariance, y.covariance)
    assert all(s.tobytes() == t.tobytes() for s, t in zip(a.scans, b.scans))


SQUARE = np.array([[1, 1, 1], [7, 1, 1], [7, 7, 1], [1, 7, 1], [1, 1, 1]], dtype=float)
OPEN = room_network({"r": (0.0, 0.0, 8.0, 8.0)}, [])
NOISE = NoiseModel(odometry_std=(0.004, 0.004, 0.01, 0.02, 0.02, 0.01))


def test_chained_covariance_matches_monte_carlo():
    runs = [generate_mission(OPEN, SQUARE, 2.0, TINY, NOISE, seed=s) for s in range(400)]
    m0 = runs[0]
    assert [k for k, _ in m0.loops] == [len(m0.nodes) - 1]
    for k in (5, len(m0.nodes) - 2, len(m0.nodes) - 1):
        errs = np.array([log(between(m.nodes[k].pose, m.ground_truth[k])) for m in runs])
        model = np.mean([m.nodes[k].covariance for m in runs], axis=0)
        sample = errs.T @ errs / len(errs)
        assert np.linalg.norm(sample - model) / np.linalg.norm(model) < 0.2
    # cross blocks between the closure ends
    a, b = 0, len(m0.nodes) - 2
    ea = np.array([log(between(m.nodes[a].pose, m.ground_truth[a])) for m in runs])
    eb = np.array([log(between(m.nodes[b].pose, m.ground_truth[b])) for m in runs])
    model = np.mean([m.cross[(5, b)] for m in runs], axis=0)
    e5 = np.array([log(between(m.nodes[5].pose, m.ground_truth[5])) for m in runs])
    sample = e5.T @ eb / len(runs)
    assert np.linalg.norm(sample - model) / np.linalg.norm(model) < 0.25
    assert np.abs(ea).max() < 1e-3


def test_covariance_growth_between_closures():
    p = small_network(2)
    m = generate_mission(p.env, p.waypoints, pattern=TINY, noise=NOISE, seed=1)
    closures = {k for k, _ in m.loops}
    for k in range(1, len(m.nodes)):
        prev, cur = m.nodes[k - 1], m.nodes[k]
        if k in closures:
            # the correction shrinks the whole marginal by the configured factor
            assert np.trace(cur.covariance) < np.trace(prev.covariance)
            continue
        assert np.trace(cur.covariance[:3, :3]) >= np.trace(prev.covariance[:3, :3]) - 1e-15
        # expressed in the map frame the marginal grows in the Loewner order
        cm = adjoint(cur.pose) @ cur.covariance @ adjoint(cur.pose).T
        pm = adjoint(prev.pose) @ prev.covariance @ adjoint(prev.pose).T
        assert np.linalg.eigvalsh(cm - pm).min() >= -1e-12 * np.trace(cm)
        assert np.trace(cm) >= np.trace(pm)


def test_closure_correction_scales_covariance():
    m_on = generate_mission(OPEN, SQUARE, 2.0, TINY, NOISE, seed=2)
    m_off = generate_mission(OPEN, SQUARE, 2.0, TINY, NoiseModel(NOISE.odometry_std, loop_correction=False), seed=2)
    k = len(m_on.nodes) - 1
    assert np.allclose(m_on.nodes[k].covariance, 0.1 * m_off.nodes[k].covariance)
    e_on = log(between(m_on.nodes[k].pose, m_on.ground_truth[k]))
    e_off = log(between(m_off.nodes[k].pose, m_off.ground_truth[k]))
    assert np.allclose(e_on, math.sqrt(0.1) * e_off, rtol=1e-3, atol=1e-9)
