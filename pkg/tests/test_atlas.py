import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastic_submaps import Atlas, AtlasConfig, LoopClosure, PoseGraphNode
from elastic_submaps.atlas import AtlasError, FusionProposal, StaleProposalError, Trigger
from elastic_submaps.occupancy import compute_aabb
from elastic_submaps.se3 import PoseSE3, exp
from elastic_submaps.synth import NoiseModel, ScanPattern, room_network, simulate_scan

PATTERN = ScanPattern(16, 128)
EXACT = NoiseModel(range_std=0.0)

# four 6 x 10 m rooms in a row, doors in the shared walls
ROW = room_network({f"R{i}": (6.0 * i, 0.0, 6.0 * (i + 1), 10.0) for i in range(4)},
                   [(6.0 * (i + 1), 5.0) for i in range(3)], height=3.0)

# six submaps of three nodes each; S2 and S3 share two viewpoints in R2,
# S5 revisits R0 and closes the loop with node 0
SCRIPT = [(1, 3), (2, 3), (3, 3), (9, 3), (10, 3), (11, 3), (15, 3), (15, 5), (15, 5.5),
          (15, 7.1), (15, 5), (15, 5.5), (21, 3), (22, 3), (20, 3), (2, 3.5), (1.5, 3), (1.2, 3)]
SCRIPT_CFG = AtlasConfig(r_voxel=0.2, d_spawn=4.0, cloud_overlap_spawn=False, l_miss=-0.6)


def _node(i, xy, cov=1e-4):
    return PoseGraphNode(i, float(i), PoseSE3.from_rt(np.eye(3), [xy[0], xy[1], 1.0]), cov * np.eye(6))


def scripted_atlas(cov=1e-4, config=SCRIPT_CFG):
    atlas = Atlas(config)
    for i, xy in enumerate(SCRIPT):
        node = _node(i, xy, cov)
        atlas.ingest_node(node, simulate_scan(ROW, node.pose, PATTERN, EXACT))
    return atlas


def check_invariants(atlas):
    assert [s.id for s in atlas.submaps] == list(range(len(atlas.submaps)))
    seen = []
    for s in atlas.submaps:
        assert s.root_node_id in s.member_node_ids
        assert s.root_pose is atlas.nodes[s.root_node_id].pose
        for nid in s.member_node_ids:
            assert atlas.submap_of(nid) is s
        seen += s.member_node_ids
        if s.grid.known_count:
            box = compute_aabb(s.grid, s.root_pose)
            assert np.allclose(box.min, s.aabb.min) and np.allclose(box.max, s.aabb.max)
    assert sorted(seen) == sorted(atlas.nodes)


def test_loop_closure_scenario_fuses_ends_and_overlapping_pair():
    atlas = scripted_atlas()
    assert [s.member_node_ids for s in atlas.submaps] == [list(range(3 * i, 3 * i + 3)) for i in range(6)]
    proposals = atlas.on_loop_closure(LoopClosure(0, 17))
    executed = [(p.ref_submap_id, p.read_submap_id, p.trigger) for p in proposals if p.executed]
    assert executed == [(0, 5, Trigger.LOOP_CLOSURE_ENDS), (2, 3, Trigger.SUBMAP_OVERLAP)]
    assert [s.id for s in atlas.submaps] == [0, 1, 2, 3]
    assert [s.root_node_id for s in atlas.submaps] == [0, 3, 6, 12]
    assert [len(s.constituent_clouds) for s in atlas.submaps] == [2, 1, 2, 1]
    assert atlas.fusion_events == 2 and atlas.rejection_events == 0
    check_invariants(atlas)


def test_inflated_root_uncertainty_rejects_every_proposal():
    atlas = scripted_atlas(cov=1.0)
    proposals = atlas.on_loop_closure(LoopClosure(0, 17))
    assert proposals and all(p.accepted is False and not p.executed for p in proposals)
    assert len(atlas.submaps) == 6
    assert atlas.rejection_events == len(proposals)
    # the rejected ends pair is not re-proposed through the overlap route
    assert len({(p.ref_submap_id, p.read_submap_id) for p in proposals}) == len(proposals)


def test_baseline_mode_fuses_only_closure_ends():
    atlas = scripted_atlas(config=SCRIPT_CFG.for_mode("baseline"))
    proposals = atlas.on_loop_closure(LoopClosure(0, 17))
    assert len(proposals) == 1 and proposals[0].verdict is None and proposals[0].executed
    assert len(atlas.submaps) == 5


def test_closure_inside_one_submap_proposes_nothing():
    atlas = scripted_atlas()
    assert atlas.on_loop_closure(LoopClosure(0, 2)) == []
    assert len(atlas.submaps) == 6


def test_closure_with_unknown_node_is_an_error():
    atlas = scripted_atlas()
    with pytest.raises(AtlasError):
        atlas.on_loop_closure(LoopClosure(0, 99))
    with pytest.raises(AtlasError):
        LoopClosure(3, 3)


def test_stale_proposal_is_refused():
    atlas = scripted_atlas()
    a, b = atlas.submaps[0], atlas.submaps[5]
    p = FusionProposal(0, 5, Trigger.LOOP_CLOSURE_ENDS, ref_uid=a.uid, read_uid=b.uid)
    atlas.execute_fusion(p)
    with pytest.raises(StaleProposalError):
        atlas.execute_fusion(FusionProposal(0, 5, Trigger.LOOP_CLOSURE_ENDS, ref_uid=a.uid, read_uid=b.uid))
    with pytest.raises(AtlasError):
        FusionProposal(2, 1, Trigger.SUBMAP_OVERLAP)


def test_fusion_memory_and_metrics():
    atlas = scripted_atlas()
    before = atlas.metrics()
    assert before.total_memory_bytes == sum(s.grid.memory_bytes() for s in atlas.submaps)
    atlas.on_loop_closure(LoopClosure(0, 17))
    after = atlas.metrics()
    assert after.submap_count == 4 and after.fusion_events == 2
    assert after.total_memory_bytes < before.total_memory_bytes
    assert after.scan_index == len(SCRIPT)


# -- spawning ----------------------------------------------------------------

TWO_ROOMS = room_network({"A": (0.0, 0.0, 6.0, 6.0), "B": (6.0, 0.0, 12.0, 6.0)}, [(6.0, 3.0)], height=3.0)


def _ingest(atlas, i, xy, env):
    node = _node(i, xy)
    return atlas.ingest_node(node, simulate_scan(env, node.pose, PATTERN, EXACT))


def test_first_node_spawns_and_nearby_node_joins():
    atlas = Atlas()
    first = _ingest(atlas, 0, (2.5, 3.0), TWO_ROOMS)
    assert first.spawned and first.submap_id == 0 and first.reason == "first"
    second = _ingest(atlas, 1, (3.5, 3.0), TWO_ROOMS)
    assert not second.spawned and second.submap_id == 0
    assert second.cloud_overlap >= atlas.config.lambda_spawn


def test_entering_an_unscanned_room_spawns():
    atlas = Atlas()
    _ingest(atlas, 0, (2.5, 2.0), TWO_ROOMS)
    report = _ingest(atlas, 1, (9.5, 4.0), TWO_ROOMS)
    assert report.spawned and report.reason == "cloud_overlap"
    assert report.cloud_overlap < atlas.config.lambda_spawn


def test_distance_spawn_uses_root_distance():
    atlas = Atlas(AtlasConfig(d_spawn=1.5, cloud_overlap_spawn=False))
    reports = [_ingest(atlas, i, (1.0 + i, 3.0), TWO_ROOMS) for i in range(4)]
    assert [r.spawned for r in reports] == [True, False, True, False]
    travel = Atlas(AtlasConfig(d_spawn=1.5, cloud_overlap_spawn=False, spawn_distance="travel"))
    for i, xy in enumerate([(1, 3), (2, 3), (1, 3.2)]):
        r = _ingest(travel, i, xy, TWO_ROOMS)
    assert r.spawned and r.reason == "distance"


def test_empty_scan_joins_active_submap():
    atlas = Atlas()
    _ingest(atlas, 0, (2.5, 3.0), TWO_ROOMS)
    r = atlas.ingest_node(_node(1, (50.0, 3.0)), np.zeros((0, 3)))
    assert not r.spawned and r.submap_id == 0


def test_node_order_is_enforced():
    atlas = Atlas()
    _ingest(atlas, 5, (2.5, 3.0), TWO_ROOMS)
    with pytest.raises(AtlasError):
        _ingest(atlas, 5, (2.5, 3.0), TWO_ROOMS)
    with pytest.raises(AtlasError):
        _ingest(atlas, 4, (2.5, 3.0), TWO_ROOMS)


# -- elastic pose updates ----------------------------------------------------

def _boxes(atlas):
    return [(s.aabb.min.copy(), s.aabb.max.copy()) for s in atlas.submaps]


def test_identity_update_keeps_boxes():
    atlas = scripted_atlas()
    before = _boxes(atlas)
    atlas.apply_pose_update({nid: n.pose for nid, n in atlas.nodes.items()})
    for (a0, a1), (b0, b1) in zip(before, _boxes(atlas)):
        assert np.array_equal(a0, b0) and np.array_equal(a1, b1)


def test_translation_update_shifts_boxes():
    atlas = scripted_atlas()
    before = _boxes(atlas)
    shift = exp([0, 0, 0, 5, 0, 0])
    atlas.apply_pose_update({nid: shift @ n.pose for nid, n in atlas.nodes.items()})
    for (a0, a1), (b0, b1) in zip(before, _boxes(atlas)):
        assert np.allclose(b0, a0 + [5, 0, 0]) and np.allclose(b1, a1 + [5, 0, 0])


def test_rotation_update_matches_recomputed_boxes():
    atlas = scripted_atlas()
    turn = exp([0, 0, math.pi / 2, 0, 0, 0])
    atlas.apply_pose_update({nid: turn @ n.pose for nid, n in atlas.nodes.items()})
    for s in atlas.submaps:
        box = compute_aabb(s.grid, turn @ PoseSE3.from_rt(np.eye(3), [*SCRIPT[s.root_node_id], 1.0]))
        assert np.allclose(box.min, s.aabb.min) and np.allclose(box.max, s.aabb.max)
    check_invariants(atlas)


def test_pose_update_for_unknown_node_fails():
    atlas = scripted_atlas()
    with pytest.raises(AtlasError):
        atlas.apply_pose_update({123: PoseSE3.identity()})


def test_partial_update_moves_one_submap_root():
    atlas = scripted_atlas()
    # the grid is carried rigidly with its root node
    offset = exp([0, 0, 0, 0, 0.4, 0])
    atlas.apply_pose_update({i: offset @ atlas.nodes[i].pose for i in (15, 16, 17)})
    s5 = atlas.submaps[5]
    assert np.allclose(s5.root_pose.translation, [2.0, 3.9, 1.0])
    check_invariants(atlas)


# -- random closure sequences -------------------------------------------------

@settings(max_examples=15)
@given(st.lists(st.tuples(st.integers(0, 17), st.integers(0, 17)).filter(lambda t: t[0] != t[1]),
                min_size=1, max_size=4))
def test_invariants_hold_under_random_closures(edges):
    atlas = _cached_atlas()
    count = len(atlas.submaps)
    for h, t in edges:
        atlas.on_loop_closure(LoopClosure(h, t))
        assert len(atlas.submaps) <= count
        count = len(atlas.submaps)
        check_invariants(atlas)
    assert atlas.metrics().fusion_events == 6 - len(atlas.submaps)


_BASE = {}


def _cached_atlas():
    import copy

    if "a" not in _BASE:
        _BASE["a"] = scripted_atlas()
    return copy.deepcopy(_BASE["a"])
