"""Submap atlas: scan allocation, spawning, elastic updates and fusion.

Incoming pose-graph nodes are integrated into the *active* submap (the
submap of the most recent node) until either the scan stops overlapping
that submap's accumulated clouds or the distance from the submap root
grows too large; then a new submap is spawned.  Loop closures trigger
fusion proposals, which are gated on the relative uncertainty of the two
submap root poses before being executed.
"""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .config import AtlasConfig
from .occupancy import AABB, EmptyAABBError, OccupancyGrid, compute_aabb, fuse_grids
from .overlap import (
    SubmapOverlapResult,
    aabb_overlap,
    best_cloud_overlap,
    submap_overlap,
    voxel_filter,
)
from .se3 import PoseSE3, as_points, between
from .uncertainty import GateVerdict, gate_fusion, relative_covariance

log = logging.getLogger(__name__)


class AtlasError(ValueError):
    pass


class StaleProposalError(AtlasError):
    pass


@dataclass
class PoseGraphNode:
    id: int
    timestamp: float
    pose: PoseSE3
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((6, 6)))
    scan_ref: str | None = None


@dataclass(frozen=True)
class LoopClosure:
    head_id: int
    tail_id: int

    def __post_init__(self):
        if self.head_id == self.tail_id:
            raise AtlasError("loop closure endpoints must differ")


class Trigger(str, enum.Enum):
    LOOP_CLOSURE_ENDS = "LoopClosureEnds"
    SUBMAP_OVERLAP = "SubmapOverlap"


@dataclass(eq=False)
class Submap:
    uid: int
    id: int
    root_node_id: int
    root_pose: PoseSE3
    grid: OccupancyGrid
    constituent_clouds: list = field(default_factory=list)  # (N, 3) arrays, submap frame
    member_node_ids: list = field(default_factory=list)
    aabb: AABB | None = None
    revision: int = 0

    def refresh_aabb(self) -> None:
        try:
            self.aabb = compute_aabb(self.grid, self.root_pose)
        except EmptyAABBError:
            self.aabb = None

    def constituents_in_map(self) -> list:
        return [self.root_pose.apply(c) for c in self.constituent_clouds if len(c)]

    def memory_bytes(self) -> int:
        return self.grid.memory_bytes()


@dataclass
class FusionProposal:
    ref_submap_id: int
    read_submap_id: int
    trigger: Trigger
    overlap: SubmapOverlapResult | None = None
    verdict: GateVerdict | None = None
    executed: bool = False
    ref_uid: int = -1
    read_uid: int = -1

    def __post_init__(self):
        if not self.ref_submap_id < self.read_submap_id:
            raise AtlasError("the older (lower id) submap must be the fusion reference")

    @property
    def accepted(self) -> bool | None:
        return None if self.verdict is None else self.verdict.accepted


@dataclass(frozen=True)
class AllocationReport:
    submap_id: int
    spawned: bool
    cloud_overlap: float | None = None
    reason: str = ""


@dataclass(frozen=True)
class Metrics:
    scan_index: int
    submap_count: int
    total_memory_bytes: int
    fusion_events: int
    rejection_events: int


class Atlas:
    def __init__(self, config: AtlasConfig | None = None, event_sink=None):
        self.config = config or AtlasConfig()
        self.submaps: list[Submap] = []
        self.nodes: dict[int, PoseGraphNode] = {}
        self._odometer: dict[int, float] = {}
        self._node_submap: dict[int, Submap] = {}
        self._cross: dict[tuple, np.ndarray] = {}
        self._missing_cross_warned: set = set()
        self._uids = itertools.count()
        self._last_node_id: int | None = None
        self.scan_index = 0
        self.spawn_events = 0
        self.fusion_events = 0
        self.rejection_events = 0
        self.events: list[dict] = []
        self._sink = event_sink

    # -- bookkeeping -------------------------------------------------------

    def _emit(self, kind: str, **data) -> None:
        record = {"event": kind, "scan_index": self.scan_index, **data}
        self.events.append(record)
        if self._sink is not None:
            self._sink(record)

    def submap_of(self, node_id: int) -> Submap:
        try:
            return self._node_submap[node_id]
        except KeyError:
            raise AtlasError(f"unknown node {node_id}") from None

    @property
    def active_submap(self) -> Submap | None:
        if self._last_node_id is None:
            return None
        return self._node_submap[self._last_node_id]

    def _reindex(self) -> None:
        for i, s in enumerate(self.submaps):
            s.id = i

    def set_cross_covariance(self, id_a: int, id_b: int, block) -> None:
        """Store ``E[xi_a xi_b^T]``."""
        block = np.asarray(block, dtype=float).reshape(6, 6)
        if id_a > id_b:
            id_a, id_b, block = id_b, id_a, block.T
        self._cross[(id_a, id_b)] = block

    def cross_covariance(self, id_a: int, id_b: int) -> np.ndarray:
        if id_a == id_b:
            return self.nodes[id_a].covariance
        if (min(id_a, id_b), max(id_a, id_b)) not in self._cross:
            pair = (min(id_a, id_b), max(id_a, id_b))
            if pair not in self._missing_cross_warned:
                self._missing_cross_warned.add(pair)
                log.warning("no cross-covariance for nodes %s and %s; assuming zero", *pair)
            return np.zeros((6, 6))
        if id_a < id_b:
            return self._cross[(id_a, id_b)]
        return self._cross[(id_b, id_a)].T

    # -- ingestion ---------------------------------------------------------

    def _spawn(self, node: PoseGraphNode) -> Submap:
        s = Submap(
            uid=next(self._uids),
            id=len(self.submaps),
            root_node_id=node.id,
            root_pose=node.pose,
            grid=OccupancyGrid(self.config.r_voxel, self.config.log_odds),
            constituent_clouds=[np.zeros((0, 3))],
        )
        self.submaps.append(s)
        self.spawn_events += 1
        return s

    def _spawn_distance(self, node: PoseGraphNode, active: Submap) -> float:
        if self.config.spawn_distance == "euclidean":
            return float(np.linalg.norm(node.pose.translation - active.root_pose.translation))
        return self._odometer[node.id] - self._odometer[active.root_node_id]

    def ingest_node(self, node: PoseGraphNode, scan) -> AllocationReport:
        """Allocate one node (and its sensor-frame scan) to a submap."""
        if node.id in self.nodes:
            raise AtlasError(f"duplicate node id {node.id}")
        if self._last_node_id is not None and node.id < self._last_node_id:
            raise AtlasError(f"node id {node.id} arrives after {self._last_node_id}")
        cfg = self.config
        pts = as_points(scan)
        pts = pts[np.all(np.isfinite(pts), axis=1)]

        active = self.active_submap
        prev = self.nodes.get(self._last_node_id) if self._last_node_id is not None else None
        step = 0.0 if prev is None else float(np.linalg.norm(node.pose.translation - prev.pose.translation))
        self._odometer[node.id] = (self._odometer[prev.id] if prev else 0.0) + step
        self.nodes[node.id] = node
        self.scan_index += 1

        ratio = None
        reason = ""
        if active is None:
            reason = "first"
        elif len(pts) == 0:
            pass
        else:
            if cfg.distance_spawn and self._spawn_distance(node, active) > cfg.d_spawn:
                reason = "distance"
            if cfg.cloud_overlap_spawn:
                refs = active.constituents_in_map()
                ratio = best_cloud_overlap(node.pose.apply(pts), refs, cfg.r_filter).ratio
                if ratio < cfg.lambda_spawn and not reason:
                    reason = "cloud_overlap"

        target = self._spawn(node) if reason else active
        target.member_node_ids.append(node.id)
        self._node_submap[node.id] = target
        self._last_node_id = node.id

        if len(pts):
            sensor = between(target.root_pose, node.pose)
            target.grid.integrate_scan(sensor, pts, cfg.range_min, cfg.range_max)
            in_submap = sensor.apply(pts)
            merged = np.concatenate([target.constituent_clouds[0], in_submap])
            target.constituent_clouds[0] = voxel_filter(merged, cfg.r_filter)
            target.revision += 1
            target.refresh_aabb()

        spawned = bool(reason)
        self._emit("spawn" if spawned else "integrate", node_id=node.id, submap_id=target.id,
                   cloud_overlap=ratio, reason=reason or None, points=int(len(pts)))
        return AllocationReport(target.id, spawned, ratio, reason)

    # -- elastic update ----------------------------------------------------

    def apply_pose_update(self, poses: dict, covariances: dict | None = None,
                          cross: dict | None = None) -> None:
        """Move submap roots to updated node poses; grids stay rigid."""
        covariances = covariances or {}
        cross = cross or {}
        ids = set(poses) | set(covariances) | {i for pair in cross for i in pair}
        unknown = sorted(i for i in ids if i not in self.nodes)
        if unknown:
            raise AtlasError(f"pose update for unknown nodes: {unknown}")
        for nid, pose in poses.items():
            self.nodes[nid].pose = pose
        for nid, cov in covariances.items():
            self.nodes[nid].covariance = np.asarray(cov, dtype=float)
        for (a, b), block in cross.items():
            self.set_cross_covariance(a, b, block)
        for s in self.submaps:
            s.root_pose = self.nodes[s.root_node_id].pose
            s.refresh_aabb()

    # -- fusion ------------------------------------------------------------

    def _gate(self, ref: Submap, read: Submap) -> GateVerdict | None:
        if not self.config.uncertainty_gate:
            return None
        a, b = self.nodes[ref.root_node_id], self.nodes[read.root_node_id]
        cov = relative_covariance(a.pose, a.covariance, b.pose, b.covariance,
                                  self.cross_covariance(a.id, b.id))
        return gate_fusion(cov, self.config.lambda_uncertainty)

    def _propose(self, ref: Submap, read: Submap, trigger: Trigger, overlap=None) -> FusionProposal:
        p = FusionProposal(ref.id, read.id, trigger, overlap, ref_uid=ref.uid, read_uid=read.uid)
        p.verdict = self._gate(ref, read)
        self._emit(
            "proposal",
            ref_submap_id=ref.id, read_submap_id=read.id, trigger=trigger.value,
            ref_root=ref.root_node_id, read_root=read.root_node_id,
            overlap=None if overlap is None else [overlap.ratio_read, overlap.ratio_ref],
            gated=p.verdict is not None,
            accepted=True if p.verdict is None else p.verdict.accepted,
            translation_eigenvalues=None if p.verdict is None else list(p.verdict.translation_eigenvalues),
            threshold=self.config.lambda_uncertainty,
        )
        if p.verdict is not None and not p.verdict.accepted:
            self.rejection_events += 1
            self._emit("rejection", ref_submap_id=ref.id, read_submap_id=read.id,
                       trigger=trigger.value,
                       max_translation_eigenvalue=p.verdict.max_translation_eigenvalue)
        return p

    def _live(self, uid: int) -> Submap | None:
        for s in self.submaps:
            if s.uid == uid:
                return s
        return None

    def execute_fusion(self, proposal: FusionProposal) -> int:
        """Fuse the read submap into the ref submap; returns the fused id."""
        if proposal.verdict is not None and not proposal.verdict.accepted:
            raise AtlasError("cannot execute a rejected proposal")
        if proposal.ref_uid >= 0:
            ref, read = self._live(proposal.ref_uid), self._live(proposal.read_uid)
        else:
            n = len(self.submaps)
            ok = proposal.read_submap_id < n
            ref = self.submaps[proposal.ref_submap_id] if ok else None
            read = self.submaps[proposal.read_submap_id] if ok else None
        if ref is None or read is None:
            raise StaleProposalError("a submap of this proposal has already been fused away")
        if ref.id != proposal.ref_submap_id or read.id != proposal.read_submap_id:
            raise StaleProposalError("submap ids changed since the proposal was made")

        t_ref_read = between(ref.root_pose, read.root_pose)
        mem_before = (ref.memory_bytes(), read.memory_bytes())
        fuse_grids(ref.grid, read.grid, t_ref_read)
        ref.constituent_clouds.extend(t_ref_read.apply(c) for c in read.constituent_clouds if len(c))
        ref.member_node_ids = sorted(set(ref.member_node_ids) | set(read.member_node_ids))
        for nid in read.member_node_ids:
            self._node_submap[nid] = ref
        self.submaps.remove(read)
        self._reindex()
        ref.revision += 1
        ref.refresh_aabb()
        proposal.executed = True
        self.fusion_events += 1
        self._emit(
            "fusion", ref_submap_id=proposal.ref_submap_id, read_submap_id=proposal.read_submap_id,
            fused_id=ref.id, trigger=proposal.trigger.value,
            translation_eigenvalues=None if proposal.verdict is None
            else list(proposal.verdict.translation_eigenvalues),
            threshold=self.config.lambda_uncertainty,
            memory_before=list(mem_before), memory_after=ref.memory_bytes(),
        )
        return ref.id

    def _overlap_candidates(self, scope: set, skip: set, cache: dict) -> list:
        lam = self.config.lambda_fusion
        live = [s for s in self.submaps if s.uid in scope]
        out = []
        for i, ref in enumerate(live):
            for read in live[i + 1:]:
                if (ref.uid, read.uid) in skip or ref.aabb is None or read.aabb is None:
                    continue
                key = (ref.uid, ref.revision, read.uid, read.revision)
                if key not in cache:
                    box = aabb_overlap(read.aabb, ref.aabb)
                    cache[key] = None if box.max_ratio < lam else submap_overlap(read, ref)
                ov = cache[key]
                if ov is not None and ov.max_ratio >= lam:
                    out.append((ov.max_ratio, ref, read, ov))
        out.sort(key=lambda c: (-c[0], c[1].id, c[2].id))
        return out

    def on_loop_closure(self, edge: LoopClosure) -> list[FusionProposal]:
        """Run the fusion pipeline for one loop closure.

        Pose corrections for the closure must already be applied.
        """
        missing = [i for i in (edge.head_id, edge.tail_id) if i not in self.nodes]
        if missing:
            raise AtlasError(f"loop closure references unknown nodes {missing}")
        self._emit("loop_closure", head_id=edge.head_id, tail_id=edge.tail_id,
                   head_submap=self.submap_of(edge.head_id).id,
                   tail_submap=self.submap_of(edge.tail_id).id)
        proposals = []
        skip: set = set()
        a, b = self.submap_of(edge.head_id), self.submap_of(edge.tail_id)
        # the search range is fixed when the closure arrives; fusions only
        # ever shrink it
        lo, hi = sorted((a.id, b.id))
        scope = {s.uid for s in self.submaps[lo:hi + 1]}

        if a is not b:
            ref, read = (a, b) if a.id < b.id else (b, a)
            p = self._propose(ref, read, Trigger.LOOP_CLOSURE_ENDS)
            proposals.append(p)
            if p.accepted is False:
                skip.add((ref.uid, read.uid))
            else:
                self.execute_fusion(p)

        if self.config.overlap_fusion:
            cache: dict = {}
            while True:
                executed = False
                for _, ref, read, ov in self._overlap_candidates(scope, skip, cache):
                    p = self._propose(ref, read, Trigger.SUBMAP_OVERLAP, ov)
                    proposals.append(p)
                    if p.accepted is False:
                        skip.add((ref.uid, read.uid))
                        continue
                    self.execute_fusion(p)
                    executed = True
                    break
                if not executed:
                    break
        return proposals

    # -- reporting ---------------------------------------------------------

    def metrics(self) -> Metrics:
        return Metrics(
            scan_index=self.scan_index,
            submap_count=len(self.submaps),
            total_memory_bytes=sum(s.memory_bytes() for s in self.submaps),
            fusion_events=self.fusion_events,
            rejection_events=self.rejection_events,
        )

    def submap_summaries(self) -> list[dict]:
        return [
            {
                "id": s.id,
                "root_node_id": s.root_node_id,
                "node_count": len(s.member_node_ids),
                "member_node_ids": list(s.member_node_ids),
                "known_voxels": s.grid.known_count,
                "allocated_voxels": s.grid.allocated_count,
                "memory_bytes": s.memory_bytes(),
                "constituent_clouds": len(s.constituent_clouds),
                "aabb": None if s.aabb is None else s.aabb.as_list(),
            }
            for s in self.submaps
        ]
