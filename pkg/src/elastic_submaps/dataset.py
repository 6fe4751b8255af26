"""On-disk pose-graph datasets.

Layout of a dataset directory::

    nodes.jsonl    {"id", "timestamp", "quaternion_wxyz", "translation_xyz", "covariance"}
    cross.jsonl    {"id_a", "id_b", "covariance"}   E[xi_a xi_b^T], optional
    loops.jsonl    {"arrival_index", "head_id", "tail_id"}
    scans/<id>.bin little-endian float32 xyz triplets, sensor frame
    env.json       box-world description (synthetic sets only)

A loop closure with ``arrival_index = k`` is delivered right after the k-th
node (0-based, in file order).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .atlas import LoopClosure, PoseGraphNode
from .se3 import PointCloud, PoseSE3


class DatasetError(ValueError):
    pass


@dataclass
class NodeRecord:
    node: PoseGraphNode
    scan: PointCloud
    loops: list = field(default_factory=list)  # closures arriving right after this node


@dataclass
class Dataset:
    directory: Path
    nodes: list
    loops: list  # (arrival_index, LoopClosure)
    cross: dict
    env: dict | None = None

    def scan(self, node: PoseGraphNode) -> PointCloud:
        path = self.directory / (node.scan_ref or f"scans/{node.id}.bin")
        if not path.exists():
            raise DatasetError(f"scan file for node {node.id} is missing: {path}")
        raw = np.fromfile(path, dtype="<f4")
        if raw.size % 3:
            raise DatasetError(f"scan file for node {node.id} is not a whole number of xyz triplets")
        return PointCloud(raw.reshape(-1, 3).astype(np.float64), frame="sensor")

    def records(self):
        """Nodes in order, each with the closures that arrive right after it."""
        pending: dict = {}
        for k, edge in self.loops:
            pending.setdefault(k, []).append(edge)
        for k, node in enumerate(self.nodes):
            yield NodeRecord(node, self.scan(node), pending.get(k, []))

    def events(self):
        """Flat stream: ``(node, scan)`` tuples interleaved with LoopClosure objects."""
        for rec in self.records():
            yield rec.node, rec.scan
            yield from rec.loops


def _jsonl(path: Path):
    if not path.exists():
        return
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    yield lineno, json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{path.name}:{lineno}: {exc.msg}") from None


def _matrix6(values, where: str) -> np.ndarray:
    m = np.asarray(values, dtype=float)
    if m.size != 36 or not np.all(np.isfinite(m)):
        raise DatasetError(f"{where}: covariance needs 36 finite entries")
    return m.reshape(6, 6)


def load_dataset(directory) -> Dataset:
    root = Path(directory)
    if not root.is_dir():
        raise DatasetError(f"no dataset directory at {root}")
    nodes = []
    for lineno, rec in _jsonl(root / "nodes.jsonl"):
        where = f"nodes.jsonl:{lineno}"
        try:
            nid = int(rec["id"])
            pose = PoseSE3(np.asarray(rec["quaternion_wxyz"], dtype=float),
                           np.asarray(rec["translation_xyz"], dtype=float))
            node = PoseGraphNode(nid, float(rec["timestamp"]), pose,
                                 _matrix6(rec["covariance"], where), rec.get("scan", f"scans/{nid}.bin"))
        except DatasetError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: malformed node record ({exc})") from None
        if nodes and nid <= nodes[-1].id:
            raise DatasetError(f"{where}: node ids must increase (got {nid} after {nodes[-1].id})")
        nodes.append(node)

    ids = {n.id for n in nodes}
    loops = []
    for lineno, rec in _jsonl(root / "loops.jsonl"):
        where = f"loops.jsonl:{lineno}"
        try:
            k, edge = int(rec["arrival_index"]), LoopClosure(int(rec["head_id"]), int(rec["tail_id"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: malformed loop record ({exc})") from None
        if not 0 <= k < len(nodes):
            raise DatasetError(f"{where}: arrival_index {k} outside the node stream")
        arrived = {n.id for n in nodes[:k + 1]}
        if edge.head_id not in arrived or edge.tail_id not in arrived:
            raise DatasetError(f"{where}: closure references a node not yet ingested")
        loops.append((k, edge))
    loops.sort(key=lambda item: item[0])

    cross = {}
    for lineno, rec in _jsonl(root / "cross.jsonl"):
        where = f"cross.jsonl:{lineno}"
        try:
            a, b = int(rec["id_a"]), int(rec["id_b"])
            block = _matrix6(rec["covariance"], where)
        except DatasetError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"{where}: malformed cross-covariance record ({exc})") from None
        if a not in ids or b not in ids:
            raise DatasetError(f"{where}: unknown node id")
        cross[(a, b)] = block

    env = None
    if (root / "env.json").exists():
        try:
            env = json.loads((root / "env.json").read_text())
        except json.JSONDecodeError as exc:
            raise DatasetError(f"env.json: {exc.msg}") from None
    return Dataset(root, nodes, loops, cross, env)


def _floats(a) -> list:
    return [float(v) for v in np.asarray(a).reshape(-1)]


def write_dataset(directory, mission=None, *, nodes=None, scans=None, loops=(), cross=None, env=None) -> Path:
    """Write either a synthetic Mission or explicit parts.

    ``scans`` are sensor-frame arrays matched to ``nodes`` by position.
    """
    if mission is not None:
        nodes, scans, loops, cross = mission.nodes, mission.scans, mission.loops, mission.cross
        env = mission.env.to_json()
    nodes = list(nodes or [])
    scans = list(scans or [])
    if len(scans) != len(nodes):
        raise DatasetError("need exactly one scan per node")
    root = Path(directory)
    (root / "scans").mkdir(parents=True, exist_ok=True)
    with (root / "nodes.jsonl").open("w") as fh:
        for node, scan in zip(nodes, scans):
            ref = f"scans/{node.id}.bin"
            fh.write(json.dumps({
                "id": node.id,
                "timestamp": node.timestamp,
                "quaternion_wxyz": _floats(node.pose.quaternion),
                "translation_xyz": _floats(node.pose.translation),
                "covariance": _floats(node.covariance),
                "scan": ref,
            }) + "\n")
            pts = np.asarray(getattr(scan, "points", scan), dtype="<f4").reshape(-1, 3)
            pts.tofile(root / ref)
    with (root / "loops.jsonl").open("w") as fh:
        for k, edge in loops:
            fh.write(json.dumps({"arrival_index": int(k), "head_id": edge.head_id, "tail_id": edge.tail_id}) + "\n")
    if cross:
        with (root / "cross.jsonl").open("w") as fh:
            for (a, b), block in sorted(cross.items()):
                fh.write(json.dumps({"id_a": a, "id_b": b, "covariance": _floats(block)}) + "\n")
    if env is not None:
        (root / "env.json").write_text(json.dumps(env, indent=1))
    return root
