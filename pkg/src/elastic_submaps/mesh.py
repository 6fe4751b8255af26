"""Zero-crossing surface extraction from an occupancy grid, plus PLY I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage.measure import marching_cubes

from .occupancy import OccupancyGrid


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float, submap frame
    faces: np.ndarray  # (F, 3) int

    @classmethod
    def empty(cls) -> TriangleMesh:
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.faces)

    def edges(self) -> np.ndarray:
        """Undirected edges, one row per (triangle, side) incidence."""
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.sort(e, axis=1)

    def edge_use_counts(self) -> np.ndarray:
        if len(self.faces) == 0:
            return np.zeros(0, dtype=np.int64)
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        """Every edge is shared by exactly two triangles."""
        counts = self.edge_use_counts()
        return len(counts) > 0 and bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        n_edges = len(np.unique(self.edges(), axis=0)) if len(self.faces) else 0
        used = np.unique(self.faces) if len(self.faces) else []
        return len(used) - n_edges + len(self.faces)


def _weld(vertices: np.ndarray, faces: np.ndarray, decimals: int = 9):
    rounded = np.round(vertices, decimals)
    uniq, inv = np.unique(rounded, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    faces = inv[faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    used, remap = np.unique(faces, return_inverse=True)
    return uniq[used], remap.reshape(-1, 3)


def extract_mesh(grid: OccupancyGrid) -> TriangleMesh:
    """Marching cubes on the log-odds field at level 0.

    The field is sampled on the lattice of voxel centres; unallocated voxels
    sample as 0, which closes surfaces at known/unknown boundaries.
    """
    if grid.allocated_count == 0 or not np.any(grid.values > 0):
        return TriangleMesh.empty()
    keys = grid.keys()
    lo = keys.min(axis=0) - 1
    hi = keys.max(axis=0) + 1
    shape = tuple(int(s) for s in (hi - lo + 1))
    vol = np.zeros(shape, dtype=np.float64)
    idx = keys - lo
    vol[idx[:, 0], idx[:, 1], idx[:, 2]] = grid.values
    if vol.min() == vol.max():
        return TriangleMesh.empty()
    verts, faces, _, _ = marching_cubes(vol, level=0.0, allow_degenerate=False)
    if len(faces) == 0:
        return TriangleMesh.empty()
    verts = (verts + lo + 0.5) * grid.resolution
    verts, faces = _weld(verts, faces.astype(np.int64))
    return TriangleMesh(verts, faces)


def write_ply(path, mesh: TriangleMesh, comment: str = "") -> None:
    """ASCII PLY: ``vertex`` elements (x y z float) then ``face`` index lists."""
    lines = ["ply", "format ascii 1.0"]
    if comment:
        lines.append(f"comment {comment}")
    lines += [
        f"element vertex {len(mesh.vertices)}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {len(mesh.faces)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    lines += [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> TriangleMesh:
    text = Path(path).read_text().splitlines()
    n_vert = n_face = 0
    i = 0
    while text[i] != "end_header":
        parts = text[i].split()
        if parts[:2] == ["element", "vertex"]:
            n_vert = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_face = int(parts[2])
        i += 1
    body = text[i + 1:]
    verts = np.array([[float(v) for v in line.split()] for line in body[:n_vert]]).reshape(-1, 3)
    faces = np.array([[int(v) for v in line.split()[1:4]] for line in body[n_vert:n_vert + n_face]],
                     dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(verts, faces)
