import numpy as np

from elastic_submaps.mesh import TriangleMesh, extract_mesh, read_ply, write_ply
from elastic_submaps.occupancy import LogOddsParams, OccupancyGrid
from elastic_submaps.se3 import PoseSE3
from elastic_submaps.synth import NoiseModel, ScanPattern, room_network, simulate_scan

P = LogOddsParams()


def _stencil(res=0.5):
    g = OccupancyGrid(res)
    around = np.stack(np.meshgrid(*[np.arange(-1, 2)] * 3, indexing="ij"), -1).reshape(-1, 3)
    g.update(around, P.l_min)
    g.update(np.array([[0, 0, 0]]), P.l_max - P.l_min)
    return g


def test_empty_grid_gives_empty_mesh():
    assert len(extract_mesh(OccupancyGrid(0.1))) == 0
    g = OccupancyGrid(0.1)
    g.update(np.array([[0, 0, 0]]), P.l_min)
    assert len(extract_mesh(g)) == 0


def test_single_occupied_voxel_is_an_octahedron():
    res = 0.5
    mesh = extract_mesh(_stencil(res))
    # one positive sample among negatives: each of the 8 cells around it
    # contributes one corner triangle, cutting the 6 axis edges at the level set
    assert len(mesh.faces) == 8 and len(mesh.vertices) == 6
    assert mesh.euler_characteristic() == 2 and mesh.is_watertight()
    frac = P.l_max / (P.l_max - P.l_min)
    centre = np.full(3, 0.5 * res)
    expected = np.array([centre + s * frac * res * np.eye(3)[a] for a in range(3) for s in (-1, 1)])
    got = mesh.vertices[np.lexsort(mesh.vertices.T[::-1])]
    assert np.allclose(got, expected[np.lexsort(expected.T[::-1])], atol=1e-6)


def test_solid_cube_is_watertight():
    g = OccupancyGrid(0.1)
    outer = np.stack(np.meshgrid(*[np.arange(-1, 11)] * 3, indexing="ij"), -1).reshape(-1, 3)
    g.update(outer, P.l_min)
    inner = outer[np.all((outer >= 0) & (outer < 10), axis=1)]
    g.update(inner, P.l_max - P.l_min)
    mesh = extract_mesh(g)
    assert mesh.is_watertight() and mesh.euler_characteristic() == 2


def test_closed_room_mesh_is_watertight():
    env = room_network({"r": (0.0, 0.0, 4.0, 4.0)}, [], height=2.5)
    pose = PoseSE3.from_rt(np.eye(3), [2.0, 2.0, 1.0])
    scan = simulate_scan(env, pose, ScanPattern(32, 128, vertical_fov_deg=170), NoiseModel(range_std=0.0))
    g = OccupancyGrid(0.2)
    for _ in range(4):
        g.integrate_scan(pose, scan, 0.0)
    mesh = extract_mesh(g)
    assert len(mesh) > 0 and mesh.is_watertight()


def test_ply_round_trip(tmp_path):
    mesh = extract_mesh(_stencil())
    path = tmp_path / "m.ply"
    write_ply(path, mesh, "stencil")
    back = read_ply(path)
    assert np.array_equal(back.faces, mesh.faces)
    assert np.allclose(back.vertices, mesh.vertices, atol=1e-6)


def test_empty_mesh_file_is_header_only(tmp_path):
    path = tmp_path / "e.ply"
    write_ply(path, TriangleMesh.empty())
    text = path.read_text()
    assert text.rstrip().endswith("end_header")
    assert "element vertex 0" in text and "element face 0" in text
    assert len(read_ply(path)) == 0
