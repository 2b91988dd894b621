from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hphdg.mesh import (BOUNDARY, INTERIOR, Mesh, MeshError, NacaCurve, load_mesh, naca0012_modified, naca_ogrid,
                        refine, square_mesh, write_native)

DATA = Path(__file__).parent / "data"
MESHES = Path(__file__).parent.parent / "meshes"


def check_invariants(mesh):
    T = mesh.n_elements
    assert np.all(mesh.element_areas() > 0)
    ie = mesh.interior_edges
    assert np.all(ie[:, 2] != ie[:, 3])
    # each interior edge appears exactly twice in the element view, boundary edges once
    kinds = mesh.face_kind.ravel()
    idx = mesh.face_index.ravel()
    counts = np.bincount(idx[kinds == INTERIOR], minlength=len(ie))
    assert np.all(counts == 2)
    bcounts = np.bincount(idx[kinds == BOUNDARY], minlength=mesh.n_boundary_edges)
    assert np.all(bcounts == 1)
    n = mesh.outward_normals()
    assert np.allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-12)
    # straight interior edges: the two outward normals are antiparallel
    for v0, v1, km, kp, fm, fp in ie:
        assert np.allclose(n[km, fm], -n[kp, fp], atol=1e-12)
    # planar triangulation with holes: V - E + F = 2 - holes (F counts the outer face)
    E = mesh.n_interior_edges + mesh.n_boundary_edges
    assert mesh.n_vertices - E + T + 1 == 2 - (mesh.boundary_loops() - 1)


def test_single_triangle_file():
    mesh = load_mesh(DATA / "single.mesh")
    assert mesh.n_elements == 1
    assert mesh.n_interior_edges == 0
    assert mesh.n_boundary_edges == 3
    check_invariants(mesh)


def test_gmsh_two_triangles():
    mesh = load_mesh(DATA / "two_triangles.msh")
    assert mesh.n_elements == 2
    assert mesh.n_interior_edges == 1
    assert mesh.n_boundary_edges == 4
    assert set(mesh.boundary_tags) == {"farfield"}
    check_invariants(mesh)


def test_native_roundtrip(tmp_path):
    mesh = square_mesh(3)
    write_native(mesh, tmp_path / "sq.mesh")
    again = load_mesh(tmp_path / "sq.mesh")
    assert np.array_equal(again.elements, mesh.elements)
    assert np.allclose(again.vertices, mesh.vertices)
    assert again.boundary_tags == mesh.boundary_tags


@pytest.mark.parametrize("text, fragment", [
    ("ntri-mesh 2\n", "line 1"),
    ("ntri-mesh 1\nvertices 1\n0 zero\n", "line 3"),
    ("ntri-mesh 1\nvertices 4\n0 0\n1 0\n1 1\n0 1\ntriangles 1\n0 1 2 3\n", "line 8"),
])
def test_native_parse_errors_carry_line(tmp_path, text, fragment):
    f = tmp_path / "bad.mesh"
    f.write_text(text)
    with pytest.raises(MeshError, match=fragment):
        load_mesh(f)


def test_gmsh_rejects_quads(tmp_path):
    text = (DATA / "two_triangles.msh").read_text().replace("5 2 2 2 1 1 2 3", "5 3 2 2 1 1 2 3 4")
    f = tmp_path / "quad.msh"
    f.write_text(text)
    with pytest.raises(MeshError, match="not a triangle"):
        load_mesh(f)


def test_rejects_hanging_node():
    verts = [(0, 0), (1, 0), (0, 1), (0.5, 0), (1, 1)]
    # element 1 touches the half edge of element 0 only through a hanging vertex
    tris = [(0, 1, 2), (3, 1, 4)]
    with pytest.raises(MeshError):
        Mesh.from_arrays(verts, tris, [(0, 1, "farfield"), (1, 2, "farfield"), (2, 0, "farfield")])


def test_provided_airfoil_mesh():
    mesh = load_mesh(MESHES / "naca0012_o40x12.mesh")
    assert mesh.n_elements == 960 <= 1000
    curved = mesh.with_curves({"slip-wall": NacaCurve()})
    assert int(np.sum(curved.geo_degree > 1)) == 40
    check_invariants(mesh)


def test_naca_profile_values():
    assert naca0012_modified(0.0) == 0.0
    assert naca0012_modified(1.0) == pytest.approx(0.0, abs=1e-15)
    x = 0.25
    expected = 0.6 * (0.2969 * 0.5 - 0.1260 * x - 0.3516 * x**2 + 0.2843 * x**3 - 0.1036 * x**4)
    assert naca0012_modified(x) == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ValueError):
        naca0012_modified(1.1)


def test_ogrid_wall_points_on_profile():
    mesh = naca_ogrid(24, 6)
    check_invariants(mesh)
    wall = [k for k, t in enumerate(mesh.boundary_tags) if t == "slip-wall"]
    for k in wall:
        for v in mesh.boundary_edges[k, :2]:
            x, y = mesh.vertices[v]
            assert abs(abs(y) - naca0012_modified(min(max(x, 0.0), 1.0))) < 1e-12


def test_too_coarse_ogrid_is_rejected():
    with pytest.raises(MeshError, match="Jacobian"):
        naca_ogrid(16, 4)


def test_refine_empty_is_identity():
    mesh = square_mesh(2)
    new, tr = refine(mesh, [])
    assert new is mesh
    assert all(tr[k] == [k] for k in range(mesh.n_elements))


def test_refine_single_element_of_patch():
    # 4-element patch: a centre triangle surrounded by three neighbours
    verts = [(0, 0), (1, 0), (0.5, 0.9), (0.5, -0.8), (1.3, 0.8), (-0.3, 0.8)]
    tris = [(0, 1, 2), (0, 3, 1), (1, 4, 2), (0, 2, 5)]
    bnd = [(0, 3, "farfield"), (3, 1, "farfield"), (1, 4, "farfield"), (4, 2, "farfield"),
           (2, 5, "farfield"), (5, 0, "farfield")]
    mesh = Mesh.from_arrays(verts, tris, bnd)
    new, tr = refine(mesh, [0])
    assert len(tr[0]) == 4
    for k in (1, 2, 3):
        assert len(tr[k]) == 2
    assert new.n_elements == 4 + 3 * 2
    assert tr.n_red == 1 and tr.n_green == 3
    check_invariants(new)


def test_uniform_refinement_quadruples():
    mesh = square_mesh(3)
    new, tr = refine(mesh, range(mesh.n_elements))
    assert new.n_elements == 4 * mesh.n_elements
    assert tr.n_green == 0
    assert np.isclose(new.element_areas().sum(), mesh.element_areas().sum(), atol=1e-12)


@given(seed=st.integers(0, 10_000), rounds=st.integers(1, 3))
@settings(max_examples=15, deadline=None)
def test_random_refinement_keeps_invariants(seed, rounds):
    rng = np.random.default_rng(seed)
    mesh = square_mesh(2, jitter=0.2, rng=seed)
    for _ in range(rounds):
        marked = rng.choice(mesh.n_elements, size=max(1, mesh.n_elements // 4), replace=False)
        new, tr = refine(mesh, marked)
        check_invariants(new)
        # transfer table is total and children cover exactly the parent area
        assert sorted(tr.children) == list(range(mesh.n_elements))
        areas_new = new.element_areas()
        for old, kids in tr.children.items():
            if len(kids) > 0 and all(len(o) == 1 for o in (tr.origins(new.n_elements)[j] for j in kids)):
                assert np.isclose(areas_new[kids].sum(), mesh.element_areas()[old], atol=1e-12)
        if tr.n_ungreened == 0:
            assert new.n_elements == 4 * tr.n_red + 2 * tr.n_green + tr.n_untouched
        mesh = new


def test_refinement_projects_onto_curve():
    mesh = naca_ogrid(24, 6)
    wall = [mesh.boundary_edges[k, 2] for k, t in enumerate(mesh.boundary_tags) if t == "slip-wall"]
    new, _ = refine(mesh, wall)
    for k, t in enumerate(new.boundary_tags):
        if t != "slip-wall":
            continue
        for v in new.boundary_edges[k, :2]:
            x, y = new.vertices[v]
            assert abs(abs(y) - naca0012_modified(min(max(x, 0.0), 1.0))) < 1e-12
    check_invariants(new)
