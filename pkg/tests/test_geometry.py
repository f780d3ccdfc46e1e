import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.sparse.csgraph import connected_components
import scipy.sparse as sp

from mseit.geometry import ElectrodeLayout, build_disc_mesh, coverage_fraction, load_mesh, save_mesh


def test_coverage_examples():
    assert coverage_fraction(ElectrodeLayout(16, 0.12)) == pytest.approx(16 * 2 * 0.12 / (2 * np.pi))
    assert coverage_fraction(ElectrodeLayout(16, 0.12)) == pytest.approx(0.6111, abs=1e-4)
    assert coverage_fraction(ElectrodeLayout(16, 0.0)) == 0.0
    assert coverage_fraction(ElectrodeLayout(4, np.pi / 4)) == pytest.approx(1.0)
    assert coverage_fraction(ElectrodeLayout(1, np.pi * 0.999)) == pytest.approx(0.999)


@given(st.integers(1, 32), st.floats(0.0, 1.0))
def test_coverage_formula(m, frac):
    w = frac * np.pi / m
    assert coverage_fraction(ElectrodeLayout(m, w)) == pytest.approx(m * w / np.pi)


def test_layout_validation():
    with pytest.raises(ValueError):
        ElectrodeLayout(16, 0.3)  # overlapping arcs
    with pytest.raises(ValueError):
        ElectrodeLayout(0, 0.1)
    with pytest.raises(ValueError):
        ElectrodeLayout(4, 0.1, impedances=[0.1, 0.1, 0.0, 0.1])


def test_fine_mesh_counts_and_area(fine_mesh):
    assert 6567 <= fine_mesh.n_elements <= 8885
    assert fine_mesh.element_areas.sum() == pytest.approx(np.pi * 0.01, rel=0.02)
    assert np.all(fine_mesh.element_areas > 0)


def test_tagged_fraction(small_mesh, fine_mesh, layout):
    # chords are slightly shorter than arcs, but the fraction tracks the coverage
    for mesh in (small_mesh, fine_mesh):
        assert mesh.tagged_fraction() == pytest.approx(coverage_fraction(layout), abs=5e-3)


def test_electrode_endpoints_are_vertices(small_mesh, layout):
    ang = np.arctan2(small_mesh.vertices[:, 1], small_mesh.vertices[:, 0])
    on_circle = np.isclose(np.hypot(*small_mesh.vertices.T), 0.1)
    for start, end in layout.arcs():
        for a in (start, end):
            d = np.abs(np.angle(np.exp(1j * (ang[on_circle] - a))))
            assert d.min() < 1e-12


def test_each_electrode_is_one_arc(small_mesh, layout):
    be = small_mesh.boundary_edges
    for ell in range(1, layout.m + 1):
        e = be[be[:, 2] == ell]
        assert len(e) >= 2
        nodes, inv = np.unique(e[:, :2], return_inverse=True)
        inv = inv.reshape(-1, 2)
        A = sp.coo_matrix((np.ones(len(e)), (inv[:, 0], inv[:, 1])), shape=(len(nodes),) * 2)
        n, _ = connected_components(A, directed=False)
        assert n == 1


def test_triangles_counterclockwise(small_mesh):
    v, t = small_mesh.vertices, small_mesh.triangles
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    assert np.all(cross > 0)


def test_boundary_is_closed_and_ccw(small_mesh):
    be = small_mesh.boundary_edges
    assert np.array_equal(np.sort(be[:, 0]), np.sort(be[:, 1]))
    v = small_mesh.vertices
    # shoelace over the boundary loop is positive for a ccw orientation
    area = 0.5 * np.sum(v[be[:, 0], 0] * v[be[:, 1], 1] - v[be[:, 1], 0] * v[be[:, 0], 1])
    assert area == pytest.approx(small_mesh.element_areas.sum())


def test_refinement_monotone(layout):
    counts = [build_disc_mesh(0.1, t, layout).n_elements for t in (500, 1000, 2000, 4000)]
    assert counts == sorted(counts)


def test_deterministic(layout):
    a = build_disc_mesh(0.1, 712, layout)
    b = build_disc_mesh(0.1, 712, layout)
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.triangles, b.triangles)


def test_too_coarse_rejected(layout):
    with pytest.raises(ValueError, match="too coarse"):
        build_disc_mesh(0.1, 10, layout)


def test_save_load_roundtrip(small_mesh, tmp_path):
    path = tmp_path / "m.txt"
    save_mesh(small_mesh, path)
    m = load_mesh(path)
    assert np.array_equal(m.vertices, small_mesh.vertices)
    assert np.array_equal(m.triangles, small_mesh.triangles)
    assert np.array_equal(m.boundary_edges, small_mesh.boundary_edges)
    assert m.radius == small_mesh.radius


def test_load_rejects_truncated(small_mesh, tmp_path):
    path = tmp_path / "m.txt"
    save_mesh(small_mesh, path)
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-5]) + "\n")
    with pytest.raises(ValueError):
        load_mesh(path)


def test_vertex_adjacency(small_mesh):
    A = small_mesh.vertex_adjacency
    assert (A != A.T).nnz == 0
    # a triangle touches itself and its edge neighbours
    t = small_mesh.triangles
    i = 0
    shared = [j for j in range(len(t)) if len(set(t[i]) & set(t[j])) > 0]
    assert set(A[i].indices) == set(shared)
