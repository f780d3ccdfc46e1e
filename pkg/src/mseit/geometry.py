"""Disc domain with boundary electrodes and its triangulation.

The mesh is a structured polar-ring triangulation: concentric rings of
vertices stitched together with triangles, with the outermost ring snapped so
that every electrode arc starts and ends on a mesh vertex.  Quadratic (P2)
node numbering puts the vertices first, then one node per edge midpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

INSULATED = 0


@dataclass(frozen=True, eq=False)
class ElectrodeLayout:
    """Equispaced electrodes on the boundary of a disc.

    Parameters
    ----------
    m : int
        Number of electrodes.
    half_width : float
        Angular half-width of each electrode arc, in radians.
    impedances : array_like or float
        Contact impedance per electrode (a scalar is broadcast).
    offset : float
        Angle of the centre of electrode 1.
    """

    m: int
    half_width: float
    impedances: np.ndarray = field(default=None)
    offset: float = 0.0

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("need at least one electrode")
        if self.half_width < 0:
            raise ValueError("half_width must be nonnegative")
        # touching arcs are allowed (they tile the circle), overlapping are not
        if 2 * self.half_width > 2 * np.pi / self.m * (1 + 1e-12):
            raise ValueError(
                f"electrode arcs overlap: 2*w={2 * self.half_width:.6g} > 2*pi/m={2 * np.pi / self.m:.6g}"
            )
        z = 0.1 if self.impedances is None else self.impedances
        z = np.broadcast_to(np.asarray(z, dtype=float), (self.m,)).copy()
        if np.any(z <= 0):
            raise ValueError("contact impedances must be positive")
        z.setflags(write=False)
        object.__setattr__(self, "impedances", z)

    def _key(self):
        return (self.m, float(self.half_width), tuple(self.impedances.tolist()), float(self.offset))

    def __eq__(self, other):
        return isinstance(other, ElectrodeLayout) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    @property
    def center_angles(self) -> np.ndarray:
        return self.offset + 2 * np.pi * np.arange(self.m) / self.m

    def arcs(self) -> np.ndarray:
        """(m, 2) array of [start, end] angles of every electrode."""
        c = self.center_angles
        return np.column_stack([c - self.half_width, c + self.half_width])


def coverage_fraction(layout: ElectrodeLayout) -> float:
    """Fraction of the boundary covered by electrodes, m*2w/(2*pi)."""
    return layout.m * 2 * layout.half_width / (2 * np.pi)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Triangulated disc.

    ``boundary_edges`` rows are ``(v0, v1, tag)`` with ``tag`` the 1-based
    electrode index or 0 for an insulated edge; v0 -> v1 runs counterclockwise.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    radius: float

    def __post_init__(self):
        tri = np.asarray(self.triangles, dtype=np.int64)
        v = np.asarray(self.vertices, dtype=float)
        # orient every triangle counterclockwise
        d = _signed_double_area(v, tri)
        flip = d < 0
        if flip.any():
            tri = tri.copy()
            tri[flip] = tri[flip][:, [0, 2, 1]]
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", tri)
        object.__setattr__(self, "boundary_edges", np.asarray(self.boundary_edges, dtype=np.int64))
        edges, tri_edges = _unique_edges(tri)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "_tri_edges", tri_edges)
        for arr in (self.vertices, self.triangles, self.boundary_edges, edges, tri_edges):
            arr.setflags(write=False)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_p2_nodes(self) -> int:
        return len(self.vertices) + len(self.edges)

    @cached_property
    def element_areas(self) -> np.ndarray:
        return 0.5 * np.abs(_signed_double_area(self.vertices, self.triangles))

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def p2_nodes(self) -> np.ndarray:
        """(T, 6) global P2 node indices.

        Local order: vertices 0, 1, 2, then midpoints of edges (0,1), (1,2), (2,0).
        """
        return np.column_stack([self.triangles, self.n_vertices + self._tri_edges])

    @cached_property
    def p2_coordinates(self) -> np.ndarray:
        mid = 0.5 * (self.vertices[self.edges[:, 0]] + self.vertices[self.edges[:, 1]])
        return np.vstack([self.vertices, mid])

    @cached_property
    def boundary_p2_nodes(self) -> np.ndarray:
        """(B, 3) P2 nodes of each boundary edge: start, end, midpoint."""
        be = self.boundary_edges[:, :2]
        key = np.sort(be, axis=1)
        lookup = {tuple(e): i for i, e in enumerate(self.edges)}
        mid = np.array([lookup[tuple(k)] for k in key], dtype=np.int64)
        return np.column_stack([be, self.n_vertices + mid])

    @cached_property
    def boundary_triangles(self) -> np.ndarray:
        """Index of the triangle owning each boundary edge."""
        key = {}
        for t, tri in enumerate(self.triangles):
            for a, b in ((0, 1), (1, 2), (2, 0)):
                key[(min(tri[a], tri[b]), max(tri[a], tri[b]))] = t
        be = self.boundary_edges[:, :2]
        return np.array([key[(min(a, b), max(a, b))] for a, b in be], dtype=np.int64)

    def electrode_edges(self, electrode: int) -> np.ndarray:
        """Rows of ``boundary_edges`` tagged with the 1-based ``electrode``."""
        return np.flatnonzero(self.boundary_edges[:, 2] == electrode)

    def tagged_fraction(self) -> float:
        """Fraction of the polygonal boundary length lying on electrodes."""
        p = self.vertices
        be = self.boundary_edges
        length = np.linalg.norm(p[be[:, 1]] - p[be[:, 0]], axis=1)
        return float(length[be[:, 2] > 0].sum() / length.sum())

    @cached_property
    def vertex_adjacency(self):
        """Sparse element-element matrix, nonzero where elements share a vertex."""
        from scipy import sparse

        T = self.n_elements
        rows = np.repeat(np.arange(T), 3)
        inc = sparse.csr_matrix(
            (np.ones(3 * T), (rows, self.triangles.ravel())), shape=(T, self.n_vertices)
        )
        return (inc @ inc.T).tocsr()


def _signed_double_area(v, tri):
    a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    return (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])


def _unique_edges(tri):
    local = np.array([[0, 1], [1, 2], [2, 0]])
    all_edges = np.sort(tri[:, local], axis=2).reshape(-1, 2)
    edges, inverse = np.unique(all_edges, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def _boundary_angles(layout: ElectrodeLayout, spacing: float):
    """Angles of boundary vertices and the tag of the edge starting at each.

    Raises if some electrode arc would get fewer than two edges.
    """
    angles, tags = [], []
    arcs = layout.arcs()
    for ell in range(layout.m):
        start, end = arcs[ell]
        nxt = arcs[(ell + 1) % layout.m][0] + (2 * np.pi if ell == layout.m - 1 else 0.0)
        n_el = int(round((end - start) / spacing))
        if n_el < 2:
            raise ValueError(
                f"mesh too coarse to resolve electrode arcs: electrode {ell + 1} gets {n_el} edge(s), need >= 2"
            )
        angles.extend(start + (end - start) * np.arange(n_el) / n_el)
        tags.extend([ell + 1] * n_el)
        gap = nxt - end
        if gap > 1e-12:
            n_gap = max(1, int(round(gap / spacing)))
            angles.extend(end + gap * np.arange(n_gap) / n_gap)
            tags.extend([INSULATED] * n_gap)
    return np.asarray(angles), np.asarray(tags, dtype=np.int64)


def _ring_counts(n_rings: int) -> list[int]:
    return [max(6, int(round(2 * np.pi * k))) for k in range(1, n_rings + 1)]


def _element_count(counts) -> int:
    return counts[0] + sum(a + b for a, b in zip(counts[:-1], counts[1:]))


def _stitch(inner_idx, inner_ang, outer_idx, outer_ang):
    """Triangulate the annulus between two closed rings of vertices."""
    na, nb = len(inner_idx), len(outer_idx)
    two_pi = 2 * np.pi
    a = np.mod(inner_ang, two_pi)
    b = np.mod(outer_ang, two_pi)
    ia = np.argsort(a)
    ib = np.argsort(b)
    a, inner_idx = a[ia], np.asarray(inner_idx)[ia]
    b, outer_idx = b[ib], np.asarray(outer_idx)[ib]
    # start the outer walk at the vertex angularly closest to the first inner one
    j0 = int(np.argmin(np.abs(np.angle(np.exp(1j * (b - a[0]))))))
    b = np.roll(b, -j0)
    outer_idx = np.roll(outer_idx, -j0)
    b = np.unwrap(b)
    a = np.unwrap(a)
    b = b - two_pi * np.round((b[0] - a[0]) / two_pi)
    a_ext = np.append(a, a[0] + two_pi)
    b_ext = np.append(b, b[0] + two_pi)
    tris = []
    i = j = 0
    while i < na or j < nb:
        if i < na and (j == nb or a_ext[i + 1] <= b_ext[j + 1]):
            tris.append((inner_idx[i], inner_idx[(i + 1) % na], outer_idx[j % nb]))
            i += 1
        else:
            tris.append((inner_idx[i % na], outer_idx[(j + 1) % nb], outer_idx[j]))
            j += 1
    return tris


def build_disc_mesh(radius: float, target_element_count: int, layout: ElectrodeLayout) -> Mesh:
    """Triangulate a disc of ``radius`` with about ``target_element_count`` triangles.

    Rings are uniformly spaced in radius; ring k carries about 2*pi*k
    vertices.  The outer ring is built arc by arc so that electrode endpoints
    are mesh vertices.  The output is deterministic.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if target_element_count < 8:
        raise ValueError("target_element_count must be >= 8")
    if layout.half_width <= 0:
        raise ValueError("electrodes need a positive half-width to be meshed")

    best = None
    for n_rings in range(1, int(np.sqrt(target_element_count)) + 3):
        counts = _ring_counts(n_rings)
        err = abs(_element_count(counts) - target_element_count)
        if best is None or err < best[0]:
            best = (err, n_rings)
    n_rings = best[1]
    counts = _ring_counts(n_rings)

    b_ang, b_tags = _boundary_angles(layout, 2 * np.pi / counts[-1])
    counts[-1] = len(b_ang)

    verts = [np.zeros((1, 2))]
    ring_idx, ring_ang = [np.array([0])], [np.array([0.0])]
    start = 1
    for k, n in enumerate(counts, start=1):
        if k == n_rings:
            ang = b_ang
        else:
            ang = layout.offset + 2 * np.pi * (np.arange(n) + 0.5 * (k % 2)) / n
        r = radius * k / n_rings
        verts.append(np.column_stack([r * np.cos(ang), r * np.sin(ang)]))
        ring_idx.append(np.arange(start, start + n))
        ring_ang.append(ang)
        start += n
    vertices = np.vstack(verts)

    tris = [(0, ring_idx[1][i], ring_idx[1][(i + 1) % counts[0]]) for i in range(counts[0])]
    for k in range(1, n_rings):
        tris.extend(_stitch(ring_idx[k], ring_ang[k], ring_idx[k + 1], ring_ang[k + 1]))

    bidx = ring_idx[-1]
    boundary = np.column_stack([bidx, np.roll(bidx, -1), b_tags])
    return Mesh(vertices, np.asarray(tris), boundary, radius)


def save_mesh(mesh: Mesh, path) -> None:
    """Write the plain-text mesh format.

    Header ``V T B`` then V coordinate rows, T triangle rows and B
    ``v0 v1 tag`` boundary rows.
    """
    path = Path(path)
    with path.open("w") as fh:
        fh.write(f"{mesh.n_vertices} {mesh.n_elements} {len(mesh.boundary_edges)} {mesh.radius!r}\n")
        np.savetxt(fh, mesh.vertices, fmt="%.17g")
        np.savetxt(fh, mesh.triangles, fmt="%d")
        np.savetxt(fh, mesh.boundary_edges, fmt="%d")


def load_mesh(path) -> Mesh:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().split()
        if len(header) < 3:
            raise ValueError(f"{path}: malformed mesh header")
        nv, nt, nb = (int(x) for x in header[:3])
        radius = float(header[3]) if len(header) > 3 else None
        rows = fh.read().split("\n")
    rows = [r for r in rows if r.strip()]
    if len(rows) != nv + nt + nb:
        raise ValueError(f"{path}: expected {nv + nt + nb} rows, found {len(rows)}")
    v = np.array([r.split() for r in rows[:nv]], dtype=float)
    t = np.array([r.split() for r in rows[nv : nv + nt]], dtype=np.int64)
    b = np.array([r.split() for r in rows[nv + nt :]], dtype=np.int64)
    if radius is None:
        radius = float(np.linalg.norm(v, axis=1).max())
    return Mesh(v, t, b, radius)
