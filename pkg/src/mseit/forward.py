"""Forward EIT problem with quadratic potentials and piecewise-constant conductivity.

Weak form of the voltage-to-current model: find u with

    int sigma grad(u).grad(v) + sum_l (1/Z_l) int_{E_l} u v ds
        = sum_l (U_l/Z_l) int_{E_l} v ds          for all v,

i.e. div(sigma grad u) = 0, no flux off the electrodes, and the Robin
condition u + Z_l sigma du/dn = U_l on electrode E_l.  Electrode currents are
I_l = int_{E_l} (U_l - u)/Z_l ds.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import ElectrodeLayout, Mesh

# 3-point Gauss-Legendre rule on [0, 1]
GAUSS_S = np.array([0.5 - np.sqrt(15) / 10, 0.5, 0.5 + np.sqrt(15) / 10])
GAUSS_W = np.array([5.0, 8.0, 5.0]) / 18.0

# barycentric coordinates of the edge midpoints (exact for quadratics on a triangle)
_MID_BARY = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
_P2_EDGES = ((0, 1), (1, 2), (2, 0))

RESIDUAL_TOL = 1e-10


class SolverError(RuntimeError):
    """A linear solve did not reach the required residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


def _edge_shape(s):
    """Quadratic 1D shape functions on an edge: start, end, midpoint."""
    s = np.asarray(s)
    return np.stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)], axis=-1)


def barycentric_gradients(mesh: Mesh) -> np.ndarray:
    """(T, 3, 2) gradients of the barycentric coordinates on every triangle."""
    p = mesh.vertices[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    det = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    g = np.empty(p.shape)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        g[:, i, 0] = (y[:, j] - y[:, k]) / det
        g[:, i, 1] = (x[:, k] - x[:, j]) / det
    return g


def p2_gradients(grad_lambda: np.ndarray, bary: np.ndarray) -> np.ndarray:
    """Gradients of the six P2 basis functions at barycentric points.

    Parameters
    ----------
    grad_lambda : (T, 3, 2)
    bary : (Q, 3) barycentric coordinates, or (T, Q, 3) per element.

    Returns
    -------
    (T, Q, 6, 2)
    """
    if bary.ndim == 2:
        bary = np.broadcast_to(bary, (grad_lambda.shape[0],) + bary.shape)
    gl = grad_lambda[:, None, :, :]
    lam = bary[..., None]
    out = np.empty(bary.shape[:2] + (6, 2))
    out[:, :, :3] = (4 * lam - 1) * gl
    for e, (i, j) in enumerate(_P2_EDGES):
        out[:, :, 3 + e] = 4 * (lam[:, :, i] * gl[:, :, j] + lam[:, :, j] * gl[:, :, i])
    return out


@lru_cache(maxsize=16)
def local_stiffness(mesh: Mesh) -> np.ndarray:
    """(T, 6, 6) element matrices of int grad(phi_a).grad(phi_b) for unit sigma.

    Edge-midpoint quadrature is exact for the quadratic integrand.
    """
    g = p2_gradients(barycentric_gradients(mesh), _MID_BARY)
    w = mesh.element_areas[:, None] / 3.0
    return np.einsum("tq,tqad,tqbd->tab", w, g, g)


class P2Space:
    """Mesh-dependent (but conductivity-independent) assembly data."""

    def __init__(self, mesh: Mesh, layout: ElectrodeLayout):
        tags = mesh.boundary_edges[:, 2]
        if tags.max(initial=0) > layout.m:
            raise ValueError(f"mesh has electrode tag {tags.max()} but layout has only {layout.m} electrodes")
        self.mesh = mesh
        self.layout = layout
        self.n = mesh.n_p2_nodes
        self.dofs = mesh.p2_nodes
        self.areas = mesh.element_areas

        self.grad_lambda = barycentric_gradients(mesh)
        self.local_stiffness = local_stiffness(mesh)
        self._rows = np.repeat(self.dofs, 6, axis=1).ravel()
        self._cols = np.tile(self.dofs, (1, 6)).ravel()

        # electrode boundary data
        bnodes = mesh.boundary_p2_nodes
        pts = mesh.vertices
        be = mesh.boundary_edges
        self.edge_length = np.linalg.norm(pts[be[:, 1]] - pts[be[:, 0]], axis=1)
        self.edge_tag = tags
        self.edge_nodes = bnodes
        self.edge_triangle = mesh.boundary_triangles
        N = _edge_shape(GAUSS_S)  # (3 gauss, 3 nodes)
        self.edge_mass = self.edge_length[:, None, None] * np.einsum("q,qa,qb->ab", GAUSS_W, N, N)[None]
        self.edge_load = self.edge_length[:, None] * (GAUSS_W @ N)[None]

        on = tags > 0
        z = layout.impedances
        inv_z = np.zeros(len(tags))
        inv_z[on] = 1.0 / z[tags[on] - 1]
        self.edge_inv_z = inv_z
        self.robin = self._boundary_matrix(inv_z)
        m = layout.m
        rows = np.repeat(tags[on] - 1, 3)
        cols = bnodes[on].ravel()
        self.electrode_load = sp.csr_matrix(
            (self.edge_load[on].ravel(), (rows, cols)), shape=(m, self.n)
        )
        self.electrode_length = np.bincount(tags[on] - 1, weights=self.edge_length[on], minlength=m)

    def _boundary_matrix(self, edge_weight):
        on = edge_weight != 0
        nodes = self.edge_nodes[on]
        r = np.repeat(nodes, 3, axis=1).ravel()
        c = np.tile(nodes, (1, 3)).ravel()
        d = (edge_weight[on, None, None] * self.edge_mass[on]).ravel()
        return sp.csr_matrix((d, (r, c)), shape=(self.n, self.n))

    def stiffness(self, sigma: np.ndarray) -> sp.csr_matrix:
        data = (sigma[:, None, None] * self.local_stiffness).ravel()
        return sp.csr_matrix((data, (self._rows, self._cols)), shape=(self.n, self.n))

    def drive_load(self, drives: np.ndarray) -> np.ndarray:
        """Right-hand sides for drive vectors; ``drives`` is (m,) or (J, m)."""
        d = np.atleast_2d(drives)
        rhs = self.electrode_load.T @ (d / self.layout.impedances).T
        return rhs if np.ndim(drives) == 2 else rhs[:, 0]


@lru_cache(maxsize=16)
def p2_space(mesh: Mesh, layout: ElectrodeLayout) -> P2Space:
    return P2Space(mesh, layout)


def check_conductivity(sigma, mesh: Mesh) -> np.ndarray:
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (mesh.n_elements,):
        raise ValueError(f"conductivity has shape {sigma.shape}, mesh has {mesh.n_elements} elements")
    if not np.all(sigma > 0):
        raise ValueError("conductivity must be strictly positive")
    return sigma


def check_drive(drive, layout: ElectrodeLayout, tol: float = 1e-12) -> np.ndarray:
    drive = np.asarray(drive, dtype=float)
    if drive.shape[-1] != layout.m:
        raise ValueError(f"drive has {drive.shape[-1]} entries, layout has {layout.m} electrodes")
    scale = max(1.0, float(np.abs(drive).max(initial=0.0)))
    if np.any(np.abs(drive.sum(axis=-1)) > tol * scale):
        raise ValueError("drive voltages must sum to zero (ground condition)")
    return drive


class SystemOperator:
    """Assembled forward operator for one conductivity, factored on first use.

    The factorization depends on sigma only, so any number of drives can be
    solved against it.
    """

    def __init__(self, space: P2Space, sigma: np.ndarray, matrix: sp.csr_matrix):
        self.space = space
        self.sigma = sigma
        self.matrix = matrix
        self._lu = None

    @property
    def shape(self):
        return self.matrix.shape

    def factor(self):
        if self._lu is None:
            self._lu = spla.splu(self.matrix.tocsc(), permc_spec="MMD_AT_PLUS_A")
        return self._lu

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        x = self.factor().solve(np.asarray(rhs, dtype=float))
        r = self.matrix @ x - rhs
        denom = np.linalg.norm(rhs, axis=0)
        res = np.linalg.norm(r, axis=0) / np.where(denom > 0, denom, 1.0)
        worst = float(np.max(res, initial=0.0))
        if not np.all(np.isfinite(x)) or worst > RESIDUAL_TOL:
            raise SolverError(f"linear solve failed, relative residual {worst:.3e}", worst)
        return x


def assemble_system(mesh: Mesh, sigma, layout: ElectrodeLayout) -> SystemOperator:
    """Stiffness form int sigma grad u.grad v plus the electrode Robin form."""
    space = p2_space(mesh, layout)
    sigma = check_conductivity(sigma, mesh)
    A = space.stiffness(sigma) + space.robin
    return SystemOperator(space, sigma, A.tocsr())


def solve_forward(mesh: Mesh, sigma, drive, layout: ElectrodeLayout, operator: SystemOperator | None = None):
    """Nodal P2 potential(s) for one drive (m,) or a stack of drives (J, m).

    Returns an (n,) array for a single drive, (n, J) for a stack.
    """
    drive = check_drive(drive, layout)
    if operator is None:
        operator = assemble_system(mesh, sigma, layout)
    rhs = operator.space.drive_load(drive)
    return operator.solve(rhs)


def extract_currents(u, drive, layout: ElectrodeLayout, mesh: Mesh) -> np.ndarray:
    """Electrode currents I_l = int_{E_l} (U_l - u)/Z_l ds.

    ``u`` is (n,) with ``drive`` (m,), or (n, J) with ``drive`` (J, m); the
    result has the shape of ``drive``.
    """
    space = p2_space(mesh, layout)
    drive = np.asarray(drive, dtype=float)
    trace = space.electrode_load @ np.asarray(u)
    if drive.ndim == 2:
        trace = trace.T
    return (drive * space.electrode_length - trace) / layout.impedances


def flux_currents(u, sigma, layout: ElectrodeLayout, mesh: Mesh) -> np.ndarray:
    """Electrode currents from the normal flux, int_{E_l} sigma du/dn ds.

    Independent of the Robin form: uses the gradient of the P2 field in the
    triangle owning each boundary edge.
    """
    space = p2_space(mesh, layout)
    sigma = np.asarray(sigma, dtype=float)
    u = np.asarray(u)
    on = space.edge_tag > 0
    edges = mesh.boundary_edges[on]
    tri = space.edge_triangle[on]
    p = mesh.vertices
    a, b = p[edges[:, 0]], p[edges[:, 1]]
    t = b - a
    length = np.linalg.norm(t, axis=1)
    normal = np.column_stack([t[:, 1], -t[:, 0]]) / length[:, None]  # outward for a ccw boundary
    # barycentric coordinates of the gauss points inside the owning triangle
    tv = mesh.triangles[tri]
    bary = np.zeros((len(tri), len(GAUSS_S), 3))
    for k, s in enumerate(GAUSS_S):
        x = (1 - s) * a + s * b
        bary[:, k] = _barycentric(p[tv], x)
    g = p2_gradients(space.grad_lambda[tri], bary)  # (E, Q, 6, 2)
    u2 = u.reshape(len(u), -1)
    un = u2[mesh.p2_nodes[tri]]  # (E, 6, J)
    dn = np.einsum("eqad,ed,eaj->eqj", g, normal, un)
    edge_flux = (sigma[tri] * length)[:, None] * np.einsum("eqj,q->ej", dn, GAUSS_W)
    out = np.zeros((layout.m, u2.shape[1]))
    np.add.at(out, mesh.boundary_edges[on, 2] - 1, edge_flux)
    return out[:, 0] if u.ndim == 1 else out.T


def _barycentric(tri_pts, x):
    a, b, c = tri_pts[:, 0], tri_pts[:, 1], tri_pts[:, 2]
    v0, v1, v2 = b - a, c - a, x - a
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (v2[:, 0] * v1[:, 1] - v2[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * v2[:, 1] - v0[:, 1] * v2[:, 0]) / det
    return np.column_stack([1 - l1 - l2, l1, l2])
