"""Adjoint fields and the conductivity gradient of the misfit objective.

For one drive, the adjoint psi solves

    int sigma grad(psi).grad(v) + sum_l (1/Z_l) int_{E_l} psi v ds
        = sum_l (d_l/Z_l) int_{E_l} v ds,
    d_l = 2 beta_l [ int_{E_l} (u - U_l)/Z_l ds + I*_l ] = -2 beta_l (I_l - I*_l),

and dJ/dsigma_i = -int_{T_i} grad(psi).grad(u).  This is the exact derivative
of the discrete objective ("consistent" variant).  The "literal" variant keeps
the Robin condition psi + Z_l dpsi/dn = d_l, i.e. the boundary terms carry the
conductivity of the element owning each electrode edge; it is only an
approximation of the discrete derivative and is kept for comparison.
"""

from __future__ import annotations

import numpy as np

from .forward import (
    SystemOperator,
    assemble_system,
    check_conductivity,
    extract_currents,
    local_stiffness,
    p2_space,
)
from .geometry import ElectrodeLayout, Mesh
from .objective import Evaluation, MeasurementSet

VARIANTS = ("consistent", "literal")


def _check_variant(variant):
    if variant not in VARIANTS:
        raise ValueError(f"unknown adjoint variant {variant!r}, expected one of {VARIANTS}")


def adjoint_data(residuals, weights) -> np.ndarray:
    """Per-electrode Robin data d_l = -2 beta_l (I_l - I*_l)."""
    return -2.0 * np.asarray(weights) * np.asarray(residuals)


def adjoint_operator(mesh: Mesh, sigma, layout: ElectrodeLayout, variant="consistent") -> SystemOperator:
    _check_variant(variant)
    if variant == "consistent":
        return assemble_system(mesh, sigma, layout)
    space = p2_space(mesh, layout)
    sigma = check_conductivity(sigma, mesh)
    A = space.stiffness(sigma) + space._boundary_matrix(space.edge_inv_z * sigma[space.edge_triangle])
    return SystemOperator(space, sigma, A.tocsr())


def adjoint_load(data, mesh: Mesh, sigma, layout: ElectrodeLayout, variant="consistent") -> np.ndarray:
    """Right-hand side(s) for Robin data ``data`` of shape (m,) or (J, m)."""
    _check_variant(variant)
    space = p2_space(mesh, layout)
    if variant == "consistent":
        return space.drive_load(data)
    d = np.atleast_2d(data)
    on = space.edge_tag > 0
    tag = space.edge_tag[on] - 1
    scale = np.asarray(sigma)[space.edge_triangle[on]] * space.edge_inv_z[on]
    rhs = np.zeros((space.n, d.shape[0]))
    vals = space.edge_load[on][:, :, None] * (scale[:, None] * d[:, tag].T)[:, None, :]
    np.add.at(rhs, space.edge_nodes[on], vals)
    return rhs if np.ndim(data) == 2 else rhs[:, 0]


def solve_adjoint(mesh, sigma, u_j, drive_j, targets_j, weights_j, layout, variant="consistent", operator=None):
    """Adjoint field(s) for one drive, or for stacks of drives.

    Single drive: ``u_j`` (n,), ``drive_j``/``targets_j``/``weights_j`` (m,).
    Stack: ``u_j`` (n, J) and the rest (J, m); returns (n, J).
    """
    currents = extract_currents(u_j, drive_j, layout, mesh)
    d = adjoint_data(currents - np.asarray(targets_j), weights_j)
    if operator is None:
        operator = adjoint_operator(mesh, sigma, layout, variant)
    return operator.solve(adjoint_load(d, mesh, sigma, layout, variant))


def element_pairing(states, adjoints, mesh: Mesh) -> np.ndarray:
    """Per-element sum over drives of int_{T_i} grad(psi_j).grad(u_j)."""
    states = np.asarray(states)
    adjoints = np.asarray(adjoints)
    if states.shape != adjoints.shape:
        raise ValueError(f"state shape {states.shape} does not match adjoint shape {adjoints.shape}")
    u = states.reshape(len(states), -1)[mesh.p2_nodes]
    p = adjoints.reshape(len(adjoints), -1)[mesh.p2_nodes]
    return np.einsum("taj,tab,tbj->t", p, local_stiffness(mesh), u)


def gradient_sigma(pairs, mesh: Mesh) -> np.ndarray:
    """Gradient density g_i = (dJ/dsigma_i) / area_i from (u_j, psi_j) pairs.

    The density is the L2 representative of the derivative on piecewise
    constant fields: the directional derivative along delta_sigma is
    sum_i g_i delta_sigma_i area_i.
    """
    pairs = list(pairs)
    total = np.zeros(mesh.n_elements)
    for pair in pairs:
        if len(pair) != 2:
            raise ValueError("each pair must be (u_j, psi_j)")
        u, psi = pair
        total -= element_pairing(u, psi, mesh)
    return total / mesh.element_areas


def sigma_gradient(ev: Evaluation, data: MeasurementSet, mesh: Mesh, layout: ElectrodeLayout, variant="consistent"):
    """Gradient density at the conductivity of a cached evaluation.

    Reuses the factored forward operator for the consistent variant.
    """
    _check_variant(variant)
    if len(ev.rows) == 0:
        return np.zeros(mesh.n_elements)
    d = adjoint_data(ev.residuals, data.weights[ev.rows])
    if variant == "consistent":
        op = ev.operator
    else:
        op = adjoint_operator(mesh, ev.sigma, layout, variant)
    psi = op.solve(adjoint_load(d, mesh, ev.sigma, layout, variant))
    return -element_pairing(ev.states, psi, mesh) / mesh.element_areas
