import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mseit.adjoint import sigma_gradient
from mseit.diagnostics import kappa_cheap
from mseit.objective import REFERENCE_DRIVE, evaluate
from mseit.pca import (
    PcaBasis,
    RealizationParams,
    XiVector,
    build_basis,
    energy_count,
    generate_realizations,
    load_basis,
    pca_project,
    project_gradient,
    save_basis,
    to_sigma,
    to_sigma_raw,
    to_xi,
    truncate,
)
from mseit.phantoms import THREE_SPOTS, make_circles_phantom, simulate_data


@pytest.fixture(scope="module")
def ensemble(small_mesh):
    return generate_realizations(RealizationParams(n_realizations=300), small_mesh, seed=7)


@pytest.fixture(scope="module")
def basis(ensemble, small_mesh):
    return build_basis(ensemble, 0.99, areas=small_mesh.element_areas)


def test_realizations_deterministic(ensemble, small_mesh):
    again = generate_realizations(RealizationParams(n_realizations=300), small_mesh, seed=7)
    np.testing.assert_array_equal(again.fields, ensemble.fields)
    other = generate_realizations(RealizationParams(n_realizations=300), small_mesh, seed=8)
    assert not np.array_equal(other.fields, ensemble.fields)


def test_realization_values(ensemble):
    assert set(np.unique(ensemble.fields)) == {0.2, 0.4}
    # every realization has at least one spot, though tiny ones may miss all centroids
    assert np.mean(np.any(ensemble.fields == 0.4, axis=1)) > 0.9


def test_realization_params_validation():
    with pytest.raises(ValueError):
        RealizationParams(min_spots=0)
    with pytest.raises(ValueError):
        RealizationParams(n_realizations=0)


def test_energy_count():
    s = np.array([3.0, 2.0, 1.0])
    assert energy_count(s, 1.0) == 3
    assert energy_count(s, 9 / 14) == 1
    assert energy_count(s, 0.65) == 2
    with pytest.raises(ValueError):
        energy_count(s, 0.0)


def test_full_energy_gives_rank(small_mesh):
    X = generate_realizations(RealizationParams(n_realizations=20), small_mesh, seed=1).fields
    b = build_basis(X, 1.0)
    assert b.max_components == np.linalg.matrix_rank(X - X.mean(axis=0))


def test_identical_fields_give_mean_only(small_mesh):
    X = np.full((10, small_mesh.n_elements), 0.3)
    b = build_basis(X, 0.99)
    assert b.max_components == 0
    np.testing.assert_allclose(to_sigma(b.zero(), b), 0.3, rtol=1e-15)


def test_basis_orthonormal_and_ordered(basis):
    U = basis.directions
    np.testing.assert_allclose(U.T @ U, np.eye(U.shape[1]), atol=1e-10)
    assert np.all(np.diff(basis.singular_values) <= 0)
    assert basis.max_components == energy_count(basis.spectrum, 0.99)


def test_roundtrip_and_idempotence(basis):
    rng = np.random.default_rng(0)
    xi = XiVector(0.1 * rng.standard_normal(basis.max_components))
    sigma = to_sigma_raw(xi, basis)
    assert sigma.min() > basis.floor
    np.testing.assert_allclose(to_xi(sigma, basis).coefficients, xi.coefficients, atol=1e-10)
    field = rng.uniform(0.1, 0.5, len(basis.mean))
    once = pca_project(field, basis)
    np.testing.assert_allclose(pca_project(once, basis), once, atol=1e-10)


def test_positivity_floor(basis):
    xi = XiVector(np.full(basis.max_components, -1e3))
    assert to_sigma(xi, basis).min() >= basis.floor
    assert to_sigma_raw(xi, basis).min() < basis.floor


@given(st.integers(1, 50), st.integers(1, 50))
def test_truncation_nests(basis, a, b):
    xi = XiVector(np.arange(1.0, basis.max_components + 1))
    lo, hi = min(a, b), max(a, b)
    np.testing.assert_array_equal(truncate(truncate(xi, hi), lo).coefficients, truncate(xi, lo).coefficients)
    assert truncate(xi, lo).active_count == lo


def test_truncation_range(basis):
    with pytest.raises(ValueError):
        truncate(basis.zero(), 0)
    with pytest.raises(ValueError):
        XiVector(np.ones(3), 1)


def test_gradient_chain_rule(basis):
    # for J = sum g sigma area, dJ/dxi . dxi equals the directional derivative in sigma
    rng = np.random.default_rng(2)
    g = rng.standard_normal(len(basis.mean))
    dxi = rng.standard_normal(basis.max_components)
    lhs = project_gradient(g, basis) @ dxi
    rhs = np.sum(g * basis.areas * (basis.columns @ dxi))
    assert lhs == pytest.approx(rhs, rel=1e-10)
    cut = project_gradient(g, basis, active_count=5)
    assert not np.any(cut[5:])


def test_xi_space_kappa(basis, small_mesh, layout):
    truth = make_circles_phantom(THREE_SPOTS, small_mesh)
    data = simulate_data(truth, small_mesh, layout, REFERENCE_DRIVE)
    xi0 = to_xi(np.full(small_mesh.n_elements, 0.3), basis)

    def J(c):
        return evaluate(to_sigma(c, basis), data, small_mesh, layout).J

    def G(c):
        xi = XiVector(c)
        ev = evaluate(to_sigma(xi, basis), data, small_mesh, layout)
        return project_gradient(sigma_gradient(ev, data, small_mesh, layout), basis, xi=xi)

    rep = kappa_cheap(J, G, xi0.coefficients)
    assert rep.plateau_min() <= 1e-2
    assert rep.plateau_decades(1e-2) >= 3.0


def test_basis_file_roundtrip(basis, tmp_path):
    save_basis(basis, tmp_path / "b.npz")
    back = load_basis(tmp_path / "b.npz")
    for name in ("mean", "directions", "singular_values", "spectrum", "areas"):
        np.testing.assert_array_equal(getattr(back, name), getattr(basis, name))
    assert back.n_realizations == basis.n_realizations
    np.savez(tmp_path / "bad.npz", x=np.ones(2))
    with pytest.raises(ValueError):
        load_basis(tmp_path / "bad.npz")
    assert isinstance(back, PcaBasis)
