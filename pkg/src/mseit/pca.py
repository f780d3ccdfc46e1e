"""PCA parameterization of the conductivity, sigma = Phi xi + mean.

The basis is built from random binary realizations (circular spots on a
uniform background).  Columns of Phi are the left singular vectors of the
centered realization matrix scaled by s_k / sqrt(N_r - 1), so each
coefficient has unit sample variance over the ensemble and the columns are
mutually orthogonal in the plain Euclidean inner product.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Mesh

POSITIVITY_FLOOR = 1e-4


@dataclass(frozen=True)
class RealizationParams:
    n_realizations: int = 1000
    min_spots: int = 1
    max_spots: int = 7
    max_radius_fraction: float = 0.3
    sigma_c: float = 0.4
    sigma_h: float = 0.2

    def __post_init__(self):
        if self.n_realizations < 1:
            raise ValueError("need at least one realization")
        if self.min_spots < 1 or self.max_spots < self.min_spots:
            raise ValueError("spot count range must satisfy 1 <= min_spots <= max_spots")
        if not 0 < self.max_radius_fraction <= 1:
            raise ValueError("max_radius_fraction must lie in (0, 1]")
        if self.sigma_c <= 0 or self.sigma_h <= 0:
            raise ValueError("conductivity levels must be positive")


@dataclass
class RealizationEnsemble:
    fields: np.ndarray  # (N_r, N)
    seed: int
    params: RealizationParams

    @property
    def n_realizations(self) -> int:
        return self.fields.shape[0]


def generate_realizations(params: RealizationParams, mesh: Mesh, seed: int) -> RealizationEnsemble:
    """Background sigma_h with 1..7 spots of sigma_c, centers uniform in the disc."""
    rng = np.random.default_rng(seed)
    c = mesh.centroids
    R = mesh.radius
    out = np.full((params.n_realizations, mesh.n_elements), params.sigma_h)
    for row in out:
        n = rng.integers(params.min_spots, params.max_spots + 1)
        # uniform over the disc: sqrt of a uniform radius, uniform angle
        rho = R * np.sqrt(rng.uniform(size=n))
        theta = rng.uniform(0.0, 2 * np.pi, size=n)
        # radii in (0, max]: 1 - U maps [0, 1) onto (0, 1]
        radii = params.max_radius_fraction * R * (1.0 - rng.uniform(size=n))
        for x, y, r in zip(rho * np.cos(theta), rho * np.sin(theta), radii):
            row[np.hypot(c[:, 0] - x, c[:, 1] - y) <= r] = params.sigma_c
    return RealizationEnsemble(out, seed, params)


@dataclass(frozen=True)
class XiVector:
    """Reduced coefficients; entries past ``active_count`` are zero."""

    coefficients: np.ndarray
    active_count: int = None

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float)
        n = len(c) if self.active_count is None else int(self.active_count)
        if not 0 <= n <= len(c):
            raise ValueError(f"active_count {n} outside 0..{len(c)}")
        if np.any(c[n:] != 0):
            raise ValueError("coefficients beyond active_count must be zero")
        c.flags.writeable = False
        object.__setattr__(self, "coefficients", c)
        object.__setattr__(self, "active_count", n)

    @property
    def size(self) -> int:
        return len(self.coefficients)


@dataclass
class PcaBasis:
    """mean (N,), orthonormal directions U (N, N_xi) and scales s (N_xi,).

    Phi = U * s.  ``singular_values`` are those of the centered ensemble
    matrix; ``spectrum`` keeps the full list for energy bookkeeping.
    """

    mean: np.ndarray
    directions: np.ndarray
    singular_values: np.ndarray
    n_realizations: int
    areas: np.ndarray = None
    spectrum: np.ndarray = None
    floor: float = POSITIVITY_FLOOR
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.directions = np.asarray(self.directions, dtype=float).reshape(len(self.mean), -1)
        self.singular_values = np.asarray(self.singular_values, dtype=float)
        if self.directions.shape[1] != len(self.singular_values):
            raise ValueError("one singular value per basis column required")
        if self.areas is None:
            self.areas = np.ones_like(self.mean)
        if self.spectrum is None:
            self.spectrum = self.singular_values.copy()

    @property
    def max_components(self) -> int:
        return len(self.singular_values)

    @property
    def scales(self) -> np.ndarray:
        return self.singular_values / np.sqrt(max(self.n_realizations - 1, 1))

    @property
    def columns(self) -> np.ndarray:
        """Phi, (N, N_xi)."""
        return self.directions * self.scales

    def zero(self, active_count=None) -> XiVector:
        n = self.max_components
        return XiVector(np.zeros(n), n if active_count is None else active_count)


def energy_count(singular_values, energy_fraction: float) -> int:
    """Smallest k whose leading squared singular values reach the energy fraction."""
    if not 0 < energy_fraction <= 1:
        raise ValueError("energy_fraction must lie in (0, 1]")
    e = np.asarray(singular_values, dtype=float) ** 2
    total = e.sum()
    if total == 0:
        return 0
    cum = np.cumsum(e) / total
    # guard against round-off in the last cumulative entry
    return int(min(np.searchsorted(cum, energy_fraction * (1 - 1e-12)) + 1, len(e)))


def build_basis(ensemble, energy_fraction: float = 0.99, areas=None, rank_tol: float = 1e-10) -> PcaBasis:
    """Truncated SVD of the centered realization matrix.

    ``ensemble`` is a RealizationEnsemble or an (N_r, N) array.
    """
    X = np.asarray(getattr(ensemble, "fields", ensemble), dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("ensemble is empty")
    mean = X.mean(axis=0)
    A = (X - mean).T  # (N, N_r)
    U, s, _ = np.linalg.svd(A, full_matrices=False)
    # rank relative to the data scale, so a constant ensemble keeps no direction
    ref = max(s[0] if len(s) else 0.0, np.linalg.norm(X), np.finfo(float).tiny)
    rank = int(np.sum(s > rank_tol * ref))
    s = s[:rank]
    k = energy_count(s, energy_fraction)
    meta = {"energy_fraction": energy_fraction}
    if hasattr(ensemble, "seed"):
        meta["seed"] = int(ensemble.seed)
    return PcaBasis(mean, U[:, :k], s[:k], X.shape[0], areas=areas, spectrum=s, metadata=meta)


def _coeffs(xi, basis: PcaBasis) -> np.ndarray:
    c = np.asarray(getattr(xi, "coefficients", xi), dtype=float)
    if c.shape != (basis.max_components,):
        raise ValueError(f"xi has length {c.shape}, basis has {basis.max_components} components")
    return c


def to_sigma_raw(xi, basis: PcaBasis) -> np.ndarray:
    """Phi xi + mean without the positivity clamp."""
    return basis.directions @ (basis.scales * _coeffs(xi, basis)) + basis.mean


def to_sigma(xi, basis: PcaBasis) -> np.ndarray:
    return np.maximum(to_sigma_raw(xi, basis), basis.floor)


def to_xi(sigma, basis: PcaBasis, active_count=None) -> XiVector:
    """Least-squares coefficients of sigma - mean through the stored decomposition."""
    c = (basis.directions.T @ (np.asarray(sigma, dtype=float) - basis.mean)) / basis.scales
    xi = XiVector(c)
    return xi if active_count is None else truncate(xi, active_count)


def pca_project(sigma, basis: PcaBasis) -> np.ndarray:
    return to_sigma(to_xi(sigma, basis), basis)


def project_gradient(grad, basis: PcaBasis, active_count=None, xi=None) -> np.ndarray:
    """dJ/dxi = Phi^T (area * g) for a gradient density g.

    With ``xi`` given, elements held at the positivity floor contribute
    nothing (the clamp has zero derivative there).  Components past
    ``active_count`` are zeroed.
    """
    w = np.asarray(grad, dtype=float) * basis.areas
    if xi is not None:
        w = np.where(to_sigma_raw(xi, basis) > basis.floor, w, 0.0)
    out = basis.scales * (basis.directions.T @ w)
    if active_count is None and xi is not None:
        active_count = getattr(xi, "active_count", None)
    if active_count is not None:
        out[active_count:] = 0.0
    return out


def truncate(xi, n_t: int) -> XiVector:
    c = np.array(getattr(xi, "coefficients", xi), dtype=float)
    if not 1 <= n_t <= len(c):
        raise ValueError(f"N_t = {n_t} outside 1..{len(c)}")
    c[n_t:] = 0.0
    return XiVector(c, n_t)


def save_basis(basis: PcaBasis, path) -> None:
    """Single .npz container: header JSON, mean, singular values, basis columns."""
    header = {
        "format": "mseit-pca",
        "version": 1,
        "n_elements": len(basis.mean),
        "n_components": basis.max_components,
        "n_realizations": basis.n_realizations,
        "floor": basis.floor,
        "metadata": basis.metadata,
    }
    with Path(path).open("wb") as fh:
        np.savez(
            fh,
            header=np.array(json.dumps(header, sort_keys=True)),
            mean=basis.mean,
            singular_values=basis.singular_values,
            spectrum=basis.spectrum,
            areas=basis.areas,
            directions=np.asfortranarray(basis.directions),
        )


def load_basis(path) -> PcaBasis:
    with np.load(path, allow_pickle=False) as z:
        try:
            header = json.loads(str(z["header"]))
        except KeyError as exc:
            raise ValueError(f"{path}: not a PCA basis file") from exc
        if header.get("format") != "mseit-pca":
            raise ValueError(f"{path}: not a PCA basis file")
        return PcaBasis(
            z["mean"],
            z["directions"],
            z["singular_values"],
            header["n_realizations"],
            areas=z["areas"],
            spectrum=z["spectrum"],
            floor=header["floor"],
            metadata=header["metadata"],
        )
