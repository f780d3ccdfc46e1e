"""Rotation-scheme measurement data and the data-misfit objective.

J(sigma) = sum_j sum_l beta^j_l [ I^j_l(sigma) - I*^j_l ]^2 where I^j are the
Robin-form electrode currents for the j-th rotated drive.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .forward import SystemOperator, assemble_system, check_drive, p2_space
from .geometry import ElectrodeLayout, Mesh

# drive pattern applied to the 16 electrodes in the reference experiments
REFERENCE_DRIVE = np.array([-3, 1, 2, -5, 4, -1, -3, 2, 4, 3, -3, 3, 2, -4, 1, -3], dtype=float)


def rotate_drive(base, j: int) -> np.ndarray:
    """The j-th drive of the rotation scheme (1-based).

    Rotation is to the right: U^2 = (U_m, U_1, ..., U_{m-1}), matching the
    published pair of patterns U^1, U^2.  Applying it m times is the identity.
    """
    base = np.asarray(base, dtype=float)
    m = base.shape[-1]
    if not 1 <= j <= m:
        raise ValueError(f"rotation index {j} outside 1..{m}")
    return np.roll(base, j - 1, axis=-1)


@dataclass
class MeasurementSet:
    """Targets I*^j_l and weights beta^j_l for K base patterns x R rotations.

    Row ``k*R + (j-1)`` holds the j-th rotation of base pattern k.
    """

    base_drives: np.ndarray
    targets: np.ndarray
    weights: np.ndarray = None
    num_rotations: int = None

    def __post_init__(self):
        self.base_drives = np.atleast_2d(np.asarray(self.base_drives, dtype=float))
        K, m = self.base_drives.shape
        if self.num_rotations is None:
            self.num_rotations = m
        if not 1 <= self.num_rotations <= m:
            raise ValueError("num_rotations must lie in 1..m")
        self.targets = np.asarray(self.targets, dtype=float)
        rows = K * self.num_rotations
        if self.targets.shape != (rows, m):
            raise ValueError(f"targets must have shape {(rows, m)}, got {self.targets.shape}")
        if self.weights is None:
            self.weights = np.ones_like(self.targets)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.shape != self.targets.shape:
            raise ValueError("weights and targets differ in shape")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")

    @property
    def K(self) -> int:
        return self.base_drives.shape[0]

    @property
    def m(self) -> int:
        return self.base_drives.shape[1]

    @property
    def drives(self) -> np.ndarray:
        return np.array(
            [rotate_drive(b, j) for b in self.base_drives for j in range(1, self.num_rotations + 1)]
        )

    def with_weights(self, weights) -> "MeasurementSet":
        return replace(self, weights=np.asarray(weights, dtype=float))

    def first_rotation_only(self) -> "MeasurementSet":
        """Same data with beta = 0 for every drive but U^1 of each base pattern."""
        w = np.zeros_like(self.weights)
        w[:: self.num_rotations] = self.weights[:: self.num_rotations]
        return self.with_weights(w)

    def active_rows(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.weights > 0, axis=1))


@dataclass
class Evaluation:
    """Objective value with the forward states that produced it.

    ``states`` is (n_nodes, len(rows)); ``currents``/``residuals`` are
    (len(rows), m) for the drive rows in ``rows``.
    """

    J: float
    sigma: np.ndarray
    rows: np.ndarray
    drives: np.ndarray
    states: np.ndarray
    currents: np.ndarray
    residuals: np.ndarray
    operator: SystemOperator = field(repr=False)


def evaluate(sigma, data: MeasurementSet, mesh: Mesh, layout: ElectrodeLayout) -> Evaluation:
    """Forward-solve every drive with a nonzero weight and sum the weighted misfit."""
    rows = data.active_rows()
    drives = data.drives[rows]
    op = assemble_system(mesh, sigma, layout)
    space = op.space
    if len(rows):
        check_drive(drives, layout)
        states = op.solve(space.drive_load(drives))
        trace = (space.electrode_load @ states).T
        currents = (drives * space.electrode_length - trace) / layout.impedances
    else:
        states = np.zeros((space.n, 0))
        currents = np.zeros((0, layout.m))
    residuals = currents - data.targets[rows]
    J = float(np.sum(data.weights[rows] * residuals**2))
    return Evaluation(J, op.sigma, rows, drives, states, currents, residuals, op)


@dataclass(frozen=True)
class RegularizationConfig:
    """Penalty pulling coarse low/high values toward prior constants."""

    beta_c: float = 0.0
    sigma_l_bar: float = 0.2
    sigma_h_bar: float = 0.4

    def __post_init__(self):
        if self.beta_c < 0:
            raise ValueError("beta_c must be nonnegative")
        if not self.sigma_l_bar < self.sigma_h_bar:
            raise ValueError("need sigma_l_bar < sigma_h_bar")


def _low_high(zeta):
    """Low value and the N_max high values of a coarse control vector."""
    z = np.asarray(getattr(zeta, "vector", zeta), dtype=float)
    n_max = (len(z) - 1) // 2
    return z, n_max


def regularization_penalty(zeta, cfg: RegularizationConfig) -> float:
    z, n_max = _low_high(zeta)
    return float(cfg.beta_c) * float((z[0] - cfg.sigma_l_bar) ** 2 + np.sum((z[1 : n_max + 1] - cfg.sigma_h_bar) ** 2))


def evaluate_regularized(J: float, zeta, cfg: RegularizationConfig | None, chi_c: int) -> float:
    """J plus the coarse-scale penalty, active only when chi_c == 1."""
    if cfg is None or chi_c == 0:
        return J
    return J + regularization_penalty(zeta, cfg)


def augment_coarse_gradient(grad_zeta, zeta, cfg: RegularizationConfig | None) -> np.ndarray:
    """Add the penalty gradient to the low/high components; thresholds untouched."""
    g = np.array(grad_zeta, dtype=float)
    if cfg is None:
        return g
    z, n_max = _low_high(zeta)
    g[0] += 2 * cfg.beta_c * (z[0] - cfg.sigma_l_bar)
    g[1 : n_max + 1] += 2 * cfg.beta_c * (z[1 : n_max + 1] - cfg.sigma_h_bar)
    return g


def save_measurements(data: MeasurementSet, path) -> None:
    """CSV with header ``j,l,target,weight`` (1-based indices)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["j", "l", "target", "weight"])
        for j in range(data.targets.shape[0]):
            for ell in range(data.m):
                w.writerow([j + 1, ell + 1, repr(float(data.targets[j, ell])), repr(float(data.weights[j, ell]))])


def load_measurements(path, base_drives=REFERENCE_DRIVE, num_rotations: int | None = None) -> MeasurementSet:
    """Read the measurement CSV; drives are rebuilt from ``base_drives``."""
    base = np.atleast_2d(np.asarray(base_drives, dtype=float))
    m = base.shape[1]
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["j", "l", "target", "weight"]:
            raise ValueError(f"{path}: expected header j,l,target,weight, got {reader.fieldnames}")
        rows = [(int(r["j"]), int(r["l"]), float(r["target"]), float(r["weight"])) for r in reader]
    n_rows = max(r[0] for r in rows)
    targets = np.full((n_rows, m), np.nan)
    weights = np.zeros((n_rows, m))
    for j, ell, t, wt in rows:
        if not 1 <= ell <= m:
            raise ValueError(f"{path}: electrode index {ell} outside 1..{m}")
        targets[j - 1, ell - 1] = t
        weights[j - 1, ell - 1] = wt
    if np.isnan(targets).any():
        raise ValueError(f"{path}: incomplete measurement table")
    if num_rotations is None:
        num_rotations = n_rows // base.shape[0]
    return MeasurementSet(base, targets, weights, num_rotations)
