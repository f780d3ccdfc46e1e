"""Gradient verification (kappa tests) and reconstruction error metrics.

kappa(eps) = [J(x + eps d) - J(x)] / (eps <grad J, d>) tends to 1 for a
correct gradient; it departs from 1 for small eps through round-off and for
large eps through the Taylor remainder.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEFAULT_EPSILONS = 10.0 ** np.arange(-12.0, -1.0 + 1e-9, 1.0 / 3.0)


@dataclass(frozen=True)
class KappaReport:
    epsilons: np.ndarray
    kappa_values: np.ndarray
    mode: str = "cheap"

    def __post_init__(self):
        if len(self.epsilons) != len(self.kappa_values):
            raise ValueError("epsilons and kappa values differ in length")

    @property
    def log_deviation(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log10(np.abs(self.kappa_values - 1.0))

    @property
    def undefined(self) -> np.ndarray:
        return ~np.isfinite(self.kappa_values)

    def plateau_decades(self, tol: float) -> float:
        """Longest run of consecutive grid points with |kappa - 1| <= tol, in decades of eps."""
        ok = np.abs(self.kappa_values - 1.0) <= tol
        best, start = 0.0, None
        for i, flag in enumerate(ok):
            if flag and start is None:
                start = i
            if flag:
                best = max(best, np.log10(self.epsilons[i] / self.epsilons[start]))
            else:
                start = None
        return best

    def plateau_min(self) -> float:
        """Smallest |kappa - 1| over the grid (the bottom of the plateau)."""
        dev = np.abs(self.kappa_values - 1.0)
        return float(np.nanmin(dev)) if np.isfinite(dev).any() else np.nan


def _ratio(dJ, denom):
    return dJ / denom if denom != 0 and np.isfinite(denom) else np.nan


def random_direction(n: int, seed: int = 0) -> np.ndarray:
    d = np.random.default_rng(seed).standard_normal(n)
    return d / np.linalg.norm(d)


def kappa_cheap(objective_fn, gradient_fn, point, direction=None, eps_grid=None, inner=None, seed: int = 0) -> KappaReport:
    """kappa(eps) along one direction (a seeded unit normal vector by default).

    ``inner(g, d)`` pairs the gradient with a direction; the plain dot product
    unless the gradient is a density with respect to a weighted measure.
    """
    x = np.asarray(point, dtype=float)
    d = random_direction(x.size, seed) if direction is None else np.asarray(direction, dtype=float)
    if not np.any(d):
        raise ValueError("direction must be nonzero")
    eps = DEFAULT_EPSILONS if eps_grid is None else np.asarray(eps_grid, dtype=float)
    if np.any(eps <= 0) or np.any(np.diff(eps) <= 0):
        raise ValueError("epsilon grid must be positive and increasing")
    inner = np.dot if inner is None else inner
    J0 = objective_fn(x)
    slope = float(inner(gradient_fn(x), d))
    kappa = np.array([_ratio(objective_fn(x + e * d) - J0, e * slope) for e in eps])
    return KappaReport(eps, kappa, "cheap")


def kappa_expensive(objective_fn, gradient_fn, point, epsilon_fixed: float = 1e-8, components=None, weights=None) -> KappaReport:
    """kappa(i) for unit perturbations of individual coordinates at fixed eps.

    ``weights[i]`` scales the gradient entry to a directional derivative
    (element areas for a gradient density); undefined entries are NaN.
    """
    x = np.asarray(point, dtype=float)
    g = np.asarray(gradient_fn(x), dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    idx = np.arange(x.size) if components is None else np.asarray(components)
    J0 = objective_fn(x)
    kappa = np.empty(len(idx))
    for k, i in enumerate(idx):
        xp = x.copy()
        xp[i] += epsilon_fixed
        kappa[k] = _ratio(objective_fn(xp) - J0, epsilon_fixed * g[i] * w[i])
    return KappaReport(np.full(len(idx), float(epsilon_fixed)), kappa, "expensive")


def l2_error(field, truth, mesh) -> float:
    """sqrt(sum_i (field_i - truth_i)^2 area_i)."""
    f = np.asarray(field, dtype=float)
    t = np.asarray(truth, dtype=float)
    if f.shape != (mesh.n_elements,) or t.shape != (mesh.n_elements,):
        raise ValueError("fields must have one value per mesh element")
    return float(np.sqrt(np.sum((f - t) ** 2 * mesh.element_areas)))


def write_kappa_csv(report: KappaReport, path, components=None) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        if report.mode == "cheap":
            w.writerow(["epsilon", "kappa", "log10_abs_dev"])
            for e, k, d in zip(report.epsilons, report.kappa_values, report.log_deviation):
                w.writerow([repr(float(e)), repr(float(k)), repr(float(d))])
        else:
            w.writerow(["component", "kappa"])
            idx = range(1, len(report.kappa_values) + 1) if components is None else np.asarray(components) + 1
            for i, k in zip(idx, report.kappa_values):
                w.writerow([int(i), repr(float(k))])
