"""Multiscale optimization: alternating PCA (fine) and binary-region (coarse) phases.

Iteration k takes one optimizer step at scale chi_c(k) (chi_c(0) = 0); when
chi_c changes after the increment the controls are carried across scales:

* fine -> coarse: optionally re-truncate xi (``tune_pca_fine_to_coarse``),
  detect regions in sigma(xi), initialize zeta (first cycle) or reuse the
  zeta left by the previous coarse phase.
* coarse -> fine: project the binary field onto the PCA span, optionally
  choose the component count (``tune_pca_coarse_to_fine``), then take the
  smallest relaxation alpha whose blend does not worsen the fine objective
  (``coarse_to_fine``).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .adjoint import sigma_gradient
from .coarse import CoarseControls, PartitionMap, binarize, coarse_gradient, detect_regions, init_controls
from .diagnostics import l2_error
from .geometry import ElectrodeLayout, Mesh
from .objective import (
    MeasurementSet,
    RegularizationConfig,
    augment_coarse_gradient,
    evaluate,
    evaluate_regularized,
)
from .pca import PcaBasis, XiVector, project_gradient, to_sigma, to_xi, truncate

HISTORY_HEADER = ["k", "scale", "J_fine", "J_coarse", "l2_error", "N_xi", "alpha"]


# ---------------------------------------------------------------- schedule


@dataclass(frozen=True)
class SwitchSchedule:
    n_s: int = 5
    eps_f: float = 1e-9
    eps_c: float = 0.0
    max_iterations: int = 2000
    max_objective_evaluations: int = 100_000
    alpha_max: float = 1.0

    def __post_init__(self):
        if self.n_s < 1:
            raise ValueError("n_s must be at least 1")
        if self.eps_f < 0 or self.eps_c < 0:
            raise ValueError("tolerances must be nonnegative")
        if self.max_iterations < 1 or self.max_objective_evaluations < 1:
            raise ValueError("iteration and evaluation caps must be positive")
        if not 0 < self.alpha_max <= 1:
            raise ValueError("alpha_max must lie in (0, 1]")


def scale_indicator(k: int, n_s: int) -> int:
    """0 on fine half-cycles ((2k_s-2) n_s < k <= (2k_s-1) n_s), 1 on coarse ones."""
    if k < 1:
        raise ValueError("k must be at least 1")
    k_s = -(-k // n_s)  # ceil(k / n_s)
    return 0 if k_s % 2 == 1 else 1


@dataclass(frozen=True)
class HistoryRecord:
    k: int
    scale: str
    J_fine: float
    J_coarse: float
    l2_error: float
    N_xi: int
    alpha: float

    @property
    def objective(self) -> float:
        """Objective of the scale that is current at iteration k."""
        return self.J_coarse if self.scale == "coarse" else self.J_fine

    def row(self):
        vals = (self.J_fine, self.J_coarse, self.l2_error)
        return [self.k, self.scale, *(repr(float(v)) for v in vals), int(self.N_xi), repr(float(self.alpha))]


def should_terminate(history, schedule: SwitchSchedule, k: int, n_evals: int = 0) -> bool:
    """Relative objective change below the phase tolerance, or a cap reached.

    The change test is skipped on the first iteration of every phase
    (k = k_s n_s + 1), where the objective jumps by construction.
    """
    if k >= schedule.max_iterations or n_evals >= schedule.max_objective_evaluations:
        return True
    if len(history) < 2 or k < 1 or (k - 1) % schedule.n_s == 0:
        return False
    chi = scale_indicator(k, schedule.n_s)
    J, J_prev = history[-1].objective, history[-2].objective
    if not (np.isfinite(J) and np.isfinite(J_prev)) or J == 0:
        return J == 0 and J_prev == 0
    tol = (1 - chi) * schedule.eps_f + chi * schedule.eps_c
    return abs((J - J_prev) / J) < tol


# ---------------------------------------------------------------- inner optimizer


@dataclass
class InnerResult:
    x: np.ndarray
    f: float
    accepted: int
    failed: bool


class ProjectedGradient:
    """Projected descent steps with Armijo backtracking along the projection path.

    Directions are steepest descent scaled by a limited-memory BFGS inverse
    Hessian (``memory`` pairs; 0 gives plain Barzilai-Borwein gradient
    steps).  A quasi-Newton direction that fails to descend, or whose line
    search fails, is replaced by the scaled gradient before giving up.

    ``step()`` performs one iteration and reports whether a decrease was
    accepted; after a line-search failure the stepper is stalled and further
    calls return False without evaluating anything.
    """

    def __init__(self, x0, objective_fn, gradient_fn, project=None, f0=None, initial_step=1.0,
                 memory=5, armijo=1e-4, shrink=0.5, max_backtracks=30):
        self.project = project if project is not None else (lambda x: x)
        self.objective_fn = objective_fn
        self.gradient_fn = gradient_fn
        self.x = self.project(np.array(x0, dtype=float))
        self.f = objective_fn(self.x) if f0 is None else f0
        self.g = None
        self.initial_step = initial_step
        self.memory = memory
        self.armijo = armijo
        self.shrink = shrink
        self.max_backtracks = max_backtracks
        self.pairs = []
        self.stalled = False
        self.accepted = 0

    def _scaled(self, g):
        """-H g by the two-loop recursion; H0 = (s.y / y.y) I."""
        q = g.copy()
        alphas = []
        for s, y, rho in reversed(self.pairs):
            a = rho * (s @ q)
            alphas.append(a)
            q -= a * y
        s, y, _ = self.pairs[-1]
        q *= (s @ y) / (y @ y)
        for (s, y, rho), a in zip(self.pairs, reversed(alphas)):
            q += (a - rho * (y @ q)) * s
        return -q

    def _search(self, d, t):
        g = self.g
        for _ in range(self.max_backtracks):
            x_new = self.project(self.x + t * d)
            step = x_new - self.x
            if not np.any(step):
                return None
            decrease = -float(g @ step)
            if decrease > 0:
                f_new = self.objective_fn(x_new)
                if np.isfinite(f_new) and f_new <= self.f - self.armijo * decrease:
                    return x_new, f_new
            t *= self.shrink
        return None

    def step(self) -> bool:
        if self.stalled:
            return False
        if self.g is None:
            self.g = np.asarray(self.gradient_fn(self.x), dtype=float)
        g = self.g
        gmax = np.max(np.abs(g), initial=0.0)
        if gmax == 0 or not np.isfinite(gmax):
            self.stalled = True
            return False
        trials = []
        if self.pairs and self.memory > 0:
            d = self._scaled(g)
            if g @ d < 0:
                trials.append((d, 1.0))
        if self.pairs:
            s, y, _ = self.pairs[-1]
            trials.append((-g, float(s @ y) / float(y @ y)))
        else:
            trials.append((-g, self.initial_step / gmax))
        for d, t in trials:
            found = self._search(d, t)
            if found is not None:
                break
        else:
            self.stalled = True
            return False
        x_new, f_new = found
        g_new = np.asarray(self.gradient_fn(x_new), dtype=float)
        s, y = x_new - self.x, g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            self.pairs.append((s, y, 1.0 / sy))
            if len(self.pairs) > max(self.memory, 1):
                self.pairs.pop(0)
        self.x, self.f, self.g = x_new, f_new, g_new
        self.accepted += 1
        return True


def inner_minimize(x0, bounds, gradient_fn, objective_fn, n_s: int, initial_step=1.0) -> InnerResult:
    """Up to ``n_s`` projected-gradient iterations on a box (``bounds`` = (lo, hi) or None)."""
    if bounds is None:
        project = None
    else:
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), np.shape(x0)) for b in bounds)
        project = lambda x: np.clip(x, lo, hi)  # noqa: E731
    pg = ProjectedGradient(x0, objective_fn, gradient_fn, project, initial_step=initial_step)
    for _ in range(n_s):
        if not pg.step():
            break
    return InnerResult(pg.x, pg.f, pg.accepted, pg.stalled)


# ---------------------------------------------------------------- problem / config


class BudgetExceeded(RuntimeError):
    pass


@dataclass(frozen=True)
class DriverConfig:
    n_max: int = 5
    tuned_pca: bool = True
    fine_only: bool = False
    sigma0: float = 0.3
    delta_zeta: float = 1e-3
    adjoint_variant: str = "consistent"
    regularization: RegularizationConfig | None = None
    coarse_first_rotation_only: bool = True
    alpha_points: int = 33
    fine_initial_step: float = 1.0
    coarse_initial_step: float = 0.02
    min_gap: float = 1e-3
    threshold_margin: float = 1e-3

    def __post_init__(self):
        if self.n_max < 1:
            raise ValueError("n_max must be at least 1")
        if self.sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if not 0 < self.delta_zeta < 0.5:
            raise ValueError("delta_zeta must lie in (0, 0.5)")
        if self.alpha_points < 2:
            raise ValueError("alpha_points must be at least 2")


@dataclass
class Problem:
    """Mesh, electrodes, PCA basis, measurements and (optionally) the true field."""

    mesh: Mesh
    layout: ElectrodeLayout
    basis: PcaBasis
    data: MeasurementSet
    truth: np.ndarray | None = None
    variant: str = "consistent"
    max_evaluations: int = 100_000
    n_evals: int = 0
    _cache: dict = field(default_factory=dict, repr=False)

    def evaluate(self, sigma, data: MeasurementSet):
        key = (id(data), np.asarray(sigma).tobytes())
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if self.n_evals + 1 > self.max_evaluations:
            raise BudgetExceeded(f"objective evaluation limit {self.max_evaluations} reached")
        self.n_evals += 1
        ev = evaluate(sigma, data, self.mesh, self.layout)
        if len(self._cache) >= 8:
            self._cache.pop(next(iter(self._cache)))
        self._cache[key] = ev
        return ev

    def J(self, sigma, data=None) -> float:
        return self.evaluate(sigma, self.data if data is None else data).J

    def gradient(self, sigma, data=None) -> np.ndarray:
        data = self.data if data is None else data
        return sigma_gradient(self.evaluate(sigma, data), data, self.mesh, self.layout, self.variant)

    def error(self, sigma) -> float:
        return l2_error(sigma, self.truth, self.mesh) if self.truth is not None else math.nan


# ---------------------------------------------------------------- scale transfers


def _xi_with(basis: PcaBasis, coeffs, active) -> XiVector:
    c = np.zeros(basis.max_components)
    c[:active] = np.asarray(coeffs)[:active]
    return XiVector(c, active)


def ladder(n: int):
    """1, 2, 4, ... capped by n, always ending at n."""
    out, v = [], 1
    while v < n:
        out.append(v)
        v *= 2
    out.append(n)
    return out


def integer_argmin(f: Callable[[int], float], n: int, scan_width: int = 16, probes: int = 8) -> int:
    """Approximate argmin of f over 1..n: geometric ladder, then zoom on the best bracket.

    Brackets of at most ``scan_width`` integers are scanned exhaustively.
    Ties go to the smallest argument.
    """
    values = {}

    def val(i):
        if i not in values:
            values[i] = f(i)
        return values[i]

    def best():
        return min(values, key=lambda i: (values[i], i))

    pts = ladder(n)
    for i in pts:
        val(i)
    b = best()
    pos = pts.index(b)
    lo = pts[pos - 1] if pos > 0 else 1
    hi = pts[pos + 1] if pos + 1 < len(pts) else n
    while hi - lo > scan_width:
        for i in np.unique(np.linspace(lo, hi, probes + 2).round().astype(int)):
            val(int(i))
        b = best()
        inside = sorted(i for i in values if lo <= i <= hi)
        pos = inside.index(b) if b in inside else 0
        lo_new = inside[pos - 1] if pos > 0 else lo
        hi_new = inside[pos + 1] if pos + 1 < len(inside) else hi
        if (lo_new, hi_new) == (lo, hi):
            break
        lo, hi = lo_new, hi_new
    for i in range(lo, hi + 1):
        val(i)
    return best()


def integer_max_feasible(feasible: Callable[[int], bool], n: int):
    """Largest i in 1..n with feasible(i), assuming monotone feasibility within ladder brackets.

    Returns None if no ladder point is feasible.
    """
    pts = ladder(n)
    cache = {}

    def ok(i):
        if i not in cache:
            cache[i] = bool(feasible(i))
        return cache[i]

    for j in range(len(pts) - 1, -1, -1):
        if ok(pts[j]):
            lo = pts[j]
            hi = pts[j + 1] if j + 1 < len(pts) else lo
            # bisection for the last feasible point in (lo, hi)
            while hi - lo > 1:
                mid = (lo + hi) // 2
                if ok(mid):
                    lo = mid
                else:
                    hi = mid
            return lo
    return None


def tune_pca_fine_to_coarse(xi: XiVector, basis: PcaBasis, coarse_objective: Callable[[XiVector], float]) -> int:
    """N_t minimizing the binarized objective of truncate(xi, N_t), 1 <= N_t <= active count."""
    n = xi.active_count
    if n <= 1:
        return max(n, 1)
    return integer_argmin(lambda t: coarse_objective(truncate(xi, t)), n)


def tune_pca_coarse_to_fine(xi_candidate: XiVector, basis: PcaBasis, fine_objective: Callable[[XiVector], float], J_ref: float, previous_count: int) -> int:
    """Largest N_t with J(sigma(truncate(xi_candidate, N_t))) <= J_ref, else ``previous_count``."""
    n = xi_candidate.active_count
    found = integer_max_feasible(lambda t: fine_objective(truncate(xi_candidate, t)) <= J_ref, n)
    return previous_count if found is None else found


def alpha_grid(alpha_max: float, points: int = 33) -> np.ndarray:
    return np.linspace(0.0, alpha_max, points)


def coarse_to_fine(sigma_coarse, xi_prev: XiVector, basis: PcaBasis, fine_objective, J_ref: float,
                   alpha_max: float = 1.0, n_t: int | None = None, points: int = 33, fallback: XiVector | None = None):
    """Relaxed coarse-to-fine projection.

    The binary field is replaced by its PCA projection, blended with
    sigma(xi_prev) in coefficient space, truncated to ``n_t`` components, and
    the smallest alpha on a uniform grid over [0, alpha_max] with
    J(blend) <= J_ref is taken.  Without a feasible alpha, ``fallback``
    (default ``xi_prev``) is returned with alpha = 1.

    Returns
    -------
    xi : XiVector
    alpha : float
    """
    xi_c = to_xi(sigma_coarse, basis).coefficients
    n_t = basis.max_components if n_t is None else n_t
    prev = xi_prev.coefficients
    for a in alpha_grid(alpha_max, points):
        cand = _xi_with(basis, a * prev + (1 - a) * xi_c, n_t)
        if fine_objective(cand) <= J_ref:
            return cand, float(a)
    return (xi_prev if fallback is None else fallback), 1.0


def fine_to_coarse(xi: XiVector, basis: PcaBasis, mesh: Mesh, n_max: int, zeta_prev: CoarseControls | None = None,
                   previous_map: PartitionMap | None = None):
    """Controls, partition and binary field for the fine field sigma(xi).

    The first switch initializes zeta from the field; later switches reuse
    the zeta left at the end of the previous coarse phase.
    """
    sigma_f = to_sigma(xi, basis)
    if zeta_prev is None:
        lo, hi = float(sigma_f.min()), float(sigma_f.max())
        if hi <= lo:
            raise ValueError("cannot initialize coarse controls from a constant field")
        probe = CoarseControls(lo, np.full(n_max, hi), np.full(n_max, 1e-3))
        pmap = detect_regions(sigma_f, probe, mesh, previous_map)
        zeta = init_controls(sigma_f, pmap, n_max)
    else:
        zeta = zeta_prev
    pmap = detect_regions(sigma_f, zeta, mesh, previous_map)
    return zeta, pmap, binarize(sigma_f, zeta, pmap)


# ---------------------------------------------------------------- driver


@dataclass
class OptimizationState:
    k: int = 0
    chi_c: int = 0
    sigma: np.ndarray = None
    xi: XiVector = None
    zeta: CoarseControls | None = None
    pmap: PartitionMap | None = None
    sigma_fine: np.ndarray = None
    sigma_coarse: np.ndarray | None = None
    history: list = field(default_factory=list)
    n_evals: int = 0
    status: str = "running"
    switches: list = field(default_factory=list)

    @property
    def n_regions(self) -> int:
        if self.pmap is None:
            return 0
        return int(np.count_nonzero(self.pmap.subset_sizes[1:]))


class _History:
    def __init__(self, path):
        self.path = None if path is None else Path(path)
        if self.path is not None:
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(HISTORY_HEADER)

    def append(self, state: OptimizationState, rec: HistoryRecord):
        state.history.append(rec)
        if self.path is not None:
            with self.path.open("a", newline="") as fh:
                csv.writer(fh).writerow(rec.row())


def read_history(path):
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        HistoryRecord(int(r["k"]), r["scale"], float(r["J_fine"]), float(r["J_coarse"]), float(r["l2_error"]), int(r["N_xi"]), float(r["alpha"]))
        for r in rows
    ]


class MultiscaleDriver:
    def __init__(self, problem: Problem, schedule: SwitchSchedule, config: DriverConfig, history_path=None):
        self.p = problem
        self.p.max_evaluations = schedule.max_objective_evaluations
        self.p.variant = config.adjoint_variant
        self.schedule = schedule
        self.cfg = config
        self.coarse_data = problem.data.first_rotation_only() if config.coarse_first_rotation_only else problem.data
        self.reg = config.regularization
        self.state = OptimizationState()
        self._hist = _History(history_path)
        self._stepper = None
        self._zeta_end = None
        self._map_ref = None
        self._xi_end_fine = None
        self._J_end_fine = None
        self._sigma_f = None
        self._J_coarse = math.nan
        self._alpha = math.nan
        self._fine_memo = {}

    # objective pieces ------------------------------------------------
    def fine_J(self, xi) -> float:
        key = np.asarray(getattr(xi, "coefficients", xi)).tobytes()
        if key not in self._fine_memo:
            if len(self._fine_memo) >= 64:
                self._fine_memo.pop(next(iter(self._fine_memo)))
            self._fine_memo[key] = self.p.J(to_sigma(xi, self.p.basis))
        return self._fine_memo[key]

    def _coarse_field(self, zeta: CoarseControls, sigma_f=None):
        sigma_f = self._sigma_f if sigma_f is None else sigma_f
        pmap = detect_regions(sigma_f, zeta, self.p.mesh, self._map_ref)
        return binarize(sigma_f, zeta, pmap), pmap

    def coarse_J(self, zeta: CoarseControls, sigma_f=None) -> float:
        field_, _ = self._coarse_field(zeta, sigma_f)
        J = self.p.J(field_, self.coarse_data)
        return evaluate_regularized(J, zeta, self.reg, 1)

    def _zeta_ok(self, v) -> CoarseControls | None:
        try:
            return CoarseControls.from_vector(v)
        except ValueError:
            return None

    def _project_zeta(self, v):
        n = self.cfg.n_max
        v = np.array(v, dtype=float)
        floor = self.p.basis.floor
        m = self.cfg.threshold_margin
        v[n + 1 :] = np.clip(v[n + 1 :], m, 1 - m)
        v[1 : n + 1] = np.maximum(v[1 : n + 1], floor + self.cfg.min_gap)
        v[0] = min(max(v[0], floor), v[1 : n + 1].min() - self.cfg.min_gap)
        return v

    def _coarse_objective_vec(self, v) -> float:
        return self.coarse_J(CoarseControls.from_vector(v))

    def _coarse_gradient_vec(self, v) -> np.ndarray:
        zeta = CoarseControls.from_vector(v)
        field_, pmap = self._coarse_field(zeta)
        g_sigma = self.p.gradient(field_, self.coarse_data)
        J0 = self.p.J(field_, self.coarse_data)
        zeta_fd = lambda z: self.p.J(self._coarse_field(z)[0], self.coarse_data)  # noqa: E731
        g, _ = coarse_gradient(g_sigma, zeta, pmap, self.p.mesh, zeta_fd, J0, self.cfg.delta_zeta)
        return augment_coarse_gradient(g, zeta, self.reg)

    def _fine_objective_vec(self, v) -> float:
        return self.fine_J(_xi_with(self.p.basis, v, len(v)))

    def _fine_gradient_vec(self, v) -> np.ndarray:
        xi = _xi_with(self.p.basis, v, len(v))
        g = self.p.gradient(to_sigma(xi, self.p.basis))
        return project_gradient(g, self.p.basis, len(v), xi)[: len(v)]

    # phases ----------------------------------------------------------
    def _start_fine(self):
        xi = self.state.xi
        n = xi.active_count
        self._stepper = ProjectedGradient(
            xi.coefficients[:n], self._fine_objective_vec, self._fine_gradient_vec,
            f0=self.fine_J(xi), initial_step=self.cfg.fine_initial_step,
        )

    def _start_coarse(self):
        self._stepper = ProjectedGradient(
            self.state.zeta.vector, self._coarse_objective_vec, self._coarse_gradient_vec,
            project=self._project_zeta, f0=self.coarse_J(self.state.zeta),
            initial_step=self.cfg.coarse_initial_step,
        )

    def _sync_from_stepper(self):
        st = self.state
        if st.chi_c == 0:
            st.xi = _xi_with(self.p.basis, self._stepper.x, st.xi.active_count)
            st.sigma = to_sigma(st.xi, self.p.basis)
            st.sigma_fine = st.sigma
        else:
            st.zeta = CoarseControls.from_vector(self._stepper.x)
            st.sigma, st.pmap = self._coarse_field(st.zeta)
            st.sigma_coarse = st.sigma
            self._J_coarse = self._stepper.f

    def _switch_to_coarse(self):
        st, basis = self.state, self.p.basis
        self._xi_end_fine = st.xi
        self._J_end_fine = self.fine_J(st.xi)
        xi = st.xi
        if self.cfg.tuned_pca:
            def objective(xi_t):
                sigma_f = to_sigma(xi_t, basis)
                zeta = self._zeta_end
                if zeta is None:
                    zeta, _, _ = fine_to_coarse(xi_t, basis, self.p.mesh, self.cfg.n_max, None, self._map_ref)
                return self.coarse_J(zeta, sigma_f)

            xi = truncate(xi, tune_pca_fine_to_coarse(xi, basis, objective))
        st.xi = xi
        self._sigma_f = to_sigma(xi, basis)
        st.zeta, st.pmap, st.sigma = fine_to_coarse(xi, basis, self.p.mesh, self.cfg.n_max, self._zeta_end, self._map_ref)
        self._map_ref = st.pmap
        st.sigma_coarse = st.sigma
        self._J_coarse = self.coarse_J(st.zeta)
        self._alpha = math.nan
        st.switches.append(("fine->coarse", st.k, xi.active_count))
        self._start_coarse()

    def _switch_to_fine(self):
        st, basis = self.state, self.p.basis
        self._zeta_end = st.zeta
        self._map_ref = st.pmap
        J_ref = self._J_end_fine
        n_t = st.xi.active_count
        if self.cfg.tuned_pca:
            xi_c = to_xi(st.sigma, basis)
            n_t = tune_pca_coarse_to_fine(xi_c, basis, self.fine_J, J_ref, self._xi_end_fine.active_count)
        xi, alpha = coarse_to_fine(
            st.sigma, st.xi, basis, self.fine_J, J_ref, self.schedule.alpha_max, n_t,
            self.cfg.alpha_points, fallback=self._xi_end_fine,
        )
        st.xi = xi
        st.sigma = to_sigma(xi, basis)
        st.sigma_fine = st.sigma
        self._alpha = alpha
        st.switches.append(("coarse->fine", st.k, xi.active_count, alpha))
        self._start_fine()

    def _record(self):
        st = self.state
        J_f = self.fine_J(st.xi)
        rec = HistoryRecord(
            st.k, "coarse" if st.chi_c else "fine", J_f, self._J_coarse,
            self.p.error(st.sigma), st.xi.active_count, self._alpha,
        )
        self._hist.append(st, rec)

    # main loop -------------------------------------------------------
    def initialize(self):
        st, basis = self.state, self.p.basis
        sigma0 = np.full(self.p.mesh.n_elements, self.cfg.sigma0)
        st.xi = to_xi(sigma0, basis)
        st.sigma = to_sigma(st.xi, basis)
        st.sigma_fine = st.sigma
        self._start_fine()
        self._record()

    def run(self) -> OptimizationState:
        st = self.state
        try:
            if not st.history:
                self.initialize()
            while True:
                self._stepper.step()
                self._sync_from_stepper()
                st.k += 1
                chi = 0 if self.cfg.fine_only else scale_indicator(st.k, self.schedule.n_s)
                if chi != st.chi_c:
                    st.chi_c = chi
                    if chi == 1:
                        self._switch_to_coarse()
                    else:
                        self._switch_to_fine()
                self._record()
                st.n_evals = self.p.n_evals
                sched = self.schedule
                if self.cfg.fine_only:
                    # a single fine phase: no switch exclusion after k = 1
                    sched = replace(sched, n_s=sched.max_iterations + 1)
                if should_terminate(st.history, sched, st.k, self.p.n_evals):
                    st.status = self._stop_reason()
                    break
        except BudgetExceeded as exc:
            st.status = f"stopped: {exc}"
        except Exception as exc:  # noqa: BLE001 - abort gracefully, keep partial history
            st.status = f"failed: {type(exc).__name__}: {exc}"
        st.n_evals = self.p.n_evals
        return st

    def _stop_reason(self) -> str:
        st = self.state
        if st.k >= self.schedule.max_iterations:
            return "stopped: iteration limit"
        if self.p.n_evals >= self.schedule.max_objective_evaluations:
            return "stopped: evaluation limit"
        return "converged"


def run(problem: Problem, schedule: SwitchSchedule | None = None, config: DriverConfig | None = None, history_path=None) -> OptimizationState:
    """Run the multiscale algorithm (or the fine-only baseline with ``config.fine_only``)."""
    return MultiscaleDriver(problem, schedule or SwitchSchedule(), config or DriverConfig(), history_path).run()
