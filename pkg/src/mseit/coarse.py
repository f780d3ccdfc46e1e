"""Coarse-scale binary representation of a fine conductivity field.

Controls are zeta = (sigma_low, sigma_high_1..N_max, th_1..N_max).  A region
threshold th_n in (0, 1) is normalized to the range of the fine field:

    cut_n = (1 - th_n) min(sigma) + th_n max(sigma).

Subset 0 (the background) collects everything not in a detected region;
subset n = 1..N_max is a connected high-conductivity region grown from a
peak of the fine field inside that peak's watershed basin, so that each
threshold moves the boundary of its own region only.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from .geometry import Mesh


@dataclass(frozen=True)
class CoarseControls:
    sigma_low: float
    sigma_high: np.ndarray
    sigma_th: np.ndarray

    def __post_init__(self):
        high = np.array(self.sigma_high, dtype=float).ravel()
        th = np.array(self.sigma_th, dtype=float).ravel()
        if len(high) != len(th) or len(high) < 1:
            raise ValueError("need N_max >= 1 high values and thresholds")
        if not 0 < self.sigma_low < high.min():
            raise ValueError(f"need 0 < sigma_low < min sigma_high, got {self.sigma_low} and {high.min()}")
        if np.any(th <= 0) or np.any(th >= 1):
            raise ValueError("normalized thresholds must lie in (0, 1)")
        high.flags.writeable = False
        th.flags.writeable = False
        object.__setattr__(self, "sigma_low", float(self.sigma_low))
        object.__setattr__(self, "sigma_high", high)
        object.__setattr__(self, "sigma_th", th)

    @property
    def n_max(self) -> int:
        return len(self.sigma_high)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([[self.sigma_low], self.sigma_high, self.sigma_th])

    @classmethod
    def from_vector(cls, v) -> "CoarseControls":
        v = np.asarray(v, dtype=float)
        if len(v) < 3 or len(v) % 2 == 0:
            raise ValueError("coarse vector must have length 2 N_max + 1")
        n = (len(v) - 1) // 2
        return cls(v[0], v[1 : n + 1], v[n + 1 :])

    def cuts(self, fine_field) -> np.ndarray:
        lo, hi = float(np.min(fine_field)), float(np.max(fine_field))
        return (1 - self.sigma_th) * lo + self.sigma_th * hi


@dataclass(frozen=True)
class PartitionMap:
    """assignment[i] in 0..N_max; 0 is the low-conductivity background."""

    assignment: np.ndarray
    n_max: int

    def __post_init__(self):
        a = np.array(self.assignment, dtype=np.int64)
        if a.size and (a.min() < 0 or a.max() > self.n_max):
            raise ValueError("subset index out of range")
        a.flags.writeable = False
        object.__setattr__(self, "assignment", a)

    @property
    def n_zeta(self) -> int:
        return self.n_max + 1

    @property
    def subset_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_zeta)

    def indicator(self) -> np.ndarray:
        """Dense (N, N_zeta) 0/1 matrix P."""
        P = np.zeros((len(self.assignment), self.n_zeta))
        P[np.arange(len(self.assignment)), self.assignment] = 1.0
        return P


def _components(mesh: Mesh, mask: np.ndarray):
    """Connected components of the masked elements (shared-vertex adjacency)."""
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        return idx, np.zeros(0, dtype=np.int64), 0
    sub = mesh.vertex_adjacency[idx][:, idx]
    n, labels = connected_components(sub, directed=False)
    return idx, labels, n


def _neighbors(mesh: Mesh):
    A = mesh.vertex_adjacency
    return A.indptr, A.indices


def persistent_peaks(sigma, mesh: Mesh, min_prominence: float = 0.05):
    """Local maxima of an element field whose prominence is at least
    ``min_prominence`` times the field range (shared-vertex adjacency).

    Elements are added in decreasing order of sigma; when two components
    meet, the one with the lower peak dies with prominence peak - level.
    The global maximum is always kept.  Returns peak element indices ordered
    by decreasing height.
    """
    sigma = np.asarray(sigma, dtype=float)
    span = float(np.ptp(sigma))
    indptr, indices = _neighbors(mesh)
    order = np.lexsort((np.arange(len(sigma)), -sigma))
    parent = np.full(len(sigma), -1)
    peak = {}

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    keep = []
    for i in order:
        parent[i] = i
        roots = {find(j) for j in indices[indptr[i] : indptr[i + 1]] if parent[j] >= 0 and j != i}
        if not roots:
            peak[i] = i
            continue
        # survivor: highest peak, ties to the lower element index
        ranked = sorted(roots, key=lambda r: (-sigma[peak[r]], peak[r]))
        top = ranked[0]
        for r in ranked[1:]:
            if sigma[peak[r]] - sigma[i] >= min_prominence * span and span > 0:
                keep.append(peak[r])
            parent[r] = top
        parent[i] = top
    if len(sigma):
        keep.append(int(order[0]))
    return sorted(set(int(k) for k in keep), key=lambda k: (-sigma[k], k))


def watershed(sigma, mesh: Mesh, seeds) -> np.ndarray:
    """Basin label (index into ``seeds``) for every element, by priority flooding
    from the seeds in decreasing order of sigma."""
    sigma = np.asarray(sigma, dtype=float)
    indptr, indices = _neighbors(mesh)
    label = np.full(len(sigma), -1)
    heap = []
    for n, s in enumerate(seeds):
        label[s] = n
        heapq.heappush(heap, (-sigma[s], s))
    while heap:
        _, i = heapq.heappop(heap)
        for j in indices[indptr[i] : indptr[i + 1]]:
            if label[j] < 0:
                label[j] = label[i]
                heapq.heappush(heap, (-sigma[j], j))
    return label


@dataclass(frozen=True)
class Segmentation:
    """Peaks of a fine field and their watershed basins."""

    seeds: tuple
    basins: np.ndarray


_SEGMENT_CACHE: dict = {}


def segment(sigma, mesh: Mesh, min_prominence: float = 0.05) -> Segmentation:
    sigma = np.asarray(sigma, dtype=float)
    key = (id(mesh), min_prominence, sigma.tobytes())
    hit = _SEGMENT_CACHE.get(key)
    if hit is not None:
        return hit
    seeds = tuple(persistent_peaks(sigma, mesh, min_prominence))
    seg = Segmentation(seeds, watershed(sigma, mesh, seeds))
    if len(_SEGMENT_CACHE) >= 64:
        _SEGMENT_CACHE.pop(next(iter(_SEGMENT_CACHE)))
    _SEGMENT_CACHE[key] = seg
    return seg


def _grow(sigma, mesh, seg: Segmentation, n: int, cut: float) -> np.ndarray:
    """Elements of the connected piece of basin n above ``cut`` holding its peak."""
    seed = seg.seeds[n]
    if sigma[seed] < cut:
        return np.zeros(0, dtype=np.int64)
    idx, labels, _ = _components(mesh, (seg.basins == n) & (sigma >= cut))
    return idx[labels == labels[np.searchsorted(idx, seed)]]


def _match_slots(candidates, previous: PartitionMap | None, n_max: int):
    """Assign candidate regions (element arrays, largest first) to slots 1..N_max.

    A candidate keeps the slot of the previous region it overlaps most;
    the rest fill free slots in order of size.
    """
    slots = [None] * n_max
    if previous is not None:
        prev = previous.assignment
        pairs = []
        for c, members in enumerate(candidates):
            counts = np.bincount(prev[members], minlength=previous.n_zeta)[1:]
            for s in np.flatnonzero(counts):
                if s < n_max:
                    pairs.append((-counts[s], c, s))
        used = set()
        for _, c, s in sorted(pairs):
            if c not in used and slots[s] is None:
                slots[s] = c
                used.add(c)
    rest = [c for c in range(len(candidates)) if c not in slots]
    for s in range(n_max):
        if slots[s] is None and rest:
            slots[s] = rest.pop(0)
    return slots


def detect_regions(fine_field, zeta: CoarseControls, mesh: Mesh, previous: PartitionMap | None = None,
                   min_prominence: float = 0.05) -> PartitionMap:
    """Partition elements into background and up to N_max connected high regions.

    Every persistent peak of the field owns a watershed basin.  The N_max
    highest peaks at or above the lowest cut are candidates; a candidate keeps
    the slot of the ``previous`` region it overlaps most, and region n is the
    connected part of its basin at or above its own cut that holds the peak.
    """
    sigma = np.asarray(fine_field, dtype=float)
    n_max = zeta.n_max
    assignment = np.zeros(len(sigma), dtype=np.int64)
    if np.ptp(sigma) == 0:
        return PartitionMap(assignment, n_max)
    cuts = zeta.cuts(sigma)
    seg = segment(sigma, mesh, min_prominence)
    grown = [(_grow(sigma, mesh, seg, n, cuts.min()), n) for n in range(len(seg.seeds))]
    grown = [g for g in grown if len(g[0])][:n_max]
    for s, c in enumerate(_match_slots([g[0] for g in grown], previous, n_max)):
        if c is not None:
            assignment[_grow(sigma, mesh, seg, grown[c][1], cuts[s])] = s + 1
    return PartitionMap(assignment, n_max)


def binarize(fine_field, zeta: CoarseControls, pmap: PartitionMap) -> np.ndarray:
    """sigma_low on the background and below-cut elements, sigma_high_n on region n."""
    sigma = np.asarray(fine_field, dtype=float)
    cuts = zeta.cuts(sigma)
    out = np.full(len(sigma), zeta.sigma_low)
    region = pmap.assignment
    on = region > 0
    keep = on & (sigma >= cuts[np.maximum(region, 1) - 1])
    out[keep] = zeta.sigma_high[region[keep] - 1]
    return out


def init_controls(fine_field, pmap: PartitionMap, n_max: int | None = None) -> CoarseControls:
    """Constant-level initial guess.

    sigma_low is the mean of the values below the midpoint of the field
    range.  The threshold of region n sits halfway between the field minimum
    and the region's own peak (0.5 for the region holding the global maximum),
    and sigma_high_n is the mean of the region values at or above that cut.
    An empty region gets threshold 0.5 and the midpoint plus a quarter of the
    range.
    """
    sigma = np.asarray(fine_field, dtype=float)
    n_max = pmap.n_max if n_max is None else n_max
    lo, hi = sigma.min(), sigma.max()
    if hi - lo <= 0:
        raise ValueError("cannot initialize coarse controls from a constant field")
    mid = 0.5 * (lo + hi)
    below = sigma < mid
    low = sigma[below].mean() if below.any() else lo
    high = np.full(n_max, mid + 0.25 * (hi - lo))
    th = np.full(n_max, 0.5)
    for n in range(n_max):
        members = sigma[pmap.assignment == n + 1]
        if members.size:
            th[n] = 0.5 * (members.max() - lo) / (hi - lo)
            cut = lo + th[n] * (hi - lo)
            high[n] = members[members >= cut].mean()
    th = np.clip(th, 1e-3, 1 - 1e-3)
    high = np.maximum(high, low + 1e-3)
    return CoarseControls(low, high, th)


def analytic_coarse_gradient(grad_density, pmap: PartitionMap, areas) -> np.ndarray:
    """dJ/dsigma_low and dJ/dsigma_high_n: area-weighted sums of the density over subsets."""
    w = np.asarray(grad_density, dtype=float) * np.asarray(areas, dtype=float)
    return np.bincount(pmap.assignment, weights=w, minlength=pmap.n_zeta)


def coarse_gradient(grad_density, zeta: CoarseControls, pmap: PartitionMap, mesh: Mesh, objective_fn, J0, delta_zeta=1e-3):
    """Full coarse gradient (length 2 N_max + 1).

    The low/high components come from the fine gradient density at the
    binarized field.  Each threshold component is a forward difference of
    ``objective_fn(zeta)`` with step ``delta_zeta`` (backward when the step
    would leave (0, 1)).

    Returns
    -------
    grad : ndarray
    n_evals : int
        Number of extra objective evaluations used.
    """
    g = np.empty(2 * zeta.n_max + 1)
    g[: zeta.n_max + 1] = analytic_coarse_gradient(grad_density, pmap, mesh.element_areas)
    v = zeta.vector
    for n in range(zeta.n_max):
        k = zeta.n_max + 1 + n
        h = delta_zeta if v[k] + delta_zeta < 1 else -delta_zeta
        w = v.copy()
        w[k] += h
        g[k] = (objective_fn(CoarseControls.from_vector(w)) - J0) / h
    return g, zeta.n_max
