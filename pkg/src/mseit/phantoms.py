"""Ground-truth phantoms, synthetic measurements and noise."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .forward import assemble_system
from .geometry import ElectrodeLayout, Mesh
from .objective import MeasurementSet, rotate_drive


@dataclass(frozen=True)
class Circle:
    center: tuple
    radius: float
    value: float = 0.4

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("circle radius must be positive")
        if self.value <= 0:
            raise ValueError("conductivity must be positive")


@dataclass(frozen=True)
class CirclesSpec:
    circles: tuple = ()
    background: float = 0.2

    def __post_init__(self):
        if self.background <= 0:
            raise ValueError("background must be positive")
        object.__setattr__(self, "circles", tuple(self.circles))


# Three non-overlapping spots of distinct size on the r = 0.1 disc; the
# largest radius is 0.3 r.
THREE_SPOTS = CirclesSpec(
    (
        Circle((-0.035, 0.035), 0.030, 0.4),
        Circle((0.040, 0.020), 0.022, 0.4),
        Circle((0.010, -0.050), 0.015, 0.4),
    )
)

# same geometry with a different conductivity per spot
MIXED_SPOTS = CirclesSpec(
    (
        Circle((-0.035, 0.035), 0.030, 0.3),
        Circle((0.040, 0.020), 0.022, 0.4),
        Circle((0.010, -0.050), 0.015, 0.35),
    )
)


def scaled_spec(spec: CirclesSpec, factor: float) -> CirclesSpec:
    """The same phantom on a disc ``factor`` times larger."""
    return CirclesSpec(
        tuple(Circle((c.center[0] * factor, c.center[1] * factor), c.radius * factor, c.value) for c in spec.circles),
        spec.background,
    )


def make_circles_phantom(spec: CirclesSpec, mesh: Mesh) -> np.ndarray:
    """Centroid sampling; later circles override earlier ones."""
    c = mesh.centroids
    out = np.full(mesh.n_elements, spec.background)
    for circ in spec.circles:
        inside = np.hypot(c[:, 0] - circ.center[0], c[:, 1] - circ.center[1]) <= circ.radius
        out[inside] = circ.value
    return out


def spec_from_dict(d: dict) -> CirclesSpec:
    circles = [Circle(tuple(c["center"]), float(c["radius"]), float(c.get("value", 0.4))) for c in d.get("circles", [])]
    return CirclesSpec(tuple(circles), float(d.get("background", 0.2)))


def spec_to_dict(spec: CirclesSpec) -> dict:
    return {
        "background": spec.background,
        "circles": [{"center": list(c.center), "radius": c.radius, "value": c.value} for c in spec.circles],
    }


@dataclass(frozen=True)
class RasterGrid:
    """Binary mask with the physical extent (xmin, xmax, ymin, ymax) it covers.

    Row 0 is the top of the image (largest y).
    """

    mask: np.ndarray
    extent: tuple

    def cell_of(self, points) -> tuple:
        ny, nx = self.mask.shape
        xmin, xmax, ymin, ymax = self.extent
        col = np.floor((points[:, 0] - xmin) / (xmax - xmin) * nx).astype(int)
        row = np.floor((ymax - points[:, 1]) / (ymax - ymin) * ny).astype(int)
        return np.clip(row, 0, ny - 1), np.clip(col, 0, nx - 1)


def _sidecar(path: Path) -> Path:
    return path.with_suffix(path.suffix + ".json")


def read_raster(path) -> RasterGrid:
    """Read a PGM mask (P2 or P5) and its ``.json`` sidecar holding the extent.

    Pixels above half the maximum gray value are foreground.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode not in ("L", "I", "I;16", "I;16B"):
                raise ValueError(f"{path}: expected a portable graymap")
            a = np.asarray(im, dtype=float)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: malformed raster ({exc})") from exc
    try:
        meta = json.loads(_sidecar(path).read_text())
        extent = tuple(float(v) for v in meta["extent"])
    except (OSError, KeyError, ValueError, TypeError) as exc:
        raise ValueError(f"{path}: missing or malformed extent sidecar") from exc
    if len(extent) != 4 or extent[1] <= extent[0] or extent[3] <= extent[2]:
        raise ValueError(f"{path}: extent must be (xmin, xmax, ymin, ymax) with positive size")
    top = a.max() if a.size else 0.0
    return RasterGrid(a > top / 2 if top > 0 else np.zeros(a.shape, bool), extent)


def write_raster(grid: RasterGrid, path) -> None:
    path = Path(path)
    Image.fromarray(np.where(grid.mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PPM")
    _sidecar(path).write_text(json.dumps({"extent": list(grid.extent)}))


def import_raster(grid, mesh: Mesh, low: float = 0.2, high: float = 0.4) -> np.ndarray:
    """Element value = high where the cell holding its centroid is foreground."""
    if not isinstance(grid, RasterGrid):
        grid = read_raster(grid)
    xmin, xmax, ymin, ymax = grid.extent
    R = mesh.radius
    tol = 1e-9 * R
    if xmin > -R + tol or xmax < R - tol or ymin > -R + tol or ymax < R - tol:
        raise ValueError("raster extent does not cover the disc")
    row, col = grid.cell_of(mesh.centroids)
    return np.where(grid.mask[row, col], high, low)


def export_raster(field, mesh: Mesh, shape=(128, 128), threshold=None) -> RasterGrid:
    """Sample a field at cell centers (nearest element centroid) and threshold it.

    The default threshold is the midpoint of the field range.  Cells outside
    the disc are background.
    """
    field = np.asarray(field, dtype=float)
    ny, nx = shape
    R = mesh.radius
    extent = (-R, R, -R, R)
    xs = -R + (np.arange(nx) + 0.5) * 2 * R / nx
    ys = R - (np.arange(ny) + 0.5) * 2 * R / ny
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    _, nearest = cKDTree(mesh.centroids).query(pts)
    thr = 0.5 * (field.min() + field.max()) if threshold is None else threshold
    mask = (field[nearest] > thr) & (np.hypot(pts[:, 0], pts[:, 1]) <= R)
    return RasterGrid(mask.reshape(shape), extent)


def write_field_pgm(field, mesh: Mesh, path, shape=(128, 128), vmin=None, vmax=None) -> None:
    """Grayscale image of a field (nearest-centroid sampling) for figures."""
    field = np.asarray(field, dtype=float)
    ny, nx = shape
    R = mesh.radius
    xs = -R + (np.arange(nx) + 0.5) * 2 * R / nx
    ys = R - (np.arange(ny) + 0.5) * 2 * R / ny
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    _, nearest = cKDTree(mesh.centroids).query(pts)
    lo = field.min() if vmin is None else vmin
    hi = field.max() if vmax is None else vmax
    v = (field[nearest] - lo) / (hi - lo) if hi > lo else np.zeros(len(pts))
    v[np.hypot(pts[:, 0], pts[:, 1]) > R] = 0.0
    img = np.clip(np.round(v * 255), 0, 255).astype(np.uint8).reshape(shape)
    path = Path(path)
    Image.fromarray(img, mode="L").save(path, format="PPM")
    _sidecar(path).write_text(json.dumps({"extent": [-R, R, -R, R], "vmin": float(lo), "vmax": float(hi)}))


def simulate_data(phantom_field, mesh: Mesh, layout: ElectrodeLayout, base_drive, rotations: int | None = None, K: int = 1) -> MeasurementSet:
    """Noiseless currents for every rotation of each base pattern, weights 1."""
    base = np.atleast_2d(np.asarray(base_drive, dtype=float))
    if base.shape[0] != K:
        raise ValueError(f"expected {K} base pattern(s), got {base.shape[0]}")
    R = layout.m if rotations is None else rotations
    drives = np.array([rotate_drive(b, j) for b in base for j in range(1, R + 1)])
    op = assemble_system(mesh, phantom_field, layout)
    space = op.space
    u = op.solve(space.drive_load(drives))
    targets = (drives * space.electrode_length - (space.electrode_load @ u).T) / layout.impedances
    return MeasurementSet(base, targets, None, R)


@dataclass(frozen=True)
class NoiseSpec:
    percent: float = 0.0
    seed: int = 0
    mode: str = field(default="multiplicative")

    def __post_init__(self):
        if self.percent < 0:
            raise ValueError("noise level must be nonnegative")
        if self.mode not in ("multiplicative", "additive_max"):
            raise ValueError(f"unknown noise mode {self.mode!r}")


def add_noise(data: MeasurementSet, spec: NoiseSpec) -> MeasurementSet:
    """Relative Gaussian noise: I* (1 + p eta), eta ~ N(0, 1) seeded.

    ``spec.percent`` is a fraction (0.01 for 1%).  The ``additive_max`` mode
    adds p * max|I*| * eta instead.
    """
    if spec.percent == 0:
        return MeasurementSet(data.base_drives, data.targets.copy(), data.weights.copy(), data.num_rotations)
    eta = np.random.default_rng(spec.seed).standard_normal(data.targets.shape)
    if spec.mode == "multiplicative":
        noisy = data.targets * (1.0 + spec.percent * eta)
    else:
        noisy = data.targets + spec.percent * np.abs(data.targets).max() * eta
    return MeasurementSet(data.base_drives, noisy, data.weights.copy(), data.num_rotations)
