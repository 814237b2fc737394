"""Image grids, 2D scan geometries and the Siddon system matrix.

The system matrix ``A`` is assembled once per (grid, geometry) pair as a
``scipy.sparse`` CSR matrix whose entries are exact ray/pixel intersection
lengths.  Forward projection is ``A @ x`` and back projection is ``A.T @ y``,
so the pair is matched (exactly adjoint) by construction.

Coordinates: pixel ``(row, col)`` of an ``(ny, nx)`` array sits at
``x = (col - (nx - 1) / 2) * dx + offset_x`` and
``y = (row - (ny - 1) / 2) * dy + offset_y`` (millimetres).
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

MU_WATER = 0.02  # 1/mm; maps to 1000 HU


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """A 2D attenuation image (1/mm) with pixel spacing and HU metadata.

    ``values`` has shape ``(ny, nx)``.  HU are ``hu_slope * att + hu_intercept``;
    the default puts water at 1000 HU and air at 0.
    """

    nx: int
    ny: int
    dx: float = 1.0
    dy: float = 1.0
    offset_x: float = 0.0
    offset_y: float = 0.0
    values: np.ndarray | None = None
    hu_slope: float = 1000.0 / MU_WATER
    hu_intercept: float = 0.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"grid size must be positive, got {self.ny}x{self.nx}")
        if not (self.dx > 0 and self.dy > 0):
            raise ValueError("pixel spacing must be positive")
        if self.hu_slope == 0:
            raise ValueError("hu_slope must be nonzero")
        vals = self.values
        if vals is None:
            vals = np.zeros((self.ny, self.nx))
        vals = np.asarray(vals, dtype=np.float64)
        if vals.size != self.nx * self.ny:
            raise ValueError(f"values has {vals.size} entries, grid needs {self.nx * self.ny}")
        object.__setattr__(self, "values", vals.reshape(self.ny, self.nx))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def n_pixels(self) -> int:
        return self.nx * self.ny

    def hu(self, att=None) -> np.ndarray:
        """Attenuation to HU (defaults to this grid's values)."""
        att = self.values if att is None else np.asarray(att, dtype=np.float64)
        return self.hu_slope * att + self.hu_intercept

    def att(self, hu) -> np.ndarray:
        """HU to attenuation (1/mm)."""
        return (np.asarray(hu, dtype=np.float64) - self.hu_intercept) / self.hu_slope

    def with_values(self, values) -> "ImageGrid":
        return ImageGrid(self.nx, self.ny, self.dx, self.dy, self.offset_x, self.offset_y,
                         np.asarray(values, dtype=np.float64).reshape(self.ny, self.nx),
                         self.hu_slope, self.hu_intercept)

    def like(self) -> "ImageGrid":
        """Same geometry, zero values."""
        return self.with_values(np.zeros(self.shape))

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(X, Y)`` coordinate arrays of shape ``(ny, nx)``."""
        xs = (np.arange(self.nx) - (self.nx - 1) / 2) * self.dx + self.offset_x
        ys = (np.arange(self.ny) - (self.ny - 1) / 2) * self.dy + self.offset_y
        return np.meshgrid(xs, ys)

    def key(self) -> tuple:
        return (self.nx, self.ny, float(self.dx), float(self.dy),
                float(self.offset_x), float(self.offset_y))


@dataclass(frozen=True, eq=False)
class ScanGeometry:
    """Parallel- or fan-beam 2D scan.

    Parallel beam: view ``theta`` integrates along direction
    ``(-sin theta, cos theta)``; detector bin ``k`` sits at
    ``u_k = (k - (n_det - 1) / 2) * det_spacing`` along ``(cos theta, sin theta)``.

    Fan beam (flat detector): the source is at ``source_to_iso * (cos, sin)``
    of the view angle, the detector centre at distance ``source_to_det`` from
    the source on the opposite side, bins spaced along ``(-sin, cos)``.
    """

    kind: str
    angles: np.ndarray
    n_det: int
    det_spacing: float = 1.0
    source_to_iso: float | None = None
    source_to_det: float | None = None

    def __post_init__(self):
        if self.kind not in ("parallel", "fan"):
            raise ValueError(f"unknown geometry kind {self.kind!r}")
        angles = np.asarray(self.angles, dtype=np.float64).ravel()
        if angles.size < 1:
            raise ValueError("need at least one view")
        if angles.size > 1 and np.any(np.diff(angles) <= 0):
            raise ValueError("angles must be strictly increasing")
        if angles[-1] - angles[0] >= 2 * np.pi:
            raise ValueError("angular span must be < 2*pi")
        if self.n_det < 1 or not self.det_spacing > 0:
            raise ValueError("invalid detector specification")
        if self.kind == "fan":
            if self.source_to_iso is None or self.source_to_det is None:
                raise ValueError("fan beam needs source_to_iso and source_to_det")
            if not 0 < self.source_to_iso < self.source_to_det:
                raise ValueError("need 0 < source_to_iso < source_to_det")
        angles.setflags(write=False)
        object.__setattr__(self, "angles", angles)

    @classmethod
    def parallel(cls, n_views: int, n_det: int, det_spacing: float = 1.0,
                 span: float = np.pi, start: float = 0.0) -> "ScanGeometry":
        """Equally spaced views over ``[start, start + span)``."""
        angles = start + np.arange(n_views) * (span / n_views)
        return cls("parallel", angles, n_det, det_spacing)

    @classmethod
    def fan(cls, n_views: int, n_det: int, det_spacing: float, source_to_iso: float,
            source_to_det: float, span: float = 2 * np.pi, start: float = 0.0) -> "ScanGeometry":
        angles = start + np.arange(n_views) * (span / n_views)
        return cls("fan", angles, n_det, det_spacing, source_to_iso, source_to_det)

    @property
    def n_views(self) -> int:
        return self.angles.size

    @property
    def n_rays(self) -> int:
        return self.n_views * self.n_det

    @property
    def det_positions(self) -> np.ndarray:
        return (np.arange(self.n_det) - (self.n_det - 1) / 2) * self.det_spacing

    def ray_endpoints(self, half_length: float) -> tuple[np.ndarray, ...]:
        """Start/end points ``(x0, y0, x1, y1)`` of every ray, view-major.

        ``half_length`` must exceed the grid's half diagonal for parallel
        beams so that each segment crosses the whole field of view.
        """
        c = np.cos(self.angles)[:, None]
        s = np.sin(self.angles)[:, None]
        u = self.det_positions[None, :]
        if self.kind == "parallel":
            px, py = u * c, u * s
            x0, y0 = px + half_length * s, py - half_length * c
            x1, y1 = px - half_length * s, py + half_length * c
        else:
            r_iso, r_det = self.source_to_iso, self.source_to_det
            x0 = np.broadcast_to(r_iso * c, (self.n_views, self.n_det))
            y0 = np.broadcast_to(r_iso * s, (self.n_views, self.n_det))
            x1 = (r_iso - r_det) * c - u * s
            y1 = (r_iso - r_det) * s + u * c
        return tuple(np.ascontiguousarray(a, dtype=np.float64).ravel() for a in (x0, y0, x1, y1))

    def key(self) -> tuple:
        return (self.kind, self.angles.tobytes(), self.n_det, float(self.det_spacing),
                self.source_to_iso, self.source_to_det)


@dataclass(frozen=True, eq=False)
class Sinogram:
    """Post-log line integrals ``values`` and statistical weights ``weights``.

    Both arrays have shape ``(n_views, n_det)``.
    """

    geometry: ScanGeometry
    values: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        shape = (self.geometry.n_views, self.geometry.n_det)
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.size != self.geometry.n_rays:
            raise ValueError(f"sinogram has {vals.size} entries, geometry needs {self.geometry.n_rays}")
        wts = np.ones(shape) if self.weights is None else np.asarray(self.weights, dtype=np.float64)
        if wts.size != vals.size:
            raise ValueError("weights and values differ in length")
        if not np.all(np.isfinite(wts)) or np.any(wts < 0):
            raise ValueError("weights must be finite and nonnegative")
        object.__setattr__(self, "values", vals.reshape(shape))
        object.__setattr__(self, "weights", wts.reshape(shape))


@dataclass(frozen=True)
class SubsetPartition:
    """Disjoint view subsets visited in ``view_lists`` order."""

    view_lists: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        allv = [v for lst in self.view_lists for v in lst]
        if len(set(allv)) != len(allv):
            raise ValueError("subsets overlap")
        if sorted(allv) != list(range(len(allv))):
            raise ValueError("subsets must cover all views")
        sizes = [len(lst) for lst in self.view_lists]
        if min(sizes) < 1 or max(sizes) - min(sizes) > 1:
            raise ValueError("subset sizes must be nonzero and differ by at most 1")

    @property
    def M(self) -> int:
        return len(self.view_lists)

    @classmethod
    def bit_reversal(cls, n_views: int, M: int) -> "SubsetPartition":
        """Interleaved subsets ``{m, m + M, ...}`` visited in bit-reversed order of ``m``."""
        if not 1 <= M <= n_views:
            raise ValueError(f"need 1 <= M <= n_views, got M={M}")
        return cls(tuple(tuple(range(m, n_views, M)) for m in bit_reversal_order(M)))


def bit_reversal_order(M: int) -> list[int]:
    """Bit-reversal permutation of ``range(M)``; out-of-range values skipped."""
    bits = max(1, (M - 1).bit_length())
    order = [int(format(i, f"0{bits}b")[::-1], 2) for i in range(1 << bits)]
    return [i for i in order if i < M]


# --------------------------------------------------------------------------
# Siddon ray tracing
# --------------------------------------------------------------------------

@numba.njit(cache=True)
def _trace(x0, y0, x1, y1, xmin, ymin, dx, dy, nx, ny, idx, val):
    """Write (pixel, length) pairs of one ray into idx/val; return count."""
    ddx = x1 - x0
    ddy = y1 - y0
    length = np.sqrt(ddx * ddx + ddy * ddy)
    if length == 0.0:
        return 0
    xmax = xmin + nx * dx
    ymax = ymin + ny * dy
    amin = 0.0
    amax = 1.0
    if ddx != 0.0:
        a0 = (xmin - x0) / ddx
        a1 = (xmax - x0) / ddx
        amin = max(amin, min(a0, a1))
        amax = min(amax, max(a0, a1))
    elif x0 <= xmin or x0 >= xmax:
        return 0
    if ddy != 0.0:
        a0 = (ymin - y0) / ddy
        a1 = (ymax - y0) / ddy
        amin = max(amin, min(a0, a1))
        amax = min(amax, max(a0, a1))
    elif y0 <= ymin or y0 >= ymax:
        return 0
    if amax <= amin:
        return 0

    # next plane crossings along x and y
    if ddx > 0:
        i = int(np.floor((x0 + amin * ddx - xmin) / dx)) + 1
        ax = (xmin + i * dx - x0) / ddx
        dax = dx / ddx
    elif ddx < 0:
        i = int(np.ceil((x0 + amin * ddx - xmin) / dx)) - 1
        ax = (xmin + i * dx - x0) / ddx
        dax = -dx / ddx
    else:
        ax = np.inf
        dax = np.inf
    if ddy > 0:
        j = int(np.floor((y0 + amin * ddy - ymin) / dy)) + 1
        ay = (ymin + j * dy - y0) / ddy
        day = dy / ddy
    elif ddy < 0:
        j = int(np.ceil((y0 + amin * ddy - ymin) / dy)) - 1
        ay = (ymin + j * dy - y0) / ddy
        day = -dy / ddy
    else:
        ay = np.inf
        day = np.inf
    # guard against crossings sitting exactly on the entry point
    while ax <= amin:
        ax += dax
    while ay <= amin:
        ay += day

    n = 0
    acur = amin
    while acur < amax:
        anext = min(ax, ay, amax)
        seg = (anext - acur) * length
        if seg > 0.0:
            amid = 0.5 * (acur + anext)
            col = int(np.floor((x0 + amid * ddx - xmin) / dx))
            row = int(np.floor((y0 + amid * ddy - ymin) / dy))
            if 0 <= col < nx and 0 <= row < ny:
                idx[n] = row * nx + col
                val[n] = seg
                n += 1
        if anext == ax:
            ax += dax
        if anext == ay:
            ay += day
        acur = anext
    return n


@numba.njit(cache=True)
def _siddon_counts(x0, y0, x1, y1, xmin, ymin, dx, dy, nx, ny):
    nray = x0.size
    counts = np.zeros(nray, dtype=np.int64)
    idx = np.empty(nx + ny + 4, dtype=np.int64)
    val = np.empty(nx + ny + 4, dtype=np.float64)
    for r in range(nray):
        counts[r] = _trace(x0[r], y0[r], x1[r], y1[r], xmin, ymin, dx, dy, nx, ny, idx, val)
    return counts


@numba.njit(cache=True)
def _siddon_fill(x0, y0, x1, y1, xmin, ymin, dx, dy, nx, ny, indptr, indices, data):
    idx = np.empty(nx + ny + 4, dtype=np.int64)
    val = np.empty(nx + ny + 4, dtype=np.float64)
    for r in range(x0.size):
        n = _trace(x0[r], y0[r], x1[r], y1[r], xmin, ymin, dx, dy, nx, ny, idx, val)
        start = indptr[r]
        # sort by pixel index so CSR rows are canonical
        order = np.argsort(idx[:n])
        for k in range(n):
            indices[start + k] = idx[order[k]]
            data[start + k] = val[order[k]]


@numba.njit(cache=True)
def _siddon_apply(x0, y0, x1, y1, xmin, ymin, dx, dy, nx, ny, image, sino, adjoint):
    idx = np.empty(nx + ny + 4, dtype=np.int64)
    val = np.empty(nx + ny + 4, dtype=np.float64)
    for r in range(x0.size):
        n = _trace(x0[r], y0[r], x1[r], y1[r], xmin, ymin, dx, dy, nx, ny, idx, val)
        order = np.argsort(idx[:n])
        if adjoint:
            for k in range(n):
                image[idx[order[k]]] += val[order[k]] * sino[r]
        else:
            acc = 0.0
            for k in range(n):
                acc += val[order[k]] * image[idx[order[k]]]
            sino[r] = acc


def _ray_args(grid: ImageGrid, geom: ScanGeometry):
    xmin = grid.offset_x - grid.nx * grid.dx / 2
    ymin = grid.offset_y - grid.ny * grid.dy / 2
    half_diag = np.hypot(grid.nx * grid.dx, grid.ny * grid.dy) / 2
    reach = half_diag + np.hypot(grid.offset_x, grid.offset_y) + geom.det_spacing * geom.n_det
    return geom.ray_endpoints(reach) + (xmin, ymin, float(grid.dx), float(grid.dy), grid.nx, grid.ny)


def siddon_apply(grid: ImageGrid, geom: ScanGeometry, data, adjoint: bool = False) -> np.ndarray:
    """Matrix-free Siddon projection (``adjoint=True`` back-projects ``data``).

    Uses the same ray traversal and summation order as :func:`siddon_matrix`,
    without storing the matrix; meant for one-shot projections on fine grids.
    """
    args = _ray_args(grid, geom)
    if adjoint:
        sino = np.ascontiguousarray(data, dtype=np.float64).ravel()
        if sino.size != geom.n_rays:
            raise ValueError(f"sinogram has {sino.size} entries, expected {geom.n_rays}")
        image = np.zeros(grid.n_pixels)
    else:
        image = np.ascontiguousarray(data, dtype=np.float64).ravel()
        if image.size != grid.n_pixels:
            raise ValueError(f"image has {image.size} pixels, expected {grid.n_pixels}")
        if not np.all(np.isfinite(image)):
            raise ValueError("image contains non-finite values")
        sino = np.zeros(geom.n_rays)
    if not np.any(_siddon_counts(*args)):
        raise ValueError("empty field of view: no ray intersects the image grid")
    _siddon_apply(*args, image, sino, adjoint)
    return image.reshape(grid.shape) if adjoint else sino.reshape(geom.n_views, geom.n_det)


def siddon_matrix(grid: ImageGrid, geom: ScanGeometry) -> sp.csr_matrix:
    """Assemble the ``(n_rays, n_pixels)`` Siddon system matrix."""
    x0, y0, x1, y1, *rest = _ray_args(grid, geom)
    args = tuple(rest)
    counts = _siddon_counts(x0, y0, x1, y1, *args)
    indptr = np.zeros(counts.size + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    nnz = int(indptr[-1])
    if nnz == 0:
        raise ValueError("empty field of view: no ray intersects the image grid")
    indices = np.empty(nnz, dtype=np.int64)
    data = np.empty(nnz, dtype=np.float64)
    _siddon_fill(x0, y0, x1, y1, *args, indptr, indices, data)
    index_dtype = np.int32 if max(nnz, grid.n_pixels) < 2**31 else np.int64
    return sp.csr_matrix((data, indices.astype(index_dtype), indptr.astype(index_dtype)),
                         shape=(geom.n_rays, grid.n_pixels))


class Projector:
    """Matched forward/back projector for one grid and geometry.

    Args:
        grid: image grid (only its geometry is used).
        geom: scan geometry.
        matrix: optional explicit ``(n_rays, n_pixels)`` system matrix; used
            for degenerate test geometries such as ``A = I``.
    """

    def __init__(self, grid: ImageGrid, geom: ScanGeometry, matrix=None):
        self.grid = grid
        self.geom = geom
        if matrix is None:
            self.A = siddon_matrix(grid, geom)
        else:
            self.A = sp.csr_matrix(matrix, dtype=np.float64)
            if self.A.shape != (geom.n_rays, grid.n_pixels):
                raise ValueError(f"matrix shape {self.A.shape} does not match geometry")
        self.AT = self.A.T  # CSC view, no copy
        self._subsets = {}

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def sino_shape(self) -> tuple[int, int]:
        return (self.geom.n_views, self.geom.n_det)

    def forward(self, image) -> np.ndarray:
        x = np.asarray(image, dtype=np.float64)
        if x.size != self.grid.n_pixels:
            raise ValueError(f"image has {x.size} pixels, expected {self.grid.n_pixels}")
        if not np.all(np.isfinite(x)):
            raise ValueError("image contains non-finite values")
        return (self.A @ x.ravel()).reshape(self.sino_shape)

    def back(self, sino) -> np.ndarray:
        y = np.asarray(sino, dtype=np.float64)
        if y.size != self.geom.n_rays:
            raise ValueError(f"sinogram has {y.size} entries, expected {self.geom.n_rays}")
        return (self.AT @ y.ravel()).reshape(self.image_shape)

    def subsets(self, partition: SubsetPartition) -> "OrderedSubsets":
        key = partition.view_lists
        if key not in self._subsets:
            self._subsets[key] = OrderedSubsets(self, partition)
        return self._subsets[key]

    def subset_forward(self, image, m: int, partition: SubsetPartition) -> np.ndarray:
        return self.subsets(partition).forward(image, m)

    def subset_back(self, sino_m, m: int, partition: SubsetPartition) -> np.ndarray:
        return self.subsets(partition).back(sino_m, m)

    def column_sums(self) -> np.ndarray:
        """``sum_i a_ij`` per pixel."""
        return self.back(np.ones(self.sino_shape))


class OrderedSubsets:
    """Row blocks ``A_m`` of the system matrix, one per subset of views.

    The subset blocks share no storage with the parent matrix; for ``M=1``
    the parent matrices are reused directly.
    """

    def __init__(self, projector: Projector, partition: SubsetPartition):
        if sum(len(v) for v in partition.view_lists) != projector.geom.n_views:
            raise ValueError("partition does not match the geometry's view count")
        self.projector = projector
        self.partition = partition
        n_det = projector.geom.n_det
        self.views = [np.asarray(v, dtype=np.int64) for v in partition.view_lists]
        self.rows = [(v[:, None] * n_det + np.arange(n_det)).ravel() for v in self.views]
        if partition.M == 1 and np.array_equal(self.views[0], np.arange(projector.geom.n_views)):
            self.blocks = [projector.A]
            self.blocks_T = [projector.AT]
        else:
            self.blocks = [projector.A[r] for r in self.rows]
            self.blocks_T = [b.T for b in self.blocks]

    @property
    def M(self) -> int:
        return self.partition.M

    def _check(self, m):
        if not 0 <= m < self.M:
            raise IndexError(f"subset index {m} out of range for M={self.M}")

    def forward(self, image, m: int) -> np.ndarray:
        """``A_m x`` with shape ``(len(views_m), n_det)``."""
        self._check(m)
        x = np.asarray(image, dtype=np.float64).ravel()
        return (self.blocks[m] @ x).reshape(len(self.views[m]), -1)

    def back(self, sino_m, m: int) -> np.ndarray:
        """``A_m^T y_m`` for a subset-shaped sinogram block."""
        self._check(m)
        y = np.asarray(sino_m, dtype=np.float64).ravel()
        if y.size != self.blocks[m].shape[0]:
            raise ValueError("subset sinogram has the wrong length")
        return (self.blocks_T[m] @ y).reshape(self.projector.image_shape)

    def split(self, sino) -> list[np.ndarray]:
        """Restrict a full ``(n_views, n_det)`` array to each subset."""
        s = np.asarray(sino, dtype=np.float64).reshape(self.projector.sino_shape)
        return [s[v] for v in self.views]


def forward_project(grid: ImageGrid, geom: ScanGeometry) -> np.ndarray:
    """Line integrals of ``grid.values`` along every ray, shape ``(n_views, n_det)``."""
    return siddon_apply(grid, geom, grid.values)


def back_project(sino, geom: ScanGeometry, grid: ImageGrid) -> np.ndarray:
    """Adjoint of :func:`forward_project` onto ``grid``'s geometry."""
    return siddon_apply(grid, geom, sino, adjoint=True)


def build_DA(projector: Projector, weights) -> np.ndarray:
    """Diagonal majorizer ``diag{A^T W A 1}`` of ``A^T W A`` as an image."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    return projector.back(w.reshape(projector.sino_shape) * projector.forward(np.ones(projector.image_shape)))
