"""Grids, partitions, neighborhood graphs, and the aggregation operator.

The fine resolution is a set of N basic areal units (BAUs) identified by
dense integer ids 0..N-1 in a fixed row-major order, so every matrix built
here is reproducible bit-for-bit. A coarse partition assigns each BAU to
exactly one of M coarse cells; the aggregation operator is the sparse
row-stochastic M x N matrix averaging BAU values within each coarse cell.
"""

import csv
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import FormatError, InvalidArgumentError, InvalidPartitionError

EARTH_RADIUS_KM = 6371.0

EUCLIDEAN = "euclidean"
GREAT_CIRCLE = "great-circle"


@dataclass(frozen=True)
class BAUGrid:
    """Fine-resolution lattice or point set.

    centroids are (N, 2) coordinates: (x, y) for euclidean grids or
    (lon, lat) in degrees for spherical ones. nx/ny are set only for
    regular lattices built by build_regular_lattice.
    """

    centroids: np.ndarray
    metric: str = EUCLIDEAN
    bounds: tuple | None = None  # (xmin, xmax, ymin, ymax)
    nx: int | None = None
    ny: int | None = None

    def __post_init__(self):
        c = np.asarray(self.centroids, dtype=float)
        if c.ndim != 2 or c.shape[1] != 2 or c.shape[0] < 1:
            raise InvalidArgumentError("centroids must be a non-empty (N, 2) array")
        object.__setattr__(self, "centroids", c)
        if self.metric not in (EUCLIDEAN, GREAT_CIRCLE):
            raise InvalidArgumentError(f"unknown metric {self.metric!r}")
        if self.metric == GREAT_CIRCLE and np.any(np.abs(c[:, 1]) > 90.0):
            raise InvalidArgumentError("latitudes must lie in [-90, 90]")
        if self.bounds is not None:
            xmin, xmax, ymin, ymax = self.bounds
            inside = (
                (c[:, 0] >= xmin) & (c[:, 0] <= xmax) & (c[:, 1] >= ymin) & (c[:, 1] <= ymax)
            )
            if not np.all(inside):
                raise InvalidArgumentError("centroids fall outside domain bounds")

    @property
    def n(self):
        return self.centroids.shape[0]

    @cached_property
    def median_nn_distance(self):
        """Median nearest-neighbor distance between centroids."""
        pts = _embed(self.centroids, self.metric)
        tree = cKDTree(pts)
        dd, _ = tree.query(pts, k=2)
        med = float(np.median(dd[:, 1]))
        if self.metric == GREAT_CIRCLE:
            med = _chord_to_arc(med)
        return med


@dataclass(frozen=True)
class CoarseGrid:
    """Partition of the BAUs into M coarse cells (unique association)."""

    assignments: np.ndarray  # length N, values in [0, M)
    m: int
    mx: int | None = None
    my: int | None = None

    def __post_init__(self):
        a = np.asarray(self.assignments)
        if a.ndim != 1 or a.size < 1:
            raise InvalidPartitionError("assignments must be a non-empty vector")
        if np.any(a < 0) or np.any(a >= self.m):
            raise InvalidPartitionError("assignment ids must lie in [0, M)")
        counts = np.bincount(a, minlength=self.m)
        if np.any(counts == 0):
            raise InvalidPartitionError("every coarse cell must contain at least one BAU")
        object.__setattr__(self, "assignments", np.asarray(a, dtype=np.int64))

    @cached_property
    def cells(self):
        """List of BAU-id arrays, one per coarse cell."""
        order = np.argsort(self.assignments, kind="stable")
        bounds = np.searchsorted(self.assignments[order], np.arange(self.m + 1))
        return [order[bounds[i] : bounds[i + 1]] for i in range(self.m)]

    @cached_property
    def cell_sizes(self):
        return np.bincount(self.assignments, minlength=self.m)


@dataclass(frozen=True)
class AggregationMatrix:
    """Sparse M x N row-stochastic matrix averaging BAUs into coarse cells."""

    matrix: sp.csr_matrix
    cell_sizes: np.ndarray

    @property
    def m(self):
        return self.matrix.shape[0]

    @property
    def n(self):
        return self.matrix.shape[1]

    @cached_property
    def diag_aat(self):
        """Diagonal of A A^T (equals 1/n_i under unique association)."""
        return 1.0 / self.cell_sizes.astype(float)

    @cached_property
    def bau_to_cell(self):
        """Coarse-cell index of each BAU."""
        coo = self.matrix.tocoo()
        out = np.full(self.n, -1, dtype=np.int64)
        out[coo.col] = coo.row
        return out

    def restrict(self, rows):
        """Aggregation matrix for a subset of coarse cells (e.g. observed ones)."""
        rows = np.asarray(rows)
        return AggregationMatrix(
            matrix=sp.csr_matrix(self.matrix[rows]), cell_sizes=self.cell_sizes[rows]
        )


@dataclass(frozen=True)
class ProximityMatrix:
    """Sparse symmetric 0/1 adjacency with zero diagonal."""

    matrix: sp.csr_matrix
    order: int = 1

    def __post_init__(self):
        h = self.matrix
        if (h != h.T).nnz != 0:
            raise InvalidArgumentError("proximity matrix must be symmetric")
        if h.diagonal().any():
            raise InvalidArgumentError("proximity matrix must have a zero diagonal")

    @property
    def n(self):
        return self.matrix.shape[0]


def build_regular_lattice(bounds, nx, ny, metric=EUCLIDEAN):
    """Regular nx-by-ny lattice of cell-center BAUs over a rectangle.

    Row-major ordering: id = iy * nx + ix with x varying fastest.
    """
    if nx < 1 or ny < 1:
        raise InvalidArgumentError("nx and ny must be >= 1")
    xmin, xmax, ymin, ymax = bounds
    if not (xmax > xmin and ymax > ymin):
        raise InvalidArgumentError("bounds must be non-degenerate")
    dx = (xmax - xmin) / nx
    dy = (ymax - ymin) / ny
    xs = xmin + dx * (np.arange(nx) + 0.5)
    ys = ymin + dy * (np.arange(ny) + 0.5)
    gx, gy = np.meshgrid(xs, ys)
    centroids = np.column_stack([gx.ravel(), gy.ravel()])
    return BAUGrid(centroids=centroids, metric=metric, bounds=tuple(bounds), nx=nx, ny=ny)


def build_coarse_partition(grid, factor_x, factor_y):
    """Block partition of a regular lattice into (nx/factor_x) x (ny/factor_y) cells."""
    if grid.nx is None or grid.ny is None:
        raise InvalidArgumentError("block partitions require a regular lattice")
    if factor_x < 1 or factor_y < 1:
        raise InvalidArgumentError("factors must be >= 1")
    if grid.nx % factor_x or grid.ny % factor_y:
        raise InvalidArgumentError(
            f"lattice {grid.nx}x{grid.ny} not divisible by factors ({factor_x}, {factor_y})"
        )
    mx = grid.nx // factor_x
    my = grid.ny // factor_y
    ix = np.arange(grid.n) % grid.nx
    iy = np.arange(grid.n) // grid.nx
    assignments = (iy // factor_y) * mx + (ix // factor_x)
    return CoarseGrid(assignments=assignments, m=mx * my, mx=mx, my=my)


def build_aggregation_matrix(grid, coarse):
    """Aggregation matrix with a_ij = 1/n_i when BAU j lies in cell i, else 0."""
    if coarse.assignments.size != grid.n:
        raise InvalidPartitionError("partition does not cover the grid exactly once")
    n = grid.n
    rows = coarse.assignments
    cols = np.arange(n)
    sizes = coarse.cell_sizes
    vals = 1.0 / sizes[rows].astype(float)
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(coarse.m, n))
    return AggregationMatrix(matrix=mat, cell_sizes=np.asarray(sizes))


def aggregate(agg, y_fine):
    """Block-average a fine field: returns A @ y_fine."""
    y = np.asarray(y_fine, dtype=float)
    if y.shape[0] != agg.n:
        raise InvalidArgumentError(f"expected length {agg.n}, got {y.shape[0]}")
    return agg.matrix @ y


def build_proximity(grid, order=1, threshold=None):
    """Neighborhood graph: rook adjacency on lattices, distance threshold otherwise.

    For irregular grids the default threshold is 1.5x the median
    nearest-centroid distance, scaled by `order`.
    """
    if order < 1:
        raise InvalidArgumentError("order must be >= 1")
    n = grid.n
    if grid.nx is not None and grid.ny is not None and threshold is None:
        ix = np.arange(n) % grid.nx
        iy = np.arange(n) // grid.nx
        rows, cols = [], []
        # neighbors within `order` steps of Manhattan distance
        offsets = [
            (ox, oy)
            for ox in range(-order, order + 1)
            for oy in range(-order, order + 1)
            if 0 < abs(ox) + abs(oy) <= order
        ]
        for ox, oy in offsets:
            jx = ix + ox
            jy = iy + oy
            ok = (jx >= 0) & (jx < grid.nx) & (jy >= 0) & (jy < grid.ny)
            rows.append(np.nonzero(ok)[0])
            cols.append(jy[ok] * grid.nx + jx[ok])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        mat = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
    else:
        if threshold is None:
            threshold = order * 1.5 * grid.median_nn_distance
        pts = _embed(grid.centroids, grid.metric)
        radius = _arc_to_chord(threshold) if grid.metric == GREAT_CIRCLE else threshold
        tree = cKDTree(pts)
        pairs = tree.query_pairs(r=radius, output_type="ndarray")
        if pairs.size:
            rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
            cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
            mat = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n))
        else:
            mat = sp.csr_matrix((n, n))
    mat.data[:] = 1.0
    return ProximityMatrix(matrix=mat, order=order)


def distance(s1, s2, metric=EUCLIDEAN):
    """Distance between two locations; great-circle uses haversine in km."""
    p1 = np.asarray(s1, dtype=float)
    p2 = np.asarray(s2, dtype=float)
    if metric == EUCLIDEAN:
        return float(np.hypot(p1[0] - p2[0], p1[1] - p2[1]))
    if metric == GREAT_CIRCLE:
        for p in (p1, p2):
            if abs(p[1]) > 90.0:
                raise InvalidArgumentError("latitude out of [-90, 90]")
        return float(_haversine(p1[None, :], p2[None, :])[0])
    raise InvalidArgumentError(f"unknown metric {metric!r}")


def distances_to(point, points, metric=EUCLIDEAN):
    """Distances from one location to many."""
    pts = np.asarray(points, dtype=float)
    p = np.asarray(point, dtype=float)
    if metric == EUCLIDEAN:
        return np.hypot(pts[:, 0] - p[0], pts[:, 1] - p[1])
    return _haversine(p[None, :], pts)


def _haversine(a, b):
    lon1, lat1 = np.radians(a[:, 0]), np.radians(a[:, 1])
    lon2, lat2 = np.radians(b[:, 0]), np.radians(b[:, 1])
    s = (
        np.sin((lat2 - lat1) / 2.0) ** 2
        + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    )
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(s, 0.0, 1.0)))


def _embed(centroids, metric):
    """Coordinates for KD-tree queries: 3-D unit-sphere points for spherical grids."""
    if metric == EUCLIDEAN:
        return centroids
    lon = np.radians(centroids[:, 0])
    lat = np.radians(centroids[:, 1])
    return EARTH_RADIUS_KM * np.column_stack(
        [np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)]
    )


def _arc_to_chord(arc):
    return 2.0 * EARTH_RADIUS_KM * np.sin(np.minimum(arc / (2.0 * EARTH_RADIUS_KM), np.pi / 2))


def _chord_to_arc(chord):
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.clip(chord / (2.0 * EARTH_RADIUS_KM), 0.0, 1.0))


def load_bau_grid(path):
    """Read a BAU grid CSV with header ``id,x,y`` or ``id,lon,lat``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty file", line=1) from None
        cols = [c.strip().lower() for c in header]
        if cols == ["id", "x", "y"]:
            metric = EUCLIDEAN
        elif cols == ["id", "lon", "lat"]:
            metric = GREAT_CIRCLE
        else:
            raise FormatError(f"unrecognized header {header!r}", line=1)
        ids, xs, ys = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise FormatError(f"expected 3 fields, got {len(row)}", line=lineno)
            try:
                ids.append(int(row[0]))
                xs.append(float(row[1]))
                ys.append(float(row[2]))
            except ValueError as exc:
                raise FormatError(str(exc), line=lineno) from None
    if not ids:
        raise FormatError("no data rows", line=2)
    ids = np.asarray(ids)
    n = ids.size
    if np.unique(ids).size != n:
        raise FormatError("duplicate BAU ids")
    if ids.min() != 0 or ids.max() != n - 1:
        raise FormatError("BAU ids must be dense in [0, N)")
    order = np.argsort(ids)
    centroids = np.column_stack([np.asarray(xs)[order], np.asarray(ys)[order]])
    return BAUGrid(centroids=centroids, metric=metric)


def save_bau_grid(grid, path):
    """Write a BAU grid CSV (inverse of load_bau_grid)."""
    header = ("id", "x", "y") if grid.metric == EUCLIDEAN else ("id", "lon", "lat")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, (x, y) in enumerate(grid.centroids):
            writer.writerow([i, repr(float(x)), repr(float(y))])


def load_partition(path, grid):
    """Read a partition CSV with header ``bau_id,coarse_id``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty file", line=1) from None
        if [c.strip().lower() for c in header] != ["bau_id", "coarse_id"]:
            raise FormatError(f"unrecognized header {header!r}", line=1)
        baus, cells = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                baus.append(int(row[0]))
                cells.append(int(row[1]))
            except (ValueError, IndexError) as exc:
                raise FormatError(str(exc), line=lineno) from None
    baus = np.asarray(baus)
    cells = np.asarray(cells)
    if np.unique(baus).size != baus.size:
        raise InvalidPartitionError("a BAU appears in more than one coarse cell")
    if baus.size != grid.n or baus.min() != 0 or baus.max() != grid.n - 1:
        raise InvalidPartitionError("partition must assign every BAU exactly once")
    assignments = np.empty(grid.n, dtype=np.int64)
    assignments[baus] = cells
    uniq = np.unique(cells)
    if uniq.min() != 0 or uniq.max() != uniq.size - 1:
        # compress coarse ids to a dense range, preserving ascending order
        remap = {int(c): i for i, c in enumerate(uniq)}
        assignments = np.asarray([remap[int(c)] for c in assignments])
    return CoarseGrid(assignments=assignments, m=int(np.unique(assignments).size))


def save_partition(coarse, path):
    """Write a partition CSV (inverse of load_partition)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("bau_id", "coarse_id"))
        for bau, cell in enumerate(coarse.assignments):
            writer.writerow([bau, int(cell)])
