"""Compactly-supported radial basis functions and their evaluation matrices.

Each basis function is a Wendland-type bump (1 - d/r)^4 on d <= r around a
center, so evaluation matrices are sparse: a location contributes only to
the columns whose support contains it. Support queries go through a KD-tree
(3-D chord embedding for spherical grids).
"""

import csv
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.spatial import cKDTree

from .errors import EmptyBasisError, FormatError, InvalidArgumentError
from .geometry import EUCLIDEAN, GREAT_CIRCLE, _arc_to_chord, _embed, distances_to


@dataclass(frozen=True)
class BasisFunction:
    center: tuple
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise InvalidArgumentError("bandwidth must be positive")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))


@dataclass(frozen=True)
class BasisSet:
    """Ordered collection of basis functions; column order is part of the model."""

    functions: tuple

    def __post_init__(self):
        if len(self.functions) < 1:
            raise EmptyBasisError("basis set must contain at least one function")
        object.__setattr__(self, "functions", tuple(self.functions))

    @property
    def r(self):
        return len(self.functions)

    @property
    def centers(self):
        return np.asarray([f.center for f in self.functions], dtype=float)

    @property
    def bandwidths(self):
        return np.asarray([f.bandwidth for f in self.functions], dtype=float)

    def extend(self, extra):
        return BasisSet(functions=self.functions + tuple(extra))


def wendland(u, f, metric=EUCLIDEAN):
    """Evaluate one basis function at a location: (1 - d/r)^4 on d <= r."""
    d = distances_to(f.center, np.asarray(u, dtype=float)[None, :], metric)[0]
    if d >= f.bandwidth:
        return 0.0
    return float((1.0 - d / f.bandwidth) ** 4)


def eval_basis_matrix(basis, locations, metric=EUCLIDEAN):
    """Sparse evaluation matrix with entry (i, j) = basis_j(location_i)."""
    locations = np.asarray(locations, dtype=float)
    if locations.ndim != 2 or locations.shape[0] < 1:
        raise InvalidArgumentError("locations must be a non-empty (n, 2) array")
    pts = _embed(locations, metric)
    tree = cKDTree(pts)
    rows, cols, vals = [], [], []
    for j, f in enumerate(basis.functions):
        center = _embed(np.asarray(f.center, dtype=float)[None, :], metric)[0]
        radius = _arc_to_chord(f.bandwidth) if metric == GREAT_CIRCLE else f.bandwidth
        idx = tree.query_ball_point(center, r=radius)
        if not idx:
            continue
        idx = np.asarray(sorted(idx))
        d = distances_to(f.center, locations[idx], metric)
        inside = d < f.bandwidth
        idx = idx[inside]
        if idx.size:
            rows.append(idx)
            cols.append(np.full(idx.size, j))
            vals.append((1.0 - d[inside] / f.bandwidth) ** 4)
    if rows:
        mat = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(locations.shape[0], basis.r),
        )
    else:
        mat = sp.csr_matrix((locations.shape[0], basis.r))
    return mat


def place_equally_spaced(bounds, per_resolution_counts, bandwidth_factor=1.5):
    """Multiresolution equally-spaced basis over a rectangle.

    For each count k, centers form a k x k cell-center grid and the shared
    bandwidth is bandwidth_factor times the shortest inter-center distance
    at that resolution (the grid step); a 1 x 1 resolution gets the domain
    half-diagonal since it has no neighbor distance.
    """
    xmin, xmax, ymin, ymax = bounds
    if not (xmax > xmin and ymax > ymin):
        raise InvalidArgumentError("bounds must be non-degenerate")
    funcs = []
    for k in per_resolution_counts:
        if k < 1:
            raise InvalidArgumentError("resolution counts must be >= 1")
        dx = (xmax - xmin) / k
        dy = (ymax - ymin) / k
        xs = xmin + dx * (np.arange(k) + 0.5)
        ys = ymin + dy * (np.arange(k) + 0.5)
        if k == 1:
            bw = 0.5 * float(np.hypot(xmax - xmin, ymax - ymin))
        else:
            bw = bandwidth_factor * min(dx, dy)
        for y in ys:
            for x in xs:
                funcs.append(BasisFunction(center=(x, y), bandwidth=bw))
    return BasisSet(functions=tuple(funcs))


def prune_sparse_data_basis(basis, obs_locations, min_obs, metric=EUCLIDEAN):
    """Drop basis functions whose support holds fewer than min_obs observations."""
    if min_obs < 0:
        raise InvalidArgumentError("min_obs must be >= 0")
    if min_obs == 0:
        return basis
    obs = np.asarray(obs_locations, dtype=float)
    tree = cKDTree(_embed(obs, metric))
    kept = []
    for f in basis.functions:
        center = _embed(np.asarray(f.center, dtype=float)[None, :], metric)[0]
        radius = _arc_to_chord(f.bandwidth) if metric == GREAT_CIRCLE else f.bandwidth
        idx = tree.query_ball_point(center, r=radius)
        count = int(
            np.sum(distances_to(f.center, obs[idx], metric) < f.bandwidth)
        ) if idx else 0
        if count >= min_obs:
            kept.append(f)
    if not kept:
        raise EmptyBasisError("pruning removed every basis function")
    return BasisSet(functions=tuple(kept))


def save_basis(basis, path):
    """Write a basis CSV with header ``center_x,center_y,bandwidth``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("center_x", "center_y", "bandwidth"))
        for f in basis.functions:
            writer.writerow([repr(f.center[0]), repr(f.center[1]), repr(f.bandwidth)])


def load_basis(path):
    """Read a basis CSV written by save_basis."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty file", line=1) from None
        if [c.strip().lower() for c in header] != ["center_x", "center_y", "bandwidth"]:
            raise FormatError(f"unrecognized header {header!r}", line=1)
        funcs = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                funcs.append(
                    BasisFunction(center=(float(row[0]), float(row[1])), bandwidth=float(row[2]))
                )
            except (ValueError, IndexError) as exc:
                raise FormatError(str(exc), line=lineno) from None
    if not funcs:
        raise FormatError("no basis functions in file", line=2)
    return BasisSet(functions=tuple(funcs))
