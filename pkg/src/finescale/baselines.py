"""Reference predictors: exact block kriging, naive point kriging, local kriging.

These are comparison baselines, not production paths: they use dense
covariance matrices over the observed coarse cells (guarded in size) and an
exponential covariance family. The block ("change of support") predictor
averages point covariances over the fine cells inside each coarse cell; the
naive predictor treats coarse values as point data at cell centroids.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import (
    FitFailureError,
    InvalidArgumentError,
    NoNeighborsError,
    TooLargeError,
)
from .variogram import empirical_semivariogram, fit_exponential_wls

DENSE_BASELINE_MAX_M = 5000
_TARGET_CHUNK = 1024


@dataclass(frozen=True)
class ExponentialCovSpec:
    """c(h) = sigma2 * exp(-h / rho) with an additive nugget at h = 0."""

    sigma2: float
    rho: float
    nugget: float = 0.0

    def __post_init__(self):
        if self.sigma2 <= 0 or self.rho <= 0 or self.nugget < 0:
            raise InvalidArgumentError("covariance parameters out of range")

    def __call__(self, d):
        return self.sigma2 * np.exp(-np.asarray(d, dtype=float) / self.rho)


def ek_predict(spec, agg, y_tilde, x_design, beta, grid, targets=None):
    """Block kriging with known parameters and known trend coefficients.

    Cross-covariances between a fine cell and a coarse cell average the
    point covariance over the coarse cell's members (plus the appropriate
    share of the nugget when the target belongs to that cell); coarse-coarse
    covariances average over both members. The predictor is the conditional
    mean under the joint Gaussian with the supplied beta treated as known.
    """
    y_tilde = np.asarray(y_tilde, dtype=float)
    beta = np.asarray(beta, dtype=float)
    x = np.asarray(x_design, dtype=float)
    m = agg.m
    if m > DENSE_BASELINE_MAX_M:
        raise TooLargeError(f"block kriging limited to M <= {DENSE_BASELINE_MAX_M}")
    if targets is None:
        targets = np.arange(grid.n)
    targets = np.asarray(targets)
    pts = grid.centroids
    a_csr = agg.matrix.tocsr()
    a_csc = agg.matrix.tocsc()

    # C_cc = A C_ff A^T assembled in row chunks of C_ff, plus the aggregated nugget
    c_cc = np.zeros((m, m))
    for lo in range(0, grid.n, _TARGET_CHUNK):
        hi = min(lo + _TARGET_CHUNK, grid.n)
        block = spec(cdist(pts[lo:hi], pts))  # chunk x N
        c_cc += np.asarray(a_csc[:, lo:hi].todense()) @ (block @ a_csr.T)
    c_cc[np.diag_indices(m)] += spec.nugget * agg.diag_aat

    resid = y_tilde - agg.matrix @ (x @ beta)
    try:
        alpha = np.linalg.solve(c_cc, resid)
    except np.linalg.LinAlgError as exc:
        raise FitFailureError(f"coarse covariance singular: {exc}") from exc

    pred = np.empty(targets.size)
    cell_of = agg.bau_to_cell
    for lo in range(0, targets.size, _TARGET_CHUNK):
        sel = targets[lo : lo + _TARGET_CHUNK]
        cross = spec(cdist(pts[sel], pts)) @ a_csr.T  # chunk x M
        owned = cell_of[sel]
        has = owned >= 0
        if np.any(has):
            cross[np.nonzero(has)[0], owned[has]] += spec.nugget * agg.diag_aat[owned[has]]
        pred[lo : lo + sel.size] = x[sel] @ beta + cross @ alpha
    return pred


def estimate_point_spec(values, locations, x_design=None, n_bins=15):
    """Exponential covariance parameters from a detrended empirical semivariogram."""
    values = np.asarray(values, dtype=float)
    if x_design is not None:
        x = np.asarray(x_design, dtype=float)
        coef, _, _, _ = np.linalg.lstsq(x, values, rcond=None)
        resid = values - x @ coef
    else:
        resid = values - values.mean()
    bins = empirical_semivariogram(resid, locations, n_bins=n_bins)
    fit = fit_exponential_wls(bins)
    return ExponentialCovSpec(
        sigma2=max(fit.partial_sill, 1e-12), rho=fit.range_param, nugget=fit.nugget
    )


def pk_predict(spec, coarse_xy, y_tilde, x_coarse, targets_xy, x_targets):
    """Universal kriging treating coarse values as point data at cell centroids.

    Pass spec=None to estimate the exponential parameters by weighted least
    squares on the detrended coarse data first.
    """
    y_tilde = np.asarray(y_tilde, dtype=float)
    coarse_xy = np.asarray(coarse_xy, dtype=float)
    m = coarse_xy.shape[0]
    if m > DENSE_BASELINE_MAX_M:
        raise TooLargeError(f"point kriging limited to M <= {DENSE_BASELINE_MAX_M}")
    if spec is None:
        spec = estimate_point_spec(y_tilde, coarse_xy, x_design=x_coarse)
    x_o = np.asarray(x_coarse, dtype=float)
    x_t = np.asarray(x_targets, dtype=float)
    c_oo = spec(cdist(coarse_xy, coarse_xy))
    c_oo[np.diag_indices(m)] += spec.nugget
    try:
        ci = np.linalg.inv(c_oo)
    except np.linalg.LinAlgError as exc:
        raise FitFailureError(f"observation covariance singular: {exc}") from exc
    gram = x_o.T @ ci @ x_o
    beta = np.linalg.solve(gram, x_o.T @ (ci @ y_tilde))
    alpha = ci @ (y_tilde - x_o @ beta)
    targets_xy = np.asarray(targets_xy, dtype=float)
    pred = np.empty(targets_xy.shape[0])
    for lo in range(0, targets_xy.shape[0], _TARGET_CHUNK):
        sel = slice(lo, min(lo + _TARGET_CHUNK, targets_xy.shape[0]))
        pred[sel] = x_t[sel] @ beta + spec(cdist(targets_xy[sel], coarse_xy)) @ alpha
    return pred


def ordinary_krige(values, locations, targets, spec):
    """Ordinary kriging (locally constant unknown mean) at the target points."""
    values = np.asarray(values, dtype=float)
    locations = np.asarray(locations, dtype=float)
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    n = values.size
    c = spec(cdist(locations, locations))
    c[np.diag_indices(n)] += spec.nugget
    aug = np.zeros((n + 1, n + 1))
    aug[:n, :n] = c
    aug[n, :n] = 1.0
    aug[:n, n] = 1.0
    rhs = np.ones((n + 1, targets.shape[0]))
    rhs[:n] = spec(cdist(locations, targets))
    try:
        lam = np.linalg.solve(aug, rhs)
    except np.linalg.LinAlgError as exc:
        raise FitFailureError(f"kriging system singular: {exc}") from exc
    return lam[:n].T @ values


def local_krige(
    values,
    obs_ids,
    grid,
    target_ids,
    window=6,
    expand=4,
    fit_per_window=True,
    global_spec=None,
    n_bins=8,
):
    """Moving-window ordinary kriging on a regular lattice.

    For each target cell, observations inside a window x window pixel box
    centered on the target are kriged with an exponential covariance fitted
    to that window's empirical semivariogram (falling back to a global fit
    when the local fit fails). Windows with fewer than three observations
    are widened once by `expand` pixels per side, then raise NoNeighborsError.

    Returns (predictions, info) where info counts per-window fit fallbacks.
    """
    if grid.nx is None or grid.ny is None:
        raise InvalidArgumentError("local kriging requires a regular lattice grid")
    values = np.asarray(values, dtype=float)
    obs_ids = np.asarray(obs_ids)
    target_ids = np.asarray(target_ids)
    index_grid = np.full(grid.nx * grid.ny, -1, dtype=np.int64)
    index_grid[obs_ids] = np.arange(obs_ids.size)
    index_grid = index_grid.reshape(grid.ny, grid.nx)
    pts = grid.centroids

    if global_spec is None and fit_per_window:
        global_spec = _safe_global_spec(values, pts[obs_ids])
    if global_spec is None and not fit_per_window:
        raise InvalidArgumentError("fit_per_window=False requires global_spec")

    pred = np.empty(target_ids.size)
    fallbacks = 0
    for t_pos, tid in enumerate(target_ids):
        ix = int(tid % grid.nx)
        iy = int(tid // grid.nx)
        local_idx = _window_obs(index_grid, ix, iy, window, grid)
        if local_idx.size < 3:
            local_idx = _window_obs(index_grid, ix, iy, window + 2 * expand, grid)
            if local_idx.size < 3:
                raise NoNeighborsError(
                    f"target {int(tid)} has {local_idx.size} observations after expansion"
                )
        w_vals = values[local_idx]
        w_pts = pts[obs_ids[local_idx]]
        spec = global_spec
        if fit_per_window:
            try:
                bins = empirical_semivariogram(w_vals, w_pts, n_bins=n_bins)
                fit = fit_exponential_wls(bins)
                spec = ExponentialCovSpec(
                    sigma2=max(fit.partial_sill, 1e-12),
                    rho=fit.range_param,
                    nugget=fit.nugget,
                )
            except Exception:
                fallbacks += 1
                spec = global_spec
        if spec is None:
            raise FitFailureError("no usable covariance fit for local kriging")
        pred[t_pos] = ordinary_krige(w_vals, w_pts, pts[tid][None, :], spec)[0]
    return pred, {"n_fallbacks": fallbacks}


def _safe_global_spec(values, locations):
    try:
        return estimate_point_spec(values, locations)
    except Exception:
        return None


def _window_obs(index_grid, ix, iy, window, grid):
    half = window // 2
    x0 = min(max(ix - half, 0), max(grid.nx - window, 0))
    y0 = min(max(iy - half, 0), max(grid.ny - window, 0))
    block = index_grid[y0 : y0 + window, x0 : x0 + window].ravel()
    return block[block >= 0]
