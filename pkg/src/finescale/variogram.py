"""Empirical semivariograms and weighted least-squares exponential fits.

The exponential model is gamma(h) = nugget + psill * (1 - exp(-h / rho)).
Fitting minimizes the pair-count-weighted relative objective
sum_k n_k * (gamma_hat_k / gamma_model(h_k) - 1)^2, and the effective range
is the distance at which the model reaches 95% of its total sill
(nugget + partial sill).
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .errors import FitFailureError, InsufficientDataError, UndefinedRangeError
from .geometry import EUCLIDEAN, _haversine


@dataclass(frozen=True)
class SemivariogramFit:
    nugget: float
    partial_sill: float
    range_param: float

    def __post_init__(self):
        if not (
            np.isfinite(self.nugget)
            and np.isfinite(self.partial_sill)
            and np.isfinite(self.range_param)
        ):
            raise FitFailureError("fit parameters must be finite")
        if self.nugget < 0 or self.partial_sill < 0 or self.range_param <= 0:
            raise FitFailureError("fit parameters out of range")

    def __call__(self, h):
        h = np.asarray(h, dtype=float)
        return self.nugget + self.partial_sill * (1.0 - np.exp(-h / self.range_param))


def empirical_semivariogram(values, locations, n_bins=15, max_dist=None, metric=EUCLIDEAN):
    """Binned semivariogram estimate.

    Returns a list of (mean lag, gamma_hat, pair count) with empty bins
    omitted; gamma_hat is half the mean squared difference over pairs whose
    distance falls in the bin (0 < d <= max_dist).
    """
    values = np.asarray(values, dtype=float)
    locations = np.asarray(locations, dtype=float)
    n = values.size
    if n < 2:
        raise InsufficientDataError("need at least two points")
    if n_bins < 1:
        raise InsufficientDataError("need at least one bin")
    if max_dist is None:
        span = locations.max(axis=0) - locations.min(axis=0)
        max_dist = 0.5 * float(np.hypot(span[0], span[1]))
        if max_dist <= 0:
            max_dist = 1.0
    iu, ju = np.triu_indices(n, k=1)
    if metric == EUCLIDEAN:
        diff = locations[iu] - locations[ju]
        d = np.hypot(diff[:, 0], diff[:, 1])
    else:
        d = _haversine(locations[iu], locations[ju])
    keep = (d > 0) & (d <= max_dist)
    d = d[keep]
    sq = 0.5 * (values[iu[keep]] - values[ju[keep]]) ** 2
    edges = np.linspace(0.0, max_dist, n_bins + 1)
    which = np.clip(np.searchsorted(edges, d, side="right") - 1, 0, n_bins - 1)
    out = []
    for b in range(n_bins):
        mask = which == b
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        out.append((float(d[mask].mean()), float(sq[mask].mean()), cnt))
    return out


def fit_exponential_wls(points):
    """Fit the exponential model to semivariogram bins by weighted least squares.

    `points` is a sequence of (lag, gamma_hat, pair_count). Weights are the
    pair counts; the objective is relative (gamma_hat / model - 1). Nugget
    and partial sill are box-constrained at zero.
    """
    pts = [(float(h), float(g), float(c)) for h, g, c in points]
    pts = [p for p in pts if p[2] > 0]
    if len(pts) < 3:
        raise FitFailureError("need at least three non-empty bins")
    h = np.asarray([p[0] for p in pts])
    g = np.asarray([p[1] for p in pts])
    w = np.asarray([p[2] for p in pts])
    if np.all(g <= 0):
        raise FitFailureError("all semivariogram values are zero")
    scale = float(g.max())
    gs = g / scale

    def resid(x):
        nugget, psill, rho = x
        model = nugget + psill * (1.0 - np.exp(-h / rho))
        model = np.maximum(model, 1e-12)
        return np.sqrt(w) * (gs / model - 1.0)

    tail = float(np.mean(gs[max(len(gs) // 2, 1) :]))
    x0 = np.array([max(gs[0] * 0.5, 1e-6), max(tail - gs[0] * 0.5, 1e-3), h.max() / 3.0])
    lower = np.array([0.0, 1e-12, h.max() * 1e-6])
    upper = np.array([np.inf, np.inf, h.max() * 1e3])
    try:
        sol = least_squares(resid, np.clip(x0, lower, upper), bounds=(lower, upper))
    except Exception as exc:  # pragma: no cover - scipy failures are rare
        raise FitFailureError(f"optimizer failed: {exc}") from exc
    if not np.all(np.isfinite(sol.x)):
        raise FitFailureError("optimizer returned non-finite parameters")
    nugget, psill, rho = sol.x
    return SemivariogramFit(
        nugget=float(nugget * scale), partial_sill=float(psill * scale), range_param=float(rho)
    )


def effective_range(fit, sill_fraction=0.95):
    """Distance at which the model reaches sill_fraction of (nugget + psill).

    Closed form for the exponential model; clipped below at zero (a large
    nugget can satisfy the threshold already at h = 0).
    """
    if fit.partial_sill <= 0:
        raise UndefinedRangeError("effective range undefined for zero partial sill")
    arg = (1.0 - sill_fraction) * (1.0 + fit.nugget / fit.partial_sill)
    if arg >= 1.0:
        return 0.0
    return float(-fit.range_param * np.log(arg))


def fit_exponential_wls_batched(lags, gammas, counts, n_rho=24, n_irls=3):
    """Vectorized exponential WLS fits for many semivariograms at once.

    Used by the basis-selection scan where thousands of local fits per
    iteration make per-candidate optimizer calls too slow. For each row the
    range is searched over a log-spaced grid (relative to that row's largest
    lag) and (nugget, psill) solved in closed form under iteratively
    reweighted least squares approximating the relative WLS objective.

    Parameters are (C, B) arrays; rows with fewer than three non-empty bins
    or all-zero gammas are reported invalid. Returns arrays
    (nugget, psill, rho, valid).
    """
    lags = np.asarray(lags, dtype=float)
    gammas = np.asarray(gammas, dtype=float)
    counts = np.asarray(counts, dtype=float)
    c_count, _ = lags.shape
    have = counts > 0
    valid = (have.sum(axis=1) >= 3) & (np.nanmax(np.where(have, gammas, 0.0), axis=1) > 0)

    scale = np.where(valid, np.max(np.where(have, gammas, 0.0), axis=1), 1.0)
    gs = np.where(have, gammas / scale[:, None], 0.0)
    w0 = np.where(have, counts, 0.0)
    maxlag = np.max(np.where(have, lags, 0.0), axis=1)
    maxlag = np.where(maxlag > 0, maxlag, 1.0)

    rho_frac = np.exp(np.linspace(np.log(0.05), np.log(3.0), n_rho))
    rho = maxlag[:, None] * rho_frac[None, :]  # (C, J)
    # model shape term m = 1 - exp(-h / rho): (C, B, J)
    m = 1.0 - np.exp(-lags[:, :, None] / rho[:, None, :])
    m = np.where(have[:, :, None], m, 0.0)

    nug = np.zeros((c_count, n_rho))
    psl = np.full((c_count, n_rho), 1.0)
    w = np.repeat(w0[:, :, None], n_rho, axis=2)
    for _ in range(n_irls):
        model = np.maximum(nug[:, None, :] + psl[:, None, :] * m, 1e-10)
        w = np.where(have[:, :, None], w0[:, :, None] / model**2, 0.0)
        a = w.sum(axis=1)
        b = (w * m).sum(axis=1)
        d = (w * m * m).sum(axis=1)
        e = (w * gs[:, :, None]).sum(axis=1)
        f = (w * gs[:, :, None] * m).sum(axis=1)
        det = a * d - b * b
        safe = det > 1e-300
        nug = np.where(safe, (e * d - f * b) / np.where(safe, det, 1.0), 0.0)
        psl = np.where(safe, (a * f - b * e) / np.where(safe, det, 1.0), 0.0)
        # enforce the zero boxes by refitting the free coordinate
        neg_p = psl < 0
        nug = np.where(neg_p, e / np.maximum(a, 1e-300), nug)
        psl = np.where(neg_p, 0.0, psl)
        neg_n = nug < 0
        psl = np.where(neg_n, f / np.maximum(d, 1e-300), psl)
        nug = np.where(neg_n, 0.0, nug)
        psl = np.maximum(psl, 0.0)
        nug = np.maximum(nug, 0.0)

    model = np.maximum(nug[:, None, :] + psl[:, None, :] * m, 1e-10)
    obj = np.where(
        have[:, :, None], w0[:, :, None] * (gs[:, :, None] / model - 1.0) ** 2, 0.0
    ).sum(axis=1)
    obj = np.where(psl > 0, obj, np.inf)
    best = np.argmin(obj, axis=1)
    rows = np.arange(c_count)
    out_n = nug[rows, best] * scale
    out_p = psl[rows, best] * scale
    out_r = rho[rows, best]
    valid &= np.isfinite(obj[rows, best]) & (out_p > 0)
    return out_n, out_p, out_r, valid
