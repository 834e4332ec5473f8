"""Forward, data-driven selection of basis-function centers and bandwidths.

Each iteration fits the low-rank model with the current basis, forms
pseudo-residuals at the data locations, runs a local semivariogram scan over
a fixed candidate set to get a per-candidate effective range d(s), scores
each candidate by the empirical local mean squared error (local residual
variance plus squared local mean over the d(s)-neighborhood), and adds the
worst-scoring candidates subject to a pairwise separation rule. New
bandwidths equal the candidate's effective range. The loop stops at a basis
budget or when the score cutoff stabilizes.

Works identically for point observations and coarse-cell data: residual
locations are the rows of A applied to the fine-cell centroids, which gives
observation points in the first case and coarse-cell centroids in the second.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .basis import BasisFunction, eval_basis_matrix
from .errors import (
    FitFailureError,
    InsufficientNeighborsError,
    InvalidArgumentError,
    SelectionAbortedError,
)
from .estimation import EmConfig, fit_em
from .geometry import EUCLIDEAN, GREAT_CIRCLE, _chord_to_arc, _embed
from .model import FRK
from .variogram import effective_range, fit_exponential_wls_batched

_VARIOGRAM_BINS = 15
_MAX_PAIR_POINTS = 280  # cap on points entering a local variogram's pair set


@dataclass(frozen=True)
class SelectionConfig:
    candidate_centers: np.ndarray
    r_max: int
    cutoff_quantile: float = 0.90
    elmse_tolerance: float = 0.01
    separation_fraction: float = 2.0 / 3.0
    first_pass_radius: float | None = None  # default: 10% of the domain diameter
    range_cap: float | None = None  # default: 50% of the domain diameter
    max_iterations: int = 50

    def __post_init__(self):
        object.__setattr__(
            self, "candidate_centers", np.asarray(self.candidate_centers, dtype=float)
        )
        if self.candidate_centers.ndim != 2 or self.candidate_centers.shape[0] < 1:
            raise InvalidArgumentError("candidate_centers must be a non-empty (n, 2) array")
        if not 0.0 < self.cutoff_quantile < 1.0:
            raise InvalidArgumentError("cutoff_quantile must be in (0, 1)")
        if self.elmse_tolerance <= 0 or self.separation_fraction <= 0:
            raise InvalidArgumentError("tolerances must be positive")
        if self.r_max < 1:
            raise InvalidArgumentError("r_max must be >= 1")


@dataclass
class SelectionTrace:
    """Per-iteration diagnostics of the forward loop."""

    iterations: list = field(default_factory=list)
    stopped_reason: str = ""
    final_r: int = 0

    def record(self, cutoff, elmse_values, added, n_skipped):
        vals = np.asarray(elmse_values, dtype=float)
        quartiles = (
            [float(q) for q in np.quantile(vals, [0.25, 0.5, 0.75])] if vals.size else []
        )
        self.iterations.append(
            {
                "iteration": len(self.iterations) + 1,
                "cutoff": float(cutoff) if np.isfinite(cutoff) else None,
                "elmse_quartiles": quartiles,
                "n_candidates_scored": int(vals.size),
                "n_skipped": int(n_skipped),
                "added": [
                    {"x": float(c[0]), "y": float(c[1]), "bandwidth": float(b)}
                    for c, b in added
                ],
            }
        )

    @property
    def cutoffs(self):
        return [it["cutoff"] for it in self.iterations]

    def to_json(self, indent=None):
        return json.dumps(
            {
                "iterations": self.iterations,
                "stopped_reason": self.stopped_reason,
                "final_r": self.final_r,
            },
            indent=indent,
        )


def pseudo_residuals(fitted, y_obs, agg, x_design):
    """Observation-level residuals after removing trend and basis contributions."""
    y_obs = np.asarray(y_obs, dtype=float)
    ws = fitted.solver.ws
    if y_obs.shape[0] != ws.m:
        raise InvalidArgumentError("observation vector does not match the fitted model")
    ax_beta = ws.agg.matrix @ (np.asarray(x_design, dtype=float) @ fitted.params.beta)
    return y_obs - ax_beta - ws.as_mat @ fitted.moments.mu_eta


def elmse(residuals, locations, center, radius, metric=EUCLIDEAN):
    """Local variance plus squared local mean of residuals within `radius`.

    Raises InsufficientNeighborsError with fewer than two neighbors.
    """
    residuals = np.asarray(residuals, dtype=float)
    pts = _embed(np.asarray(locations, dtype=float), metric)
    c = _embed(np.asarray(center, dtype=float)[None, :], metric)[0]
    r_query = radius
    if metric == GREAT_CIRCLE:
        from .geometry import _arc_to_chord

        r_query = _arc_to_chord(radius)
    tree = cKDTree(pts)
    idx = tree.query_ball_point(c, r=r_query)
    if len(idx) < 2:
        raise InsufficientNeighborsError(f"{len(idx)} neighbors within radius {radius}")
    vals = residuals[np.asarray(idx)]
    return float(np.var(vals, ddof=1) + np.mean(vals) ** 2)


def select_new_centers(
    candidates, elmse_values, cutoff, ranges, separation_fraction=2.0 / 3.0, metric=EUCLIDEAN
):
    """Greedy separated selection of high-score candidates.

    Candidates with score >= cutoff are scanned in descending score order
    (ties broken by candidate index); one is accepted only if its distance
    to every center already accepted this call is at least
    separation_fraction * max(d_accepted, d_candidate). Accepted bandwidths
    are the candidates' own effective ranges.
    """
    candidates = np.asarray(candidates, dtype=float)
    elmse_values = np.asarray(elmse_values, dtype=float)
    ranges = np.asarray(ranges, dtype=float)
    keep = elmse_values >= cutoff
    if not np.any(keep):
        return [], []
    order = np.argsort(-elmse_values, kind="stable")
    order = order[keep[order]]
    emb = _embed(candidates, metric)
    accepted = []
    for i in order:
        ok = True
        for j in accepted:
            dist = float(np.linalg.norm(emb[i] - emb[j]))
            if metric == GREAT_CIRCLE:
                dist = _chord_to_arc(dist)
            if dist < separation_fraction * max(ranges[j], ranges[i]):
                ok = False
                break
        if ok:
            accepted.append(i)
    return [candidates[i] for i in accepted], [float(ranges[i]) for i in accepted]


def _local_variogram_scan(resid, locations, candidates, radii, metric):
    """Binned local semivariograms around each candidate, fitted in one batch.

    Returns (nugget, psill, rho, valid). Neighbor sets are capped at the
    nearest _MAX_PAIR_POINTS points to bound the pairwise work.
    """
    pts = _embed(locations, metric)
    cands = _embed(candidates, metric)
    tree = cKDTree(pts)
    n_cand = candidates.shape[0]
    radii = np.broadcast_to(np.asarray(radii, dtype=float), (n_cand,))
    query_r = radii
    if metric == GREAT_CIRCLE:
        from .geometry import _arc_to_chord

        query_r = _arc_to_chord(radii)
    neighbor_lists = tree.query_ball_point(cands, r=query_r)
    lags = np.zeros((n_cand, _VARIOGRAM_BINS))
    gammas = np.zeros((n_cand, _VARIOGRAM_BINS))
    counts = np.zeros((n_cand, _VARIOGRAM_BINS))
    for c in range(n_cand):
        idx = np.asarray(neighbor_lists[c], dtype=np.int64)
        if idx.size < 4:
            continue
        local = pts[idx]
        if idx.size > _MAX_PAIR_POINTS:
            d_c = np.linalg.norm(local - cands[c], axis=1)
            nearest = np.argsort(d_c, kind="stable")[:_MAX_PAIR_POINTS]
            idx = idx[nearest]
            local = pts[idx]
        vals = resid[idx]
        diff = local[:, None, :] - local[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        iu, ju = np.triu_indices(idx.size, k=1)
        pd = d[iu, ju]
        if metric == GREAT_CIRCLE:
            pd = _chord_to_arc(pd)
        sq = 0.5 * (vals[iu] - vals[ju]) ** 2
        ok = pd > 0
        pd, sq = pd[ok], sq[ok]
        if pd.size == 0:
            continue
        edges = np.linspace(0.0, radii[c], _VARIOGRAM_BINS + 1)
        which = np.clip(np.searchsorted(edges, pd, side="right") - 1, 0, _VARIOGRAM_BINS - 1)
        in_range = pd <= radii[c]
        which, pd, sq = which[in_range], pd[in_range], sq[in_range]
        if pd.size == 0:
            continue
        cnt = np.bincount(which, minlength=_VARIOGRAM_BINS)
        lag_sum = np.bincount(which, weights=pd, minlength=_VARIOGRAM_BINS)
        sq_sum = np.bincount(which, weights=sq, minlength=_VARIOGRAM_BINS)
        nz = cnt > 0
        lags[c, nz] = lag_sum[nz] / cnt[nz]
        gammas[c, nz] = sq_sum[nz] / cnt[nz]
        counts[c] = cnt
    return fit_exponential_wls_batched(lags, gammas, counts)


def forward_select(
    y_obs,
    agg,
    x_design,
    bau_locations,
    initial_basis,
    sigma2_eps,
    config,
    metric=EUCLIDEAN,
    em_config=None,
):
    """Run the forward selection loop; returns (BasisSet, SelectionTrace).

    y_obs are the observed values (coarse cells or observed fine cells), agg
    maps the fine grid to them, and the basis is evaluated on the fine-cell
    centroids. Candidates failing the neighborhood or local-fit requirements
    are skipped and counted in the trace.
    """
    y_obs = np.asarray(y_obs, dtype=float)
    bau_locations = np.asarray(bau_locations, dtype=float)
    if em_config is None:
        em_config = EmConfig(max_iter=200)
    basis = initial_basis
    trace = SelectionTrace()
    resid_locations = agg.matrix @ bau_locations  # centroids of the observation supports
    span = resid_locations.max(axis=0) - resid_locations.min(axis=0)
    diameter = float(np.hypot(span[0], span[1]))
    if diameter <= 0:
        raise InvalidArgumentError("degenerate observation geometry")
    first_radius = config.first_pass_radius or 0.10 * diameter
    range_cap = config.range_cap or 0.50 * diameter
    nn = _median_nn(resid_locations, metric)
    range_floor = 2.0 * nn
    prev_cutoff = None

    while True:
        s_mat = eval_basis_matrix(basis, bau_locations, metric=metric)
        try:
            fitted = fit_em(
                FRK, y_obs, agg, x_design, s_mat, sigma2_eps, config=em_config
            )
        except Exception as exc:
            trace.stopped_reason = f"fit-failure: {exc}"
            trace.final_r = basis.r
            raise SelectionAbortedError(str(exc), trace=trace) from exc
        resid = pseudo_residuals(fitted, y_obs, agg, x_design)

        cands = config.candidate_centers
        n0, p0, r0, valid1 = _local_variogram_scan(
            resid, resid_locations, cands, first_radius, metric
        )
        d1 = _clipped_ranges(n0, p0, r0, valid1, range_floor, range_cap)
        n1, p1, r1, valid2 = _local_variogram_scan(resid, resid_locations, cands, d1, metric)
        valid = valid1 & valid2
        d2 = _clipped_ranges(n1, p1, r1, valid2, range_floor, range_cap)

        scores = np.full(cands.shape[0], -np.inf)
        tree = cKDTree(_embed(resid_locations, metric))
        emb_c = _embed(cands, metric)
        query_r = d2
        if metric == GREAT_CIRCLE:
            from .geometry import _arc_to_chord

            query_r = _arc_to_chord(d2)
        hoods = tree.query_ball_point(emb_c, r=query_r)
        for c in range(cands.shape[0]):
            if not valid[c]:
                continue
            idx = hoods[c]
            if len(idx) < 2:
                valid[c] = False
                continue
            vals = resid[np.asarray(idx)]
            scores[c] = float(np.var(vals, ddof=1) + np.mean(vals) ** 2)
        n_skipped = int(np.sum(~valid))
        scored = scores[valid]
        if scored.size == 0:
            trace.record(np.nan, scored, [], n_skipped)
            trace.stopped_reason = "no scoreable candidates"
            break
        cutoff = float(np.quantile(scored, config.cutoff_quantile))

        if basis.r >= config.r_max:
            trace.record(cutoff, scored, [], n_skipped)
            trace.stopped_reason = "basis budget reached"
            break
        if prev_cutoff is not None and abs(cutoff - prev_cutoff) <= config.elmse_tolerance:
            trace.record(cutoff, scored, [], n_skipped)
            trace.stopped_reason = "cutoff stabilized"
            break

        sel_centers, sel_ranges = select_new_centers(
            cands[valid],
            scores[valid],
            cutoff,
            d2[valid],
            separation_fraction=config.separation_fraction,
            metric=metric,
        )
        room = config.r_max - basis.r
        if len(sel_centers) > room:
            sel_centers = sel_centers[:room]  # scan order is descending score
            sel_ranges = sel_ranges[:room]
        added = list(zip(sel_centers, sel_ranges))
        trace.record(cutoff, scored, added, n_skipped)
        if added:
            basis = basis.extend(
                BasisFunction(center=tuple(c), bandwidth=b) for c, b in added
            )
        prev_cutoff = cutoff
        if basis.r >= config.r_max:
            trace.stopped_reason = "basis budget reached"
            break
        if not added:
            trace.stopped_reason = "no candidates passed the separation rule"
            break
        if len(trace.iterations) >= config.max_iterations:
            trace.stopped_reason = "iteration cap"
            break

    trace.final_r = basis.r
    return basis, trace


def _clipped_ranges(nugget, psill, rho, valid, floor, cap):
    out = np.full(rho.shape, floor)
    for i in range(rho.size):
        if not valid[i]:
            continue
        try:
            fit_range = effective_range_from_values(nugget[i], psill[i], rho[i])
        except Exception:
            valid[i] = False
            continue
        out[i] = float(np.clip(fit_range, floor, cap))
    return out


def effective_range_from_values(nugget, psill, rho):
    """Effective range from raw exponential parameters (95% of total sill)."""
    if psill <= 0:
        raise FitFailureError("zero partial sill")
    arg = 0.05 * (1.0 + nugget / psill)
    if arg >= 1.0:
        return 0.0
    return float(-rho * np.log(arg))
