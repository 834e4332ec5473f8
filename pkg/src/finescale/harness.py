"""Experiment orchestration: synthetic data, pipelines, scoring, file output.

Every pipeline draws all randomness from one experiment seed through named
stage streams (simulate / holdout / fit / sample / select), so a run is
reproducible from its manifest alone. Files are written atomically
(temp-then-rename) with 17-significant-digit floats so outputs round-trip
and are byte-stable across repeated runs; wall-clock timings go to a
separate non-deterministic file.
"""

import csv
import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from joblib import Parallel, delayed
from scipy.linalg import blas as _blas
from scipy.linalg import cholesky as _dense_cholesky
from scipy.spatial.distance import cdist
from threadpoolctl import threadpool_limits

from . import basis as basis_mod
from . import geometry as geom
from .baselines import ExponentialCovSpec, ek_predict, local_krige, pk_predict
from .downscale import aggregation_residual, conditional_moments, ensemble
from .errors import FormatError, InvalidArgumentError, TooLargeError
from .estimation import EmConfig, compute_bic, fit_em
from .geometry import AggregationMatrix, aggregate, build_aggregation_matrix
from .model import FGP, FRK
from .selection import SelectionConfig, forward_select

GEN_GP_MAX_N = 20000

_STAGES = {"simulate": 0, "holdout": 1, "fit": 2, "sample": 3, "select": 4}


def stage_rng(seed, stage):
    """Named reproducible sub-stream of the experiment seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_STAGES[stage],)))


# -- synthetic data -----------------------------------------------------------


def gen_synthetic_gp(spec, beta, grid, rng, x_design=None):
    """Exact draw of a Gaussian field with exponential covariance plus nugget.

    Dense Cholesky of the N x N covariance; refuses N > 20000 (a circulant
    embedding sampler would be needed beyond that and is out of scope).
    """
    n = grid.n
    if n > GEN_GP_MAX_N:
        raise TooLargeError(
            f"exact simulation limited to N <= {GEN_GP_MAX_N}; "
            "larger grids need a circulant-embedding sampler (not provided)"
        )
    pts = grid.centroids
    if x_design is None:
        x_design = np.column_stack([np.ones(n), pts])
    beta = np.asarray(beta, dtype=float)
    cov = np.empty((n, n))
    chunk = 2048
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        cov[lo:hi] = spec(cdist(pts[lo:hi], pts))
    cov[np.diag_indices(n)] += spec.nugget
    chol = _dense_cholesky(cov, lower=True, overwrite_a=True, check_finite=False)
    z = rng.standard_normal(n)
    # triangular matvec touches only the factor's lower triangle
    w = _blas.dtrmv(chol, z, lower=1, trans=0)
    return np.asarray(x_design, dtype=float) @ beta + w


def deterministic_surface(points):
    """The two-bump test surface 50 x exp(-x^2 - y^2)."""
    pts = np.asarray(points, dtype=float)
    return 50.0 * pts[:, 0] * np.exp(-pts[:, 0] ** 2 - pts[:, 1] ** 2)


def gen_deterministic_surface(grid, noise_fraction, rng):
    """Surface plus white noise with variance noise_fraction * var(surface).

    Returns (noisy field, noiseless surface, noise variance).
    """
    f = deterministic_surface(grid.centroids)
    sigma2_eps = float(noise_fraction * np.var(f))
    noisy = f + np.sqrt(sigma2_eps) * rng.standard_normal(grid.n)
    return noisy, f, sigma2_eps


def make_holdout(grid, block, random_fraction, rng):
    """Split BAUs into (observed, block-missing S1, random-missing S2).

    S1 is every BAU whose centroid falls in `block` (xmin, xmax, ymin, ymax);
    S2 is a uniform sample of round(random_fraction * remaining) others.
    """
    if not 0.0 <= random_fraction < 1.0:
        raise InvalidArgumentError("random_fraction must lie in [0, 1)")
    n = grid.n
    pts = grid.centroids
    if block is not None:
        xmin, xmax, ymin, ymax = block
        in_block = (
            (pts[:, 0] >= xmin) & (pts[:, 0] <= xmax) & (pts[:, 1] >= ymin) & (pts[:, 1] <= ymax)
        )
        s1 = np.nonzero(in_block)[0]
    else:
        s1 = np.empty(0, dtype=np.int64)
    remaining = np.setdiff1d(np.arange(n), s1, assume_unique=False)
    n_s2 = int(np.rint(random_fraction * remaining.size))
    s2 = np.sort(rng.choice(remaining, size=n_s2, replace=False)) if n_s2 else np.empty(0, dtype=np.int64)
    observed = np.setdiff1d(remaining, s2, assume_unique=True)
    if observed.size == 0:
        raise InvalidArgumentError("holdout leaves no observations")
    return observed, s1, s2


def mspe(predictions, truth, subset=None):
    """Mean squared prediction error, optionally over an index subset."""
    predictions = np.asarray(predictions, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if predictions.shape != truth.shape:
        raise InvalidArgumentError("prediction/truth length mismatch")
    if subset is not None:
        subset = np.asarray(subset)
        if subset.size == 0:
            raise InvalidArgumentError("empty evaluation subset")
        predictions = predictions[subset]
        truth = truth[subset]
    return float(np.mean((predictions - truth) ** 2))


def selection_matrix(observed_ids, n):
    """Aggregation matrix whose coarse cells are single observed fine cells."""
    observed_ids = np.asarray(observed_ids)
    m = observed_ids.size
    mat = sp.csr_matrix(
        (np.ones(m), (np.arange(m), observed_ids)), shape=(m, n)
    )
    return AggregationMatrix(matrix=mat, cell_sizes=np.ones(m, dtype=np.int64))


# -- score bookkeeping --------------------------------------------------------


@dataclass
class ScoreTable:
    """Per-seed MSPE rows plus aggregated medians."""

    rows: list = field(default_factory=list)

    def add(self, method, subset, seed, value):
        if not np.isfinite(value) or value < 0:
            raise InvalidArgumentError(f"invalid MSPE {value!r} for {method}/{subset}")
        self.rows.append(
            {"method": method, "subset": subset, "seed": int(seed), "mspe": float(value)}
        )

    def values(self, method, subset="all"):
        return [r["mspe"] for r in self.rows if r["method"] == method and r["subset"] == subset]

    def medians(self):
        keys = sorted({(r["method"], r["subset"]) for r in self.rows})
        return {
            f"{m}/{s}": float(np.median(self.values(m, s))) for m, s in keys
        }

    def seeds(self):
        return sorted({r["seed"] for r in self.rows})

    def to_csv(self, path):
        rows = sorted(self.rows, key=lambda r: (r["seed"], r["method"], r["subset"]))
        lines = ["method,subset,seed,mspe"]
        lines += [
            f"{r['method']},{r['subset']},{r['seed']},{_fmt(r['mspe'])}" for r in rows
        ]
        for key, val in sorted(self.medians().items()):
            method, subset = key.split("/")
            lines.append(f"{method},{subset},median,{_fmt(val)}")
        atomic_write(path, "\n".join(lines) + "\n")


# -- file helpers -------------------------------------------------------------


def _fmt(x):
    return format(float(x), ".17g")


def atomic_write(path, text):
    """Write text to path via a temp file + rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-finescale-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_field_csv(path, ids, columns):
    """CSV with a bau_id column plus named float columns."""
    names = list(columns)
    header = ",".join(["bau_id"] + names)
    lines = [header]
    arrays = [np.asarray(columns[k], dtype=float) for k in names]
    for j, i in enumerate(ids):
        vals = ",".join(_fmt(a[j]) if np.isfinite(a[j]) else "nan" for a in arrays)
        lines.append(f"{int(i)},{vals}")
    atomic_write(path, "\n".join(lines) + "\n")


def load_value_csv(path, id_column, value_column):
    """Read an (id, value) CSV; ids must be dense starting at zero."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [c.strip().lower() for c in next(reader)]
        except StopIteration:
            raise FormatError("empty file", line=1) from None
        try:
            idc = header.index(id_column)
            vc = header.index(value_column)
        except ValueError:
            raise FormatError(
                f"expected columns {id_column!r} and {value_column!r}, got {header!r}", line=1
            ) from None
        ids, vals = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                ids.append(int(row[idc]))
                vals.append(float(row[vc]))
            except (ValueError, IndexError) as exc:
                raise FormatError(str(exc), line=lineno) from None
    ids = np.asarray(ids)
    vals = np.asarray(vals)
    if ids.size == 0:
        raise FormatError("no data rows", line=2)
    if np.unique(ids).size != ids.size:
        raise FormatError("duplicate ids")
    if ids.min() != 0 or ids.max() != ids.size - 1:
        raise FormatError("ids must be dense in [0, n)")
    out = np.empty(ids.size)
    out[ids] = vals
    return out


def write_json(path, payload):
    atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def params_hash(params):
    """Stable short hash of a parameter set, for manifests."""
    h = hashlib.sha256()
    h.update(params.kind.encode())
    h.update(np.ascontiguousarray(params.beta).tobytes())
    h.update(np.ascontiguousarray(params.k_mat).tobytes())
    h.update(np.float64(params.sigma2_eps).tobytes())
    if params.kind == FRK:
        h.update(np.float64(params.sigma2_xi).tobytes())
    else:
        h.update(np.float64(params.tau2).tobytes())
        h.update(np.float64(params.gamma).tobytes())
    return h.hexdigest()[:16]


def _clean_report(fitted):
    rep = fitted.report()
    rep.pop("wall_time_s", None)  # keep manifests byte-stable
    return rep


# -- experiment configuration -------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    seeds: tuple
    out_dir: str | None = None
    n_jobs: int = 1
    blas_threads: int = 1
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.seeds) < 1:
            raise InvalidArgumentError("need at least one seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


TABLE1_DEFAULTS = {
    "nx": 100,
    "ny": 100,
    "bounds": (0.0, 100.0, 0.0, 100.0),
    "factor": 2,
    "sigma2": 2.0,
    "rho": 5.0,
    "sigma2_eps": 0.2,
    "beta": (2.0, 0.5, 0.2),
    "basis_counts": (4, 6, 10),
    "holdout_fraction": 0.10,
    "em_max_iter": 200,
    "fgp_em_max_iter": 120,
}

TABLE2_DEFAULTS = {
    "nx": 100,
    "ny": 100,
    "bounds": (-2.0, 6.0, -2.0, 6.0),
    "noise_fraction": 0.01,
    "block": (-0.5, 0.5, -1.5, 1.5),
    "random_fraction": 0.10,
    "simple_counts_small": (5, 7, 9),
    "simple_counts_large": (5, 7, 9, 11),
    "prune_min_obs": 500,
    "initial_counts": (5,),
    "r_max": 200,
    "elmse_tolerance": 0.01,
    "cutoff_quantile": 0.90,
    "candidate_grid": 50,
    "window_random": 6,
    "window_block": 15,
    "em_max_iter": 200,
    "fgp_em_max_iter": 120,
}


def _merged(defaults, options):
    cfg = dict(defaults)
    unknown = set(options) - set(defaults)
    if unknown:
        raise InvalidArgumentError(f"unknown experiment options: {sorted(unknown)}")
    cfg.update(options)
    return cfg


# -- table 1 ------------------------------------------------------------------


def _table1_seed(seed, cfg, blas_threads):
    with threadpool_limits(limits=blas_threads):
        grid = geom.build_regular_lattice(cfg["bounds"], cfg["nx"], cfg["ny"])
        pts = grid.centroids
        x_design = np.column_stack([np.ones(grid.n), pts])
        beta_true = np.asarray(cfg["beta"], dtype=float)
        spec_true = ExponentialCovSpec(
            sigma2=cfg["sigma2"], rho=cfg["rho"], nugget=cfg["sigma2_eps"]
        )
        y_fine = gen_synthetic_gp(spec_true, beta_true, grid, stage_rng(seed, "simulate"))

        coarse = geom.build_coarse_partition(grid, cfg["factor"], cfg["factor"])
        agg_full = build_aggregation_matrix(grid, coarse)
        y_tilde = aggregate(agg_full, y_fine)
        m = agg_full.m
        n_hold = int(np.rint(cfg["holdout_fraction"] * m))
        held = np.sort(stage_rng(seed, "holdout").choice(m, size=n_hold, replace=False))
        obs_cells = np.setdiff1d(np.arange(m), held, assume_unique=True)
        agg_obs = agg_full.restrict(obs_cells)
        y_obs = y_tilde[obs_cells]

        preds = {}
        diag = {}

        preds["ek"] = ek_predict(spec_true, agg_obs, y_obs, x_design, beta_true, grid)

        coarse_xy = agg_obs.matrix @ pts
        x_coarse = np.column_stack([np.ones(coarse_xy.shape[0]), coarse_xy])
        preds["pk"] = pk_predict(None, coarse_xy, y_obs, x_coarse, pts, x_design)

        bset = basis_mod.place_equally_spaced(cfg["bounds"], cfg["basis_counts"])
        s_mat = basis_mod.eval_basis_matrix(bset, pts)
        em_cfg = EmConfig(max_iter=cfg["em_max_iter"])
        fit_frk = fit_em(FRK, y_obs, agg_obs, x_design, s_mat, cfg["sigma2_eps"], config=em_cfg)
        preds["frk"] = conditional_moments(fit_frk, y_obs, variance_method="none").mean
        diag["frk"] = _clean_report(fit_frk)

        prox = geom.build_proximity(grid, order=1)
        em_cfg_fgp = EmConfig(max_iter=cfg["fgp_em_max_iter"])
        fit_fgp = fit_em(
            FGP,
            y_obs,
            agg_obs,
            x_design,
            s_mat,
            cfg["sigma2_eps"],
            proximity=prox,
            config=em_cfg_fgp,
        )
        preds["fgp"] = conditional_moments(fit_fgp, y_obs, variance_method="none").mean
        diag["fgp"] = _clean_report(fit_fgp)

        scores = {name: mspe(p, y_fine) for name, p in preds.items()}
        return scores, diag


def run_table1(config):
    """Coarse-data comparison of the four predictors on the synthetic GP field."""
    cfg = _merged(TABLE1_DEFAULTS, config.options)
    t0 = time.perf_counter()
    results = Parallel(n_jobs=config.n_jobs)(
        delayed(_table1_seed)(seed, cfg, config.blas_threads) for seed in config.seeds
    )
    table = ScoreTable()
    diagnostics = {}
    for seed, (scores, diag) in zip(config.seeds, results):
        for method, value in sorted(scores.items()):
            table.add(method, "all", seed, value)
        diagnostics[str(seed)] = diag
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        table.to_csv(os.path.join(config.out_dir, "table1_scores.csv"))
        write_json(
            os.path.join(config.out_dir, "table1_manifest.json"),
            {
                "experiment": "table1",
                "config": _jsonable(cfg),
                "seeds": list(config.seeds),
                "medians": table.medians(),
                "fits": diagnostics,
            },
        )
        write_json(
            os.path.join(config.out_dir, "table1_timings.json"),
            {"wall_time_s": time.perf_counter() - t0},
        )
    return table


# -- table 2 ------------------------------------------------------------------


def _table2_seed(seed, cfg, blas_threads, out_dir=None):
    with threadpool_limits(limits=blas_threads):
        grid = geom.build_regular_lattice(cfg["bounds"], cfg["nx"], cfg["ny"])
        pts = grid.centroids
        x_design = np.ones((grid.n, 1))
        y_noisy, f_true, sigma2_eps = gen_deterministic_surface(
            grid, cfg["noise_fraction"], stage_rng(seed, "simulate")
        )
        observed, s1, s2 = make_holdout(
            grid, cfg["block"], cfg["random_fraction"], stage_rng(seed, "holdout")
        )
        union = np.sort(np.concatenate([s1, s2]))
        agg_obs = selection_matrix(observed, grid.n)
        y_obs = y_noisy[observed]
        obs_pts = pts[observed]
        em_cfg = EmConfig(max_iter=cfg["em_max_iter"])

        scores = {}
        diag = {}

        def frk_scores(tag, bset):
            s_mat = basis_mod.eval_basis_matrix(bset, pts)
            fit = fit_em(FRK, y_obs, agg_obs, x_design, s_mat, sigma2_eps, config=em_cfg)
            pred = conditional_moments(fit, y_obs, variance_method="none").mean
            scores[tag] = {
                "s1": mspe(pred, f_true, s1),
                "s2": mspe(pred, f_true, s2),
                "union": mspe(pred, f_true, union),
            }
            diag[tag] = _clean_report(fit)
            return fit, s_mat

        small = basis_mod.place_equally_spaced(cfg["bounds"], cfg["simple_counts_small"])
        small = basis_mod.prune_sparse_data_basis(small, obs_pts, cfg["prune_min_obs"])
        frk_scores("simple_frk_small", small)
        diag["simple_frk_small"]["r"] = small.r

        large = basis_mod.place_equally_spaced(cfg["bounds"], cfg["simple_counts_large"])
        large = basis_mod.prune_sparse_data_basis(large, obs_pts, cfg["prune_min_obs"])
        frk_scores("simple_frk_large", large)
        diag["simple_frk_large"]["r"] = large.r

        initial = basis_mod.place_equally_spaced(cfg["bounds"], cfg["initial_counts"])
        k_cand = cfg["candidate_grid"]
        cand_grid = geom.build_regular_lattice(cfg["bounds"], k_cand, k_cand)
        sel_cfg = SelectionConfig(
            candidate_centers=cand_grid.centroids,
            r_max=cfg["r_max"],
            cutoff_quantile=cfg["cutoff_quantile"],
            elmse_tolerance=cfg["elmse_tolerance"],
        )
        basis_sel, trace = forward_select(
            y_obs,
            agg_obs,
            x_design,
            pts,
            initial,
            sigma2_eps,
            sel_cfg,
            em_config=EmConfig(max_iter=100),
        )
        if out_dir:
            atomic_write(
                os.path.join(out_dir, f"selection_trace_seed{seed}.json"),
                trace.to_json(indent=2),
            )

        fit_afrk, s_sel = frk_scores("adaptive_frk", basis_sel)
        diag["adaptive_frk"]["r"] = basis_sel.r

        prox = geom.build_proximity(grid, order=1)
        fit_afgp = fit_em(
            FGP,
            y_obs,
            agg_obs,
            x_design,
            s_sel,
            sigma2_eps,
            proximity=prox,
            config=EmConfig(max_iter=cfg["fgp_em_max_iter"]),
        )
        pred = conditional_moments(fit_afgp, y_obs, variance_method="none").mean
        scores["adaptive_fgp"] = {
            "s1": mspe(pred, f_true, s1),
            "s2": mspe(pred, f_true, s2),
            "union": mspe(pred, f_true, union),
        }
        diag["adaptive_fgp"] = _clean_report(fit_afgp)
        diag["adaptive_fgp"]["r"] = basis_sel.r

        lk_pred = np.empty(grid.n)
        lk_s2, _ = local_krige(
            y_obs, observed, grid, s2, window=cfg["window_random"]
        )
        lk_s1, _ = local_krige(
            y_obs, observed, grid, s1, window=cfg["window_block"]
        )
        lk_pred[s2] = lk_s2
        lk_pred[s1] = lk_s1
        scores["local_kriging"] = {
            "s1": mspe(lk_pred, f_true, s1),
            "s2": mspe(lk_pred, f_true, s2),
            "union": mspe(lk_pred, f_true, union),
        }

        diag["selection"] = {
            "final_r": trace.final_r,
            "n_iterations": len(trace.iterations),
            "stopped_reason": trace.stopped_reason,
            "cutoffs": trace.cutoffs,
        }
        return scores, diag


def run_table2(config):
    """Simple vs adaptive basis comparison (plus local kriging) on the bump surface."""
    cfg = _merged(TABLE2_DEFAULTS, config.options)
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
    t0 = time.perf_counter()
    results = Parallel(n_jobs=config.n_jobs)(
        delayed(_table2_seed)(seed, cfg, config.blas_threads, out_dir=config.out_dir)
        for seed in config.seeds
    )
    table = ScoreTable()
    diagnostics = {}
    for seed, (scores, diag) in zip(config.seeds, results):
        for method in sorted(scores):
            for subset in ("s1", "s2", "union"):
                table.add(method, subset, seed, scores[method][subset])
        diagnostics[str(seed)] = diag
    if config.out_dir:
        table.to_csv(os.path.join(config.out_dir, "table2_scores.csv"))
        write_json(
            os.path.join(config.out_dir, "table2_manifest.json"),
            {
                "experiment": "table2",
                "config": _jsonable(cfg),
                "seeds": list(config.seeds),
                "medians": table.medians(),
                "fits": diagnostics,
            },
        )
        write_json(
            os.path.join(config.out_dir, "table2_timings.json"),
            {"wall_time_s": time.perf_counter() - t0},
        )
    return table


# -- downscaling pipeline -----------------------------------------------------


@dataclass(frozen=True)
class DownscaleConfig:
    coarse_csv: str
    grid_csv: str
    partition_csv: str
    model: str = FGP
    sigma2_eps: float = None
    n_members: int = 10
    seed: int = 0
    out_dir: str = "downscale_out"
    basis_csv: str | None = None
    basis_counts: tuple | None = None
    select: bool = False
    r_max: int = 200
    trend: str = "linear"  # "intercept" or "linear" in the coordinates
    em_max_iter: int = 200
    blas_threads: int = 1

    def __post_init__(self):
        if self.sigma2_eps is None or self.sigma2_eps <= 0:
            raise InvalidArgumentError("sigma2_eps is required and must be positive")
        if self.model not in (FRK, FGP):
            raise InvalidArgumentError(f"unknown model {self.model!r}")
        if self.n_members < 1:
            raise InvalidArgumentError("n_members must be >= 1")
        for path in (self.coarse_csv, self.grid_csv, self.partition_csv):
            if not os.path.exists(path):
                raise InvalidArgumentError(f"input file not found: {path}")
        if self.basis_csv is not None and not os.path.exists(self.basis_csv):
            raise InvalidArgumentError(f"basis file not found: {self.basis_csv}")


def run_downscale(cfg):
    """Full pipeline: load, (optionally) select basis, fit, simulate, write.

    Returns a dict with the fitted report, output paths, and the
    aggregation residual of every emitted member.
    """
    with threadpool_limits(limits=cfg.blas_threads):
        return _run_downscale_inner(cfg)


def _run_downscale_inner(cfg):
    t0 = time.perf_counter()
    grid = geom.load_bau_grid(cfg.grid_csv)
    coarse = geom.load_partition(cfg.partition_csv, grid)
    agg = build_aggregation_matrix(grid, coarse)
    y_tilde = load_value_csv(cfg.coarse_csv, "coarse_id", "value")
    if y_tilde.size != agg.m:
        raise InvalidArgumentError(
            f"coarse file has {y_tilde.size} cells, partition has {agg.m}"
        )
    pts = grid.centroids
    if cfg.trend == "intercept":
        x_design = np.ones((grid.n, 1))
    else:
        x_design = np.column_stack([np.ones(grid.n), pts])

    bounds = (
        float(pts[:, 0].min()),
        float(pts[:, 0].max()),
        float(pts[:, 1].min()),
        float(pts[:, 1].max()),
    )
    if cfg.basis_csv:
        bset = basis_mod.load_basis(cfg.basis_csv)
    else:
        counts = cfg.basis_counts or (4, 6)
        bset = basis_mod.place_equally_spaced(bounds, counts)

    trace_json = None
    if cfg.select:
        k_cand = max(int(np.sqrt(agg.m)), 10)
        cand = geom.build_regular_lattice(bounds, k_cand, k_cand).centroids
        sel_cfg = SelectionConfig(candidate_centers=cand, r_max=cfg.r_max)
        bset, trace = forward_select(
            y_tilde,
            agg,
            x_design,
            pts,
            bset,
            cfg.sigma2_eps,
            sel_cfg,
            metric=grid.metric,
            em_config=EmConfig(max_iter=100),
        )
        trace_json = trace.to_json(indent=2)

    s_mat = basis_mod.eval_basis_matrix(bset, pts, metric=grid.metric)
    prox = geom.build_proximity(grid, order=1) if cfg.model == FGP else None
    fitted = fit_em(
        cfg.model,
        y_tilde,
        agg,
        x_design,
        s_mat,
        cfg.sigma2_eps,
        proximity=prox,
        config=EmConfig(max_iter=cfg.em_max_iter),
    )

    ens = ensemble(fitted, y_tilde, agg, n_members=cfg.n_members, seed=cfg.seed)
    residuals = [aggregation_residual(agg, mem, y_tilde) for mem in ens.members]

    field = conditional_moments(fitted, y_tilde, variance_method="auto")
    variance = field.variance
    variance_method = field.variance_method
    if variance is None and cfg.n_members >= 2:
        variance = ens.members.var(axis=0, ddof=1)
        variance_method = "ensemble"
    mean_residual = aggregation_residual(agg, field.mean, y_tilde)

    os.makedirs(cfg.out_dir, exist_ok=True)
    ids = np.arange(grid.n)
    member_paths = []
    for i in range(cfg.n_members):
        path = os.path.join(cfg.out_dir, f"member_{i:03d}.csv")
        write_field_csv(path, ids, {"value": ens.members[i]})
        member_paths.append(path)
    moments_path = os.path.join(cfg.out_dir, "conditional_moments.csv")
    write_field_csv(
        moments_path,
        ids,
        {
            "mean": field.mean,
            "variance": variance if variance is not None else np.full(grid.n, np.nan),
        },
    )
    if trace_json:
        atomic_write(os.path.join(cfg.out_dir, "selection_trace.json"), trace_json)

    manifest = {
        "seed": int(cfg.seed),
        "n_members": int(cfg.n_members),
        "model": cfg.model,
        "model_hash": params_hash(fitted.params),
        "sigma2_eps": float(cfg.sigma2_eps),
        "n_fine": int(grid.n),
        "n_coarse": int(agg.m),
        "r": int(bset.r),
        "variance_method": variance_method,
        "fit": _clean_report(fitted),
        "bic": float(compute_bic(fitted, y_tilde)),
        "aggregation_residuals": [float(r) for r in residuals],
        "mean_aggregation_residual": float(mean_residual),
        "members": [os.path.basename(p) for p in member_paths],
    }
    manifest_path = os.path.join(cfg.out_dir, "manifest.json")
    write_json(manifest_path, manifest)
    write_json(
        os.path.join(cfg.out_dir, "timings.json"),
        {"wall_time_s": time.perf_counter() - t0},
    )
    return {
        "manifest": manifest,
        "manifest_path": manifest_path,
        "member_paths": member_paths,
        "moments_path": moments_path,
        "converged": fitted.converged,
        "max_member_residual": max(residuals),
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj
