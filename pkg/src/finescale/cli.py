"""Command-line interface.

Subcommands: gen-data, select-basis, fit, downscale, eval, table1, table2.
Options can come from a JSON config file (--config) with command-line flags
taking precedence. Exit codes: 0 success, 2 configuration/input error,
3 numerical failure, 4 fit did not converge (results are still written).
"""

import argparse
import json
import os
import sys

from .errors import (
    FinescaleError,
    FitFailureError,
    FormatError,
    InvalidArgumentError,
    InvalidPartitionError,
    NotPositiveDefiniteError,
    NumericFailureError,
    SingularDesignError,
    TooLargeError,
)

_CONFIG_ERRORS = (
    InvalidArgumentError,
    FormatError,
    InvalidPartitionError,
    TooLargeError,
    FileNotFoundError,
    KeyError,
    json.JSONDecodeError,
)
_NUMERIC_ERRORS = (
    NumericFailureError,
    NotPositiveDefiniteError,
    FitFailureError,
    SingularDesignError,
)


def _int_tuple(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _float_tuple(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def build_parser():
    parser = argparse.ArgumentParser(prog="finescale", description=__doc__)
    parser.add_argument("--config", help="JSON file with defaults for the subcommand")
    parser.add_argument("--blas-threads", type=int, default=1,
                        help="fixed BLAS thread count (pinned for reproducibility)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate synthetic grids and fields")
    g.add_argument("--mode", choices=("gp", "surface"), default="gp")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--nx", type=int, default=100)
    g.add_argument("--ny", type=int, default=100)
    g.add_argument("--bounds", type=_float_tuple, default=None,
                   help="xmin,xmax,ymin,ymax (defaults per mode)")
    g.add_argument("--factor", type=int, default=2, help="coarse aggregation factor")
    g.add_argument("--sigma2", type=float, default=2.0)
    g.add_argument("--rho", type=float, default=5.0)
    g.add_argument("--sigma2-eps", type=float, default=0.2)
    g.add_argument("--beta", type=_float_tuple, default=(2.0, 0.5, 0.2))
    g.add_argument("--noise-fraction", type=float, default=0.01)

    s = sub.add_parser("select-basis", help="forward basis selection on coarse data")
    s.add_argument("--coarse", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--partition", required=True)
    s.add_argument("--sigma2-eps", type=float, required=True)
    s.add_argument("--initial-counts", type=_int_tuple, default=(5,))
    s.add_argument("--r-max", type=int, default=200)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--trend", choices=("intercept", "linear"), default="linear")

    f = sub.add_parser("fit", help="fit a model to coarse data")
    f.add_argument("--coarse", required=True)
    f.add_argument("--grid", required=True)
    f.add_argument("--partition", required=True)
    f.add_argument("--model", choices=("frk", "fgp"), default="fgp")
    f.add_argument("--sigma2-eps", type=float, required=True)
    f.add_argument("--basis", help="basis CSV (center_x,center_y,bandwidth)")
    f.add_argument("--basis-counts", type=_int_tuple, default=(4, 6))
    f.add_argument("--trend", choices=("intercept", "linear"), default="linear")
    f.add_argument("--max-iter", type=int, default=200)
    f.add_argument("--out", required=True, help="fit report JSON path")

    d = sub.add_parser("downscale", help="fit + constrained conditional simulation")
    d.add_argument("--coarse", required=True)
    d.add_argument("--grid", required=True)
    d.add_argument("--partition", required=True)
    d.add_argument("--model", choices=("frk", "fgp"), default="fgp")
    d.add_argument("--sigma2-eps", type=float, required=True)
    d.add_argument("--members", type=int, default=10)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out-dir", required=True)
    d.add_argument("--basis", help="basis CSV; overrides --basis-counts")
    d.add_argument("--basis-counts", type=_int_tuple, default=(4, 6))
    d.add_argument("--select", action="store_true", help="run forward basis selection")
    d.add_argument("--r-max", type=int, default=200)
    d.add_argument("--trend", choices=("intercept", "linear"), default="linear")
    d.add_argument("--max-iter", type=int, default=200)

    e = sub.add_parser("eval", help="MSPE of predictions against a truth file")
    e.add_argument("--pred", required=True, help="CSV with bau_id,<column>")
    e.add_argument("--pred-column", default="mean")
    e.add_argument("--truth", required=True, help="CSV with bau_id,value")
    e.add_argument("--subset", help="optional CSV of bau_id rows to score")
    e.add_argument("--out", help="optional JSON output path")

    for name in ("table1", "table2"):
        t = sub.add_parser(name, help=f"run the {name} replication experiment")
        t.add_argument("--seeds", type=_int_tuple, default=tuple(range(10)))
        t.add_argument("--out-dir", required=True)
        t.add_argument("--jobs", type=int, default=1)
    return parser


def _load_config_defaults(parser, argv):
    # apply --config JSON values as defaults, keeping explicit flags dominant
    pre, _ = parser.parse_known_args(argv)
    if not pre.config:
        return argv
    with open(pre.config, encoding="utf-8") as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise InvalidArgumentError("--config must contain a JSON object")
    command = pre.command
    values = dict(payload.get("common", {}))
    values.update(payload.get(command, {}))
    extra = []
    for key, val in values.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            if val:
                extra.append(flag)
        elif isinstance(val, (list, tuple)):
            extra.append(f"{flag}={','.join(str(v) for v in val)}")
        else:
            extra.append(f"{flag}={val}")
    # defaults go before the user's argv so explicit flags win
    idx = argv.index(command)
    return argv[: idx + 1] + extra + argv[idx + 1 :]


def _cmd_gen_data(args):
    import numpy as np

    from . import geometry as geom
    from .baselines import ExponentialCovSpec
    from .harness import (
        aggregate,
        atomic_write,
        gen_deterministic_surface,
        gen_synthetic_gp,
        stage_rng,
        write_field_csv,
        write_json,
    )

    bounds = args.bounds or ((0.0, 100.0, 0.0, 100.0) if args.mode == "gp" else (-2.0, 6.0, -2.0, 6.0))
    grid = geom.build_regular_lattice(bounds, args.nx, args.ny)
    os.makedirs(args.out_dir, exist_ok=True)
    geom.save_bau_grid(grid, os.path.join(args.out_dir, "grid.csv"))
    coarse = geom.build_coarse_partition(grid, args.factor, args.factor)
    geom.save_partition(coarse, os.path.join(args.out_dir, "partition.csv"))
    agg = geom.build_aggregation_matrix(grid, coarse)
    rng = stage_rng(args.seed, "simulate")
    if args.mode == "gp":
        spec = ExponentialCovSpec(sigma2=args.sigma2, rho=args.rho, nugget=args.sigma2_eps)
        field = gen_synthetic_gp(spec, args.beta, grid, rng)
        sigma2_eps = args.sigma2_eps
    else:
        field, _, sigma2_eps = gen_deterministic_surface(grid, args.noise_fraction, rng)
    write_field_csv(os.path.join(args.out_dir, "truth.csv"), np.arange(grid.n), {"value": field})
    coarse_vals = aggregate(agg, field)
    lines = ["coarse_id,value"] + [
        f"{i},{format(float(v), '.17g')}" for i, v in enumerate(coarse_vals)
    ]
    atomic_write(os.path.join(args.out_dir, "coarse.csv"), "\n".join(lines) + "\n")
    write_json(
        os.path.join(args.out_dir, "gen_manifest.json"),
        {
            "mode": args.mode,
            "seed": args.seed,
            "nx": args.nx,
            "ny": args.ny,
            "bounds": list(bounds),
            "factor": args.factor,
            "sigma2_eps": float(sigma2_eps),
        },
    )
    print(f"wrote grid/partition/truth/coarse under {args.out_dir}")
    return 0


def _cmd_select_basis(args):
    import numpy as np

    from . import basis as basis_mod
    from . import geometry as geom
    from .estimation import EmConfig
    from .harness import atomic_write, load_value_csv
    from .selection import SelectionConfig, forward_select

    grid = geom.load_bau_grid(args.grid)
    coarse = geom.load_partition(args.partition, grid)
    agg = geom.build_aggregation_matrix(grid, coarse)
    y = load_value_csv(args.coarse, "coarse_id", "value")
    pts = grid.centroids
    x_design = (
        np.ones((grid.n, 1))
        if args.trend == "intercept"
        else np.column_stack([np.ones(grid.n), pts])
    )
    bounds = (
        float(pts[:, 0].min()),
        float(pts[:, 0].max()),
        float(pts[:, 1].min()),
        float(pts[:, 1].max()),
    )
    initial = basis_mod.place_equally_spaced(bounds, args.initial_counts)
    k_cand = max(int(np.sqrt(agg.m)), 10)
    cand = geom.build_regular_lattice(bounds, k_cand, k_cand).centroids
    cfg = SelectionConfig(candidate_centers=cand, r_max=args.r_max)
    bset, trace = forward_select(
        y, agg, x_design, pts, initial, args.sigma2_eps, cfg,
        metric=grid.metric, em_config=EmConfig(max_iter=100),
    )
    os.makedirs(args.out_dir, exist_ok=True)
    basis_mod.save_basis(bset, os.path.join(args.out_dir, "basis.csv"))
    atomic_write(os.path.join(args.out_dir, "selection_trace.json"), trace.to_json(indent=2))
    print(f"selected r={bset.r} basis functions -> {args.out_dir}/basis.csv")
    return 0


def _cmd_fit(args):
    import numpy as np

    from . import basis as basis_mod
    from . import geometry as geom
    from .estimation import EmConfig, compute_bic, fit_em
    from .harness import load_value_csv, write_json
    from .model import FGP

    grid = geom.load_bau_grid(args.grid)
    coarse = geom.load_partition(args.partition, grid)
    agg = geom.build_aggregation_matrix(grid, coarse)
    y = load_value_csv(args.coarse, "coarse_id", "value")
    pts = grid.centroids
    x_design = (
        np.ones((grid.n, 1))
        if args.trend == "intercept"
        else np.column_stack([np.ones(grid.n), pts])
    )
    if args.basis:
        bset = basis_mod.load_basis(args.basis)
    else:
        bounds = (
            float(pts[:, 0].min()), float(pts[:, 0].max()),
            float(pts[:, 1].min()), float(pts[:, 1].max()),
        )
        bset = basis_mod.place_equally_spaced(bounds, args.basis_counts)
    s_mat = basis_mod.eval_basis_matrix(bset, pts, metric=grid.metric)
    prox = geom.build_proximity(grid, order=1) if args.model == FGP else None
    fitted = fit_em(
        args.model, y, agg, x_design, s_mat, args.sigma2_eps,
        proximity=prox, config=EmConfig(max_iter=args.max_iter),
    )
    report = fitted.report()
    report["bic"] = float(compute_bic(fitted, y))
    write_json(args.out, report)
    print(f"fit written to {args.out} (converged={fitted.converged})")
    return 0 if fitted.converged else 4


def _cmd_downscale(args):
    from .harness import DownscaleConfig, run_downscale

    cfg = DownscaleConfig(
        coarse_csv=args.coarse,
        grid_csv=args.grid,
        partition_csv=args.partition,
        model=args.model,
        sigma2_eps=args.sigma2_eps,
        n_members=args.members,
        seed=args.seed,
        out_dir=args.out_dir,
        basis_csv=args.basis,
        basis_counts=args.basis_counts if not args.basis else None,
        select=args.select,
        r_max=args.r_max,
        trend=args.trend,
        em_max_iter=args.max_iter,
        blas_threads=args.blas_threads,
    )
    result = run_downscale(cfg)
    print(
        f"downscaled to {args.out_dir}: {args.members} members, "
        f"max aggregation residual {result['max_member_residual']:.3e}"
    )
    return 0 if result["converged"] else 4


def _cmd_eval(args):
    from .harness import load_value_csv, mspe, write_json

    pred = load_value_csv(args.pred, "bau_id", args.pred_column)
    truth = load_value_csv(args.truth, "bau_id", "value")
    subset = None
    if args.subset:
        import numpy as np

        subset = np.loadtxt(args.subset, dtype=int, ndmin=1)
    value = mspe(pred, truth, subset)
    print(f"MSPE: {value:.6g}")
    if args.out:
        write_json(args.out, {"mspe": value, "n": int(len(pred) if subset is None else len(subset))})
    return 0


def _cmd_table(args, which):
    from .harness import ExperimentConfig, run_table1, run_table2

    cfg = ExperimentConfig(
        experiment=which,
        seeds=args.seeds,
        out_dir=args.out_dir,
        n_jobs=args.jobs,
        blas_threads=args.blas_threads,
    )
    table = run_table1(cfg) if which == "table1" else run_table2(cfg)
    for key, val in sorted(table.medians().items()):
        print(f"{key}: median MSPE {val:.4g}")
    return 0


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _load_config_defaults(parser, argv)
        args = parser.parse_args(argv)
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.blas_threads):
            if args.command == "gen-data":
                return _cmd_gen_data(args)
            if args.command == "select-basis":
                return _cmd_select_basis(args)
            if args.command == "fit":
                return _cmd_fit(args)
            if args.command == "downscale":
                return _cmd_downscale(args)
            if args.command == "eval":
                return _cmd_eval(args)
            if args.command in ("table1", "table2"):
                return _cmd_table(args, args.command)
            raise InvalidArgumentError(f"unknown command {args.command!r}")
    except _CONFIG_ERRORS as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
