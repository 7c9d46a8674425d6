"""Command-line interface: simulate, sweep, trajectories, sample-check.

All subcommands are deterministic functions of (config, seed); outputs are
data-only (record files, reports, CSV histograms and path files), rendering
is left to external tools.  Exit codes: 0 success, 1 usage/config error,
2 runtime failure.
"""
from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from . import ensemble as ens
from . import sampling as smp
from . import state as st
from . import stats
from .dynamics import IntegratorConfig, Screens, run_trajectory


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract reserves 2 for
    # runtime failures.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p):
    p.add_argument("--config", help="JSON config file; flags override it")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--mode", choices=["collapse", "free", "both"], default=None)
    p.add_argument("--x-left", type=float, default=None, nargs="+",
                   help="left screen distance(s); positive values are "
                        "distances and map to negative plane coordinates")
    p.add_argument("--x-right", type=float, default=None)
    p.add_argument("--sampler", choices=["equilibrium", "narrowed"], default=None)
    p.add_argument("--bins", type=int, default=stats.DEFAULT_BINS)


def build_parser():
    parser = _Parser(prog="ddslit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run one ensemble and write records,"
                       " report and default histograms")
    _add_common(p)

    p = sub.add_parser("sweep", help="run one ensemble per left-screen "
                       "placement plus a signal-locality report")
    _add_common(p)
    p.add_argument("--reseed", action="store_true",
                   help="use a distinct seed per placement instead of a "
                        "shared one")

    p = sub.add_parser("trajectories", help="write paired collapse/free "
                       "path files from identical initial points")
    _add_common(p)
    p.add_argument("--paths", type=int, default=10,
                   help="number of trajectory pairs")
    p.add_argument("--stride", type=int, default=1,
                   help="keep every stride-th recorded path sample")

    p = sub.add_parser("sample-check", help="draw initial points and "
                       "chi-square them against the analytic marginals")
    _add_common(p)
    return parser


def _load_params(args) -> tuple[ens.ExperimentParams, int]:
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ens.ConfigError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ens.ConfigError(f"bad config file {path}: {exc}") from exc
    workers = int(cfg.pop("workers", 1))
    if args.workers is not None and args.workers != 1:
        workers = args.workers
    if workers < 1:
        raise ens.ConfigError("workers must be >= 1")
    if args.seed is not None:
        sampler = dict(cfg.get("sampler", {}))
        sampler["seed"] = args.seed
        cfg["sampler"] = sampler
    if args.sampler is not None:
        sampler = dict(cfg.get("sampler", {}))
        sampler["mode"] = args.sampler
        if args.sampler == "narrowed":
            sampler.setdefault("sigma_scale", 0.5)
        cfg["sampler"] = sampler
    if args.n is not None:
        cfg["n_trajectories"] = args.n
    if args.mode is not None:
        cfg["mode"] = args.mode
    screens = dict(cfg.get("screens", {}))
    if args.x_left is not None and len(args.x_left) == 1:
        screens["x_left"] = -abs(args.x_left[0])
    if args.x_right is not None:
        screens["x_right"] = args.x_right
    if screens:
        base = ens.ExperimentParams().screens
        screens.setdefault("x_left", base.x_left)
        screens.setdefault("x_right", base.x_right)
        cfg["screens"] = screens
    params = ens.ExperimentParams.from_dict(cfg)
    params.validate()
    return params, workers


def _write_default_histograms(records, params, outdir, bins):
    t_hi = params.integrator.t_max
    y_lo, y_hi = stats.DEFAULT_Y_RANGE
    for side in ("L", "R"):
        ys = stats.side_observable(records, side, "y")
        ts = stats.side_observable(records, side, "t")
        stats.write_histogram(stats.histogram1d(ys, y_lo, y_hi, bins),
                              outdir / f"hist_y_{side}.csv",
                              {"side": side, "observable": "y"})
        stats.write_histogram(stats.histogram1d(ts, 0.0, t_hi, bins),
                              outdir / f"hist_t_{side}.csv",
                              {"side": side, "observable": "t"})
    y_l = stats.side_observable(records, "L", "y")
    y_r = stats.side_observable(records, "R", "y")
    stats.write_histogram2d(
        stats.histogram2d(y_l, y_r, (y_lo, y_hi), (y_lo, y_hi), bins),
        outdir / "hist_joint_y.csv", {"observable": "y_L x y_R"})


def cmd_simulate(args) -> int:
    if args.x_left is not None and len(args.x_left) > 1:
        raise ens.ConfigError("simulate takes a single --x-left value")
    params, workers = _load_params(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    records, report = ens.run_ensemble(params, workers=workers)
    ens.write_records(records, outdir / "records.txt")
    ens.write_report(report, outdir / "report.txt")
    _write_default_histograms(records, params, outdir, args.bins)
    censored = report.status_counts.get("censored", 0)
    if report.n_records and censored / report.n_records > 0.05:
        print(f"error: censored fraction {censored / report.n_records:.1%} "
              "exceeds 5%", file=sys.stderr)
        return 2
    return 0


def cmd_sweep(args) -> int:
    params, workers = _load_params(args)
    if args.x_left is None or len(args.x_left) < 2:
        raise ens.ConfigError("sweep needs --x-left with at least 2 values")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    placements = [abs(v) for v in args.x_left]
    runs = {}
    for i, dist in enumerate(placements):
        sampler = params.sampler
        if args.reseed:
            sampler = smp.SamplerSpec(sampler.mode, sampler.sigma_scale,
                                      sampler.seed + i + 1)
        p_i = ens.ExperimentParams.from_dict({
            **params.to_dict(),
            "screens": {"x_left": -dist, "x_right": params.screens.x_right},
            "sampler": {"mode": sampler.mode,
                        "sigma_scale": sampler.sigma_scale,
                        "seed": sampler.seed},
        })
        run_dir = outdir / f"XL_{dist:g}"
        run_dir.mkdir(exist_ok=True)
        records, report = ens.run_ensemble(p_i, workers=workers)
        ens.write_records(records, run_dir / "records.txt")
        ens.write_report(report, run_dir / "report.txt")
        _write_default_histograms(records, p_i, run_dir, args.bins)
        runs[dist] = records
    lines = []
    for da, db in itertools.combinations(placements, 2):
        rep = stats.marginal_compare(runs[da], runs[db], "R", "y",
                                     bins=args.bins)
        lines.append(f"pair: XL={da:g} vs XL={db:g}")
        lines.extend("  " + ln for ln in rep.lines())
    (outdir / "locality_report.txt").write_text("\n".join(lines) + "\n")
    return 0


def cmd_trajectories(args) -> int:
    params, workers = _load_params(args)
    if args.stride < 1:
        raise ens.ConfigError("stride must be >= 1")
    if args.paths < 1:
        raise ens.ConfigError("--paths must be >= 1")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    state2 = st.build_initial_state(params)
    q0s = smp.sample_initial(state2, params.sampler, args.paths) \
        if params.sampler.mode == "equilibrium" \
        else smp.sample_nonequilibrium(params, params.sampler, args.paths)
    for i in range(args.paths):
        for mode in ("collapse", "free"):
            record, path = run_trajectory(state2, q0s[i], params.screens,
                                          mode, params.integrator,
                                          record_path=True,
                                          trajectory_index=i)
            kept = path[::args.stride]
            if kept[-1] is not path[-1]:
                kept = kept + [path[-1]]
            with open(outdir / f"traj_{i:03d}_{mode}.csv", "w") as fh:
                fh.write("# t,x1,y1,x2,y2\n")
                for ps in kept:
                    p = ps.point
                    fh.write("%.17g,%.17g,%.17g,%.17g,%.17g\n"
                             % (ps.t, p.x1, p.y1, p.x2, p.y2))
    return 0


def cmd_sample_check(args) -> int:
    params, _ = _load_params(args)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    n = params.n_trajectories
    state2 = st.build_initial_state(params)
    if params.sampler.mode == "equilibrium":
        points = smp.sample_initial(state2, params.sampler, n)
        scale = 1.0
    else:
        points = smp.sample_nonequilibrium(params, params.sampler, n)
        scale = params.sampler.sigma_scale
    lines = [f"n: {n}", f"mode: {params.sampler.mode}"]
    worst = 1.0
    for axis, name in enumerate(("x1", "y1", "x2", "y2")):
        sig = params.sigma_x if axis in (0, 2) else params.sigma_y
        cen = params.l_x if axis in (0, 2) else params.l_y
        lo, hi = -(cen + 8 * sig), cen + 8 * sig
        bins = 60
        hist = stats.histogram1d(points[:, axis], lo, hi, bins)
        grid = np.linspace(lo, hi, bins * 16 + 1)
        pdf = smp.axis_marginal_pdf(params, axis, grid, sigma_scale=scale)
        probs = np.add.reduceat(pdf, np.arange(0, grid.size - 1, 16))
        stat, p = stats.chi_square_gof(hist, probs / probs.sum())
        worst = min(worst, p)
        lines.append(f"axis_{name}: chi2={stat:.6g} p={p:.6g}")
    (outdir / "sample_check.txt").write_text("\n".join(lines) + "\n")
    if worst < 1e-4:
        print(f"error: sampler check failed (min p = {worst:g})",
              file=sys.stderr)
        return 2
    return 0


_COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "trajectories": cmd_trajectories,
    "sample-check": cmd_sample_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ens.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures: I/O, integration storms
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
