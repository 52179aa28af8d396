"""Command-line entry point ``seqlap``.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or empty
series), 4 numerical failure (a filter, pool or fit that could not finish).
"""

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .. import models
from ..gaussmix import SPDError, log_density
from ..iterlap import IterLapError
from ..population import PoolConfig, PopulationError, run_population
from ..seqfilter import FilterError, run_filter
from . import dlm, io
from .config import ConfigError, ExperimentConfig, OutlierSpec, dump_config, load_config, validate
from .experiments import (build_model, example2_pool_config, filter_rng, inject_outliers,
                          parse_outliers, scaled_joint_trace, simulate_for)
from .liuwest import liu_west_filter

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


class DataError(ValueError):
    pass


# -- shared plumbing -------------------------------------------------------------------

def _config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "n", None) is not None:
        cfg.n = args.n
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "algo", None) is not None:
        cfg.algo = args.algo
    if getattr(args, "outliers", None):
        try:
            times, std = parse_outliers(args.outliers)
        except ValueError as err:
            raise ConfigError("outliers", str(err)) from err
        cfg.outliers = OutlierSpec(list(times), std)
    if getattr(args, "out", None):
        cfg.out = args.out
    validate(cfg)
    return cfg


def _model(cfg):
    m = cfg.model
    prior = None if m.prior_mean is None else {"mean": m.prior_mean, "variances": m.prior_variances}
    try:
        model = build_model(m.kind, m.obs_kind, prior, m.prior_preset)
    except ValueError as err:
        raise ConfigError("model", str(err)) from err
    return model


def _data(cfg, model, seed, data_path=None):
    """(y, z, sim) from a CSV file or simulated for ``seed``; outliers applied if configured."""
    if data_path:
        try:
            sim = models.read_sim_csv(data_path)
        except (OSError, KeyError, ValueError) as err:
            raise DataError(f"cannot read data {data_path}: {err}") from err
        y, z = sim.y[: cfg.n] if cfg.n else sim.y, sim.z[: cfg.n] if cfg.n else sim.z
    else:
        if isinstance(model, models.LinearGaussianModel):
            sim = model.simulate(cfg.n, np.random.default_rng([seed, 0]))
        else:
            sim = simulate_for(model, cfg.n, seed)
        y, z = sim.y, sim.z
    if len(y) == 0:
        raise DataError("empty series")
    if cfg.outliers is not None and cfg.outliers.times:
        try:
            y = inject_outliers(y, cfg.outliers.times, cfg.outliers.std, np.random.default_rng([seed, 2]))
        except ValueError as err:
            raise ConfigError("outliers.times", str(err)) from err
    return y, z, sim


def _map(fn, cells, workers):
    if workers <= 1 or len(cells) <= 1:
        return [fn(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, cells))


def _save_config(cfg):
    io.write_text(os.path.join(cfg.out, "config.yaml"), dump_config(cfg))


# -- subcommands ------------------------------------------------------------------------

def cmd_simulate(args):
    cfg = _config(args)
    model = _model(cfg)
    paths = []
    for seed in cfg.seeds:
        y, z, sim = _data(cfg, model, seed)
        x = getattr(sim, "x", np.full(len(y), np.nan))
        out = os.path.join(cfg.out, f"sim_seed{seed}.csv")
        io.write_csv(out, ["t", "y", "x_true", "z"],
                     [(t + 1, y[t], x[t], z[t]) for t in range(len(y))])
        paths.append(out)
    _save_config(cfg)
    return paths


def _filter_cell(cell):
    cfg, seed, data_path = cell
    model = _model(cfg)
    y, z, _ = _data(cfg, model, seed, data_path)
    trace = run_filter(model, y, z, cfg.filter.with_(algo=cfg.algo), filter_rng(seed))
    ok = np.all(np.isfinite(trace.means), axis=1)
    series = np.full(len(y), np.nan)
    if ok.all():
        series = scaled_joint_trace(model, y, trace.means, z)
    out = os.path.join(cfg.out, f"filter_{cfg.algo}_seed{seed}.csv")
    io.write_filter_trace(out, trace, series)
    return out, trace.status


def cmd_filter(args):
    cfg = _config(args)
    if cfg.algo not in ("sibs", "siem", "sig"):
        raise ConfigError("algo", f"filter runs sibs, siem or sig, got {cfg.algo!r}")
    results = _map(_filter_cell, [(cfg, s, args.data) for s in cfg.seeds], args.workers)
    _save_config(cfg)
    bad = [st for _, st in results if st != "ok"]
    if bad:
        raise FilterError("; ".join(bad))
    return [p for p, _ in results]


def _pool_cell(cell):
    cfg, seed, data_path = cell
    model = _model(cfg)
    y, z, _ = _data(cfg, model, seed, data_path)
    trace = run_population(model, y, z, cfg.algo, cfg.pool, seed=[seed, 4])
    base = os.path.join(cfg.out, f"pool_{cfg.algo}_seed{seed}")
    io.write_pool_trace(base + "_runs.csv", trace)
    io.write_pool_summary(base + "_summary.csv", trace)
    io.write_events(base + "_events.csv", trace)
    return base


def cmd_population(args):
    cfg = _config(args)
    if cfg.algo not in ("sig", "sig-rs", "sig-rsrp"):
        raise ConfigError("algo", f"population runs sig, sig-rs or sig-rsrp, got {cfg.algo!r}")
    if cfg.pool is None:
        cfg.pool = (example2_pool_config(cfg.n) if cfg.model.kind == "example2"
                    else PoolConfig(filter_cfg=cfg.filter.with_(algo="sig")))
    validate(cfg)
    out = _map(_pool_cell, [(cfg, s, args.data) for s in cfg.seeds], args.workers)
    _save_config(cfg)
    return out


def _dlm_series(args):
    if args.data:
        try:
            y = models.read_sim_csv(args.data).y
        except (OSError, KeyError, ValueError) as err:
            raise DataError(f"cannot read data {args.data}: {err}") from err
    else:
        y = dlm.simulate_reference(n=args.n or 100, seed=1 if args.seed is None else args.seed).y
    if len(y) == 0:
        raise DataError("empty series")
    return y


def cmd_fit_batch(args):
    y = _dlm_series(args)
    grid = dlm.exact_grid(y)
    fits = dlm.fit_batch(y, m_max=args.m_max, grid=grid)
    out = args.out or "results"
    io.write_csv(os.path.join(out, "dlm_fit.csv"), ["preset", "kl", "n_components", "stop_reason"],
                 [(k, f.kl, f.n_components, f.stop_reason) for k, f in fits.items()])
    comp_rows = []
    for k, f in fits.items():
        for i, c in enumerate(f.mixture.normalize().components):
            cov = c.covariance
            comp_rows.append((k, i, c.weight, c.mean[0], c.mean[1], cov[0, 0], cov[0, 1], cov[1, 1]))
    io.write_csv(os.path.join(out, "dlm_components.csv"),
                 ["preset", "k", "weight", "mean_tau_u", "mean_tau_v", "cov_uu", "cov_uv", "cov_vv"], comp_rows)
    pts = grid.points
    cols = {k: dlm._normalize(log_density(f.mixture, pts)) for k, f in fits.items()}
    exact = grid.log_p.ravel()
    io.write_csv(os.path.join(out, "dlm_grid.csv"), ["tau_u", "tau_v", "exact"] + list(cols),
                 [(pts[i, 0], pts[i, 1], exact[i], *(cols[k][i] for k in cols)) for i in range(len(pts))])
    return out


def cmd_oracle(args):
    out = args.out or "results"
    if args.kind == "dlm":
        y = _dlm_series(args)
        grid = dlm.exact_grid(y)
        pts = grid.points
        io.write_csv(os.path.join(out, "dlm_exact.csv"), ["tau_u", "tau_v", "log_mass"],
                     [(pts[i, 0], pts[i, 1], grid.log_p.ravel()[i]) for i in range(len(pts))])
        return out
    model = models.LinearGaussianModel()
    n = args.n or 50
    seed = 0 if args.seed is None else args.seed
    sim = model.simulate(n, np.random.default_rng([seed, 0]))
    k = model.kalman(sim.y)
    io.write_csv(os.path.join(out, f"kalman_seed{seed}.csv"),
                 ["t", "y", "mean", "variance", "pred_mean", "pred_variance"],
                 [(t + 1, sim.y[t], k.means[t], k.variances[t], k.pred_means[t], k.pred_variances[t])
                  for t in range(n)])
    return out


def _lw_cell(cell):
    cfg, seed, data_path = cell
    model = _model(cfg)
    y, z, _ = _data(cfg, model, seed, data_path)
    tr = liu_west_filter(model, y, z, cfg.liu_west, np.random.default_rng([seed, 3]))
    header, rows = io.trace_rows(tr.coord_names, tr.means, tr.stds, {"ess": tr.ess, "unique": tr.unique})
    out = os.path.join(cfg.out, f"liuwest_seed{seed}.csv")
    io.write_csv(out, header, rows)
    return out, tr.status


def cmd_liu_west(args):
    cfg = _config(args)
    results = _map(_lw_cell, [(cfg, s, args.data) for s in cfg.seeds], args.workers)
    _save_config(cfg)
    # degeneracy is a recorded outcome of the baseline, not a failure of the command
    io.write_csv(os.path.join(cfg.out, "liuwest_status.csv"), ["seed", "status"],
                 [(s, st) for s, (_, st) in zip(cfg.seeds, results)])
    return [p for p, _ in results]


def cmd_export(args):
    if not args.input:
        raise ConfigError("input", "an input trace CSV is required")
    dst = args.out or os.path.splitext(args.input)[0] + "_long.csv"
    if os.path.isdir(dst):
        dst = os.path.join(dst, os.path.splitext(os.path.basename(args.input))[0] + "_long.csv")
    try:
        return io.export_long(args.input, dst, prefix=args.prefix)
    except (OSError, KeyError, ValueError) as err:
        raise DataError(f"cannot export {args.input}: {err}") from err


# -- parser -----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="seqlap", description="Sequential iterated-Laplace experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, algo=True):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="single seed (overrides the config's seed list)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--n", type=int, help="series length")
        sp.add_argument("--data", help="CSV with columns t,y[,x_true,z] instead of simulating")
        sp.add_argument("--workers", type=int, default=1, help="processes for multi-seed runs")
        if algo:
            sp.add_argument("--algo", choices=("sibs", "siem", "sig", "sig-rs", "sig-rsrp"))
        sp.add_argument("--outliers", help='outlier spec "t1,t2,t3:std"')

    common(sub.add_parser("simulate", help="simulate a data series"), algo=False)
    common(sub.add_parser("filter", help="run SIBS, SIEM or SIG over a series"))
    common(sub.add_parser("population", help="run SIG-RS or SIG-RSRP pools"))
    common(sub.add_parser("liu-west", help="run the Liu-West particle baseline"), algo=False)

    fb = sub.add_parser("fit-batch", help="batch iterLap on the local-level DLM posterior")
    fb.add_argument("--seed", type=int)
    fb.add_argument("--n", type=int)
    fb.add_argument("--out")
    fb.add_argument("--data")
    fb.add_argument("--m-max", dest="m_max", type=int, default=30)
    fb.add_argument("--config", help="accepted for symmetry; fit-batch has no config fields")

    orc = sub.add_parser("oracle", help="exact DLM grid posterior or Kalman traces")
    orc.add_argument("--kind", choices=("dlm", "kalman"), default="dlm")
    orc.add_argument("--seed", type=int)
    orc.add_argument("--n", type=int)
    orc.add_argument("--out")
    orc.add_argument("--data")
    orc.add_argument("--config")

    ex = sub.add_parser("export", help="convert a trace CSV to long format (series,t,mean,lo,hi)")
    ex.add_argument("input", nargs="?")
    ex.add_argument("--out")
    ex.add_argument("--prefix", default="")
    ex.add_argument("--config")
    return p


COMMANDS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "population": cmd_population,
    "fit-batch": cmd_fit_batch,
    "oracle": cmd_oracle,
    "liu-west": cmd_liu_west,
    "export": cmd_export,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (FilterError, PopulationError, IterLapError, SPDError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


if __name__ == "__main__":
    sys.exit(main())
