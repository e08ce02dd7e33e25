"""Command-line entry points for simulations, averaging and rate sweeps.

Every subcommand takes ``--config`` (JSON or flat key=value file; see
ExperimentConfig for the schema) plus overrides for seed, output directory
and thread count, and writes machine-readable CSV/JSON into the output
directory.
"""

from __future__ import annotations

import argparse
import json
import math
import sys as _sys
from pathlib import Path

import numpy as np

from .averaging import save_table, tabulate_coefficients
from .engine import simulate_coupled_pair
from .errors import SlowFastError
from .harness import (ExperimentConfig, run_fluctuation_sweep, run_id,
                      run_kappa_curves, run_strong_sweep, run_weak_sweep)
from .noise import NoiseStream
from .poisson import solve_poisson


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_file(args.config)
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    if args.threads is not None:
        cfg.threads = args.threads
    return cfg


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON or key=value config file")
    p.add_argument("--seed", type=int, default=None, help="override RNG seed")
    p.add_argument("--out-dir", default=None, help="override output directory")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for path batches")


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    sys_ = cfg.build_system()
    eps = args.eps if args.eps is not None else cfg.eps_list[0]
    pair = simulate_coupled_pair(
        sys_, eps, cfg.x0, cfg.y0, cfg.T, cfg.n_macro,
        NoiseStream(cfg.seed, path_index=args.path_index),
        h_rel=cfg.h_rel, coeffs=cfg.resolve_coefficients(sys_))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trajectory.csv"
    times = pair.grid.times()
    with open(path, "w", newline="\n") as fh:
        fh.write("t,y_eps,y_bar,z\n")
        scale = 1.0 / math.sqrt(eps)
        for k in range(len(times)):
            z = (pair.y_eps[k, 0] - pair.y_bar[k, 0]) * scale
            fh.write(f"{times[k]:.17g},{pair.y_eps[k, 0]:.17g},"
                     f"{pair.y_bar[k, 0]:.17g},{z:.17g}\n")
    print(f"wrote {path} (eps={eps:g}, run {run_id(cfg)})")
    return 0


def cmd_average(args) -> int:
    cfg = _load_config(args)
    sys_ = cfg.build_system()
    if cfg.y_grid is not None:
        y_grid = np.asarray(cfg.y_grid, dtype=float)
    else:
        y_grid = np.linspace(-2.0, 2.0, 9)
    table = tabulate_coefficients(sys_, y_grid, seed=cfg.seed,
                                  threads=cfg.threads)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "coefficients.json"
    save_table(path, table)
    print(f"wrote {path} ({len(y_grid)} grid points)")
    return 0


def cmd_poisson(args) -> int:
    cfg = _load_config(args)
    sys_ = cfg.build_system()
    if sys_.oracles is None or sys_.oracles.bar_F is None:
        raise SystemExit("poisson subcommand needs a system with a bar_F oracle "
                         "to center the source")
    bar_F = sys_.oracles.bar_F

    def source(t, x, y):
        return np.asarray(sys_.F(t, x, y), dtype=float) - bar_F(t, y)

    val = solve_poisson(sys_, source, args.t, args.x, [cfg.y0],
                        n_paths=cfg.n_paths, seed=cfg.seed,
                        threads=cfg.threads)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "t": args.t, "x": args.x, "y": cfg.y0,
        "value": val.value.tolist(), "se": val.se.tolist(),
        "tail_bound": val.tail_bound, "t_trunc": val.t_trunc,
        "n_paths": val.n_paths, "run_id": run_id(cfg),
    }
    path = out / "poisson.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    print(f"wrote {path}: value={val.value.tolist()} se={val.se.tolist()}")
    return 0


def cmd_strong(args) -> int:
    cfg = _load_config(args)
    res = run_strong_sweep(cfg)
    print(f"strong sweep: slope={res.fit.slope:.4f} "
          f"ci=({res.fit.slope_ci[0]:.4f}, {res.fit.slope_ci[1]:.4f}) "
          f"-> {res.csv_paths['strong']}")
    return 0


def cmd_weak(args) -> int:
    cfg = _load_config(args)
    # emit outputs even when a noise-floor series cannot be fitted; the JSON
    # records None for that series
    res = run_weak_sweep(cfg, require_fit=False)
    for name, fit in res.per_phi_fits.items():
        slope = f"{fit.slope:.4f}" if fit else "n/a (censored)"
        print(f"weak sweep [{name}]: slope={slope}")
    print(f"-> {res.json_path}")
    return 0


def cmd_fluctuation(args) -> int:
    cfg = _load_config(args)
    res = run_fluctuation_sweep(cfg)
    print(f"fluctuation sweep: slope={res.fit.slope:.4f} "
          f"-> {res.csv_paths['fluctuation']}")
    return 0


def cmd_kappa(args) -> int:
    cfg = _load_config(args)
    out = run_kappa_curves(cfg)
    curves = out["curves"]
    print(f"kappa curves: kappa1 slope="
          f"{curves.kappa1_slope if curves.kappa1_slope is not None else 'n/a'} "
          f"-> {out['csv']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="slowfast",
        description="Monte Carlo toolkit for non-autonomous slow-fast SDEs")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="one coupled trajectory to CSV")
    _add_common(sp)
    sp.add_argument("--eps", type=float, default=None)
    sp.add_argument("--path-index", type=int, default=0)
    sp.set_defaults(fn=cmd_simulate)

    sp = sub.add_parser("average", help="tabulate averaged coefficients")
    _add_common(sp)
    sp.set_defaults(fn=cmd_average)

    sp = sub.add_parser("poisson", help="pointwise Poisson solution")
    _add_common(sp)
    sp.add_argument("--t", type=float, default=0.0)
    sp.add_argument("--x", type=float, default=1.0)
    sp.set_defaults(fn=cmd_poisson)

    sp = sub.add_parser("strong-sweep", help="pathwise averaging-rate sweep")
    _add_common(sp)
    sp.set_defaults(fn=cmd_strong)

    sp = sub.add_parser("weak-sweep", help="weak deviation-rate sweep")
    _add_common(sp)
    sp.set_defaults(fn=cmd_weak)

    sp = sub.add_parser("fluctuation-sweep", help="time-integral fluctuation sweep")
    _add_common(sp)
    sp.set_defaults(fn=cmd_fluctuation)

    sp = sub.add_parser("kappa-curves", help="time-averaging residual curves")
    _add_common(sp)
    sp.set_defaults(fn=cmd_kappa)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SlowFastError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return 2


if __name__ == "__main__":
    _sys.exit(main())
