"""Command line entry point.

    swarmbias run      --config scenario.yaml --out runs/a
    swarmbias sweep    --preset solver_validation --out runs/sweep
    swarmbias compare  --preset ipp_comparison --out runs/cmp
    swarmbias export-map --model runs/a/model.npz --out grid.csv
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import exports
from .config import ConfigError, ScenarioConfig, load_config, preset
from .field import Bounds, make_eval_grid
from .harness import load_model, run_comparison, run_noise_sweep, run_scenario


def _base_config(args) -> ScenarioConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = preset(args.preset)
    else:
        cfg = ScenarioConfig()
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    if getattr(args, "planner", None):
        kw["planner"] = args.planner
    if args.duration is not None:
        kw["duration"] = args.duration
    return replace(cfg, **kw) if kw else cfg


def _seeds(text: str) -> list[int]:
    if "-" in text and "," not in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def _floats(text: str) -> list[float]:
    return [float(s) for s in text.split(",")]


def _add_common(p: argparse.ArgumentParser, planner: bool = True) -> None:
    p.add_argument("--config", help="scenario YAML/JSON file")
    p.add_argument("--preset", choices=["solver_validation", "ipp_comparison"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--duration", type=float, help="override duration in seconds")
    if planner:
        p.add_argument("--planner", choices=["boustrophedon", "ipp", "fixed_waypoints"])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swarmbias", description="multi-drone GPS bias field estimation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario")
    _add_common(p)

    p = sub.add_parser("sweep", help="process-noise sweep")
    _add_common(p)
    p.add_argument("--sigmas", type=_floats, default=[round(0.05 * i, 2) for i in range(11)])
    p.add_argument("--seeds", type=_seeds, default=list(range(5)))

    p = sub.add_parser("compare", help="IPP vs boustrophedon")
    _add_common(p, planner=False)
    p.add_argument("--seeds", type=_seeds, default=list(range(5)))

    p = sub.add_parser("export-map", help="evaluate a saved model on a grid")
    p.add_argument("--model", required=True, help="model.npz written by 'run'")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--bounds", type=_floats, default=[0.0, 50.0, 0.0, 50.0], help="xmin,xmax,ymin,ymax")
    p.add_argument("--spacing", type=float, default=1.0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "export-map":
            model = load_model(args.model)
            grid = make_eval_grid(Bounds(*args.bounds), args.spacing)
            mean, var = model.predict(grid)
            exports.write_csv(args.out, ["x", "y", "mean_bx", "mean_by", "variance"],
                              np.column_stack([grid, mean, var]))
            print(f"wrote {len(grid)} grid points to {args.out}")
            return 0

        cfg = _base_config(args)
        out = Path(args.out)
        if args.command == "run":
            rec = run_scenario(replace(cfg, output_dir=str(out)))
            s = rec.summary()
            print(f"{s['n_ticks']} ticks, {s['n_deltas']} deltas, {s['n_nodes']} nodes; "
                  f"final map RMSE {s['final_map_rmse_m']:.4f} m -> {out}")
        elif args.command == "sweep":
            res = run_noise_sweep(cfg, args.sigmas, args.seeds, out_dir=out)
            for row in res.table:
                print(f"sigma={row['sigma']:.2f}  solver={row['mean_solver_rmse']:.4f}  "
                      f"map={row['mean_map_rmse']:.4f}  ok={row['n_ok']}")
            print(f"spearman rho = {res.spearman():.3f} -> {out}")
        elif args.command == "compare":
            res = run_comparison(replace(cfg, planner="ipp"), replace(cfg, planner="boustrophedon"),
                                 args.seeds, out_dir=out)
            for t in (5.0, 15.0, float(res.times[-1])):
                print(f"t={t:5.1f}s  ipp={res.mean_at('ipp', t):.4f}  "
                      f"boustrophedon={res.mean_at('boustrophedon', t):.4f}")
            print(f"-> {out}")
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
