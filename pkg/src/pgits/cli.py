"""Command-line entry point: ``pgits {train,evaluate,infer,simulate,gradcheck}``.

Reports go to stdout as JSON, diagnostics to stderr.  Log verbosity comes
from the ``PGITS_LOG_LEVEL`` environment variable (default WARNING).

Exit codes:
    0  success
    1  gradient check above tolerance
    2  configuration error (missing file, bad key or value)
    3  training diverged
    4  checkpoint does not match the model shape
    5  unstable physics configuration
    6  data error (malformed CSV, empty split)
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, dump_config, load_config, override
from .data import KrigingData, generate_synthetic, load_csv, make_windows, synthetic_stations, write_csv
from .errors import ConfigError, DataError, DivergenceError, ParameterError, ShapeError, StabilityError
from .evaluation import (
    assemble,
    comparison_table,
    evaluate_baselines,
    evaluate_model,
    predict_windows,
    write_per_node_csv,
    write_plot_csv,
    write_report,
)
from .model import params_from_arrays
from .stations import build_graph, load_stations, save_stations

log = logging.getLogger("pgits")

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_SHAPE = 4
EXIT_UNSTABLE = 5
EXIT_DATA = 6

GRADCHECK_TOL = 1e-3
LOG_ENV = "PGITS_LOG_LEVEL"


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return override(cfg, seed=args.seed, alpha=getattr(args, "alpha", None), beta=getattr(args, "beta", None),
                    diffusion_k=getattr(args, "k", None), knn=getattr(args, "knn", None))


def _dataset(cfg: RunConfig) -> KrigingData:
    d = cfg.data
    if not d.observations or not d.stations:
        raise ConfigError("[data] observations and stations paths are required")
    for p in (d.observations, d.stations):
        if not Path(p).is_file():
            raise ConfigError(f"data file not found: {p}")
    stations = load_stations(d.stations)
    table = load_csv(d.observations, [s.id for s in stations])
    return KrigingData.prepare(table, stations, alpha=cfg.train.alpha, split=cfg.split, seed=cfg.train.seed,
                               window=cfg.model.window, stride=d.stride or None, delta=d.delta,
                               gamma=d.gamma or None)


def _load_params(path, cfg: RunConfig):
    if not path:
        raise ConfigError("--checkpoint is required")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return params_from_arrays(ad.load_checkpoint(path), cfg.model)


def cmd_train(args) -> int:
    from .training import train

    cfg = _run_config(args)
    data = _dataset(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    result = train(data, cfg.train, cfg.model, log_path=out / "train_log.jsonl", checkpoint_path=ckpt)
    _emit({"checkpoint": str(ckpt), "best_epoch": result.best_epoch, "best_val_mae": result.best_val_mae,
           "epochs": len(result.log), "inference_nodes": result.inference_nodes})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    data = _dataset(cfg)
    params = _load_params(args.checkpoint, cfg)
    ev = evaluate_model(data, params, cfg.model, args.split)
    rows = {"PGITS": ev.report}
    if args.knn is not None:
        rows.update(evaluate_baselines(data, ev.omega, cfg.knn, args.split))
    payload = {"split": args.split, **comparison_table(rows)}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_report(out / "report.json", payload)
        write_per_node_csv(out / "per_node.csv", ev.report)
        write_plot_csv(out / "estimates.csv", ev, data.table.station_ids, data.table.timestamps)
    _emit(payload)
    return EXIT_OK


def cmd_infer(args) -> int:
    """Estimate every station over every hour; observed stations keep their readings."""
    cfg = _run_config(args)
    data = _dataset(cfg)
    params = _load_params(args.checkpoint, cfg)
    table = data.table
    visible = np.zeros(data.graph.n_nodes, dtype=bool)
    visible[data.nodes.observed] = True
    windows = make_windows(table, cfg.model.window, None, None, data.normalizer, cover_tail=True)
    preds = predict_windows(params, cfg.model, data.graph, windows, visible)
    grid = data.normalizer.denormalize(assemble(windows, preds, table.n_hours, data.graph.n_nodes)).T
    values = np.where(visible[:, None], table.pm25, grid)
    if not args.out:
        raise ConfigError("--out is required for infer")
    write_csv(table, args.out, values)
    _emit({"out": str(args.out), "estimated_stations": [table.station_ids[i] for i in data.nodes.unobserved],
           "hours": int(table.n_hours)})
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    seed = cfg.train.seed
    if args.stations or cfg.data.stations:
        path = args.stations or cfg.data.stations
        if not Path(path).is_file():
            raise ConfigError(f"station file not found: {path}")
        stations = load_stations(path)
    else:
        stations = synthetic_stations(cfg.simulate.n_stations, seed, delta=cfg.data.delta)
    hours = cfg.simulate.hours if args.hours is None else args.hours
    graph = build_graph(stations, gamma=cfg.data.gamma or None, delta=cfg.data.delta)
    table = generate_synthetic(graph, hours, cfg.synthetic, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_stations(stations, out / "stations.csv")
    write_csv(table, out / "observations.csv")
    write_csv(table, out / "ground_truth.csv", table.truth)
    _emit({"out": str(out), "stations": len(stations), "hours": int(hours), "seed": seed})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    res = run_gradcheck(seed=args.seed or 0)
    ok = res.max_rel_error < GRADCHECK_TOL
    _emit({"max_rel_error": res.max_rel_error, "worst_parameter": res.worst, "entries_checked": res.n_checked,
           "tolerance": GRADCHECK_TOL, "passed": ok})
    return EXIT_OK if ok else EXIT_GRADCHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgits", description="Physics-guided graph kriging of PM2.5.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, physics=False):
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--seed", type=int, help="override [train] seed")
        p.add_argument("--alpha", type=float, help="missing rate")
        if checkpoint:
            p.add_argument("--checkpoint", help="model checkpoint path")
        if physics:
            p.add_argument("--beta", type=float, help="physics loss weight")
            p.add_argument("--k", type=float, help="diffusion coefficient K")
        return p

    p = common(sub.add_parser("train", help="fit a model"), checkpoint=True, physics=True)
    p.add_argument("--out", default="run", help="output directory (log, config, checkpoint)")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("evaluate", help="score a checkpoint"), checkpoint=True)
    p.add_argument("--k", type=float, help="diffusion coefficient K")
    p.add_argument("--split", choices=("test", "val"), default="test")
    p.add_argument("--knn", type=int, nargs="?", const=5, help="add KNN and observed-mean rows (k, default 5)")
    p.add_argument("--out", help="directory for report.json, per_node.csv, estimates.csv")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("infer", help="krige unobserved stations over all hours"), checkpoint=True)
    p.add_argument("--k", type=float, help="diffusion coefficient K")
    p.add_argument("--out", help="output CSV in the observation schema")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("simulate", help="generate a synthetic advection-diffusion dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--stations", help="station CSV (default: synthetic layout)")
    p.add_argument("--hours", type=int)
    p.add_argument("--out", default="synthetic", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the training loss")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except DivergenceError as exc:
        code, msg = EXIT_DIVERGED, f"training diverged: {exc}"
    except ShapeError as exc:
        code, msg = EXIT_SHAPE, f"shape mismatch: {exc}"
    except StabilityError as exc:
        bound = "unknown" if exc.bound is None else f"{exc.bound:.6g}"
        code, msg = EXIT_UNSTABLE, f"unstable physics (stable step bound {bound}): {exc}"
    except DataError as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except ParameterError as exc:
        code, msg = EXIT_CONFIG, f"invalid parameter: {exc}"
    print(msg, file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
