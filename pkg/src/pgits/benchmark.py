"""Seeded synthetic benchmark: train on advection-diffusion data, score against baselines."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

from .data import KrigingData, SyntheticConfig, generate_synthetic, synthetic_stations
from .evaluation import evaluate_baselines, evaluate_model
from .model import ModelConfig
from .stations import build_graph
from .training import TrainConfig, train


@dataclass(frozen=True)
class BenchmarkConfig:
    n_stations: int = 36
    hours: int = 2000
    seed: int = 0
    stride: int = 4
    knn: int = 5
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=60, patience=15, hide_real=0.5))
    model: ModelConfig = field(default_factory=ModelConfig)


def synthetic_dataset(cfg: BenchmarkConfig) -> KrigingData:
    stations = synthetic_stations(cfg.n_stations, cfg.seed)
    table = generate_synthetic(build_graph(stations), cfg.hours, cfg.synthetic, cfg.seed)
    return KrigingData.prepare(table, stations, alpha=cfg.train.alpha, seed=cfg.seed,
                               window=cfg.model.window, stride=cfg.stride)


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), log_path=None) -> dict:
    """Train, then report test MAE/MAPE/MRE for the model, KNN and the observed mean."""
    data = synthetic_dataset(cfg)
    train_cfg = replace(cfg.train, seed=cfg.seed)
    t0 = time.perf_counter()
    result = train(data, train_cfg, cfg.model, log_path=log_path)
    seconds = time.perf_counter() - t0
    ev = evaluate_model(data, result.params, cfg.model, "test")
    rows = {"PGITS": ev.report, **evaluate_baselines(data, ev.omega, cfg.knn, "test")}
    return {
        "train_seconds": seconds,
        "epochs": len(result.log),
        "best_epoch": result.best_epoch,
        "best_val_mae": result.best_val_mae,
        "graph_sizes": sorted(set(result.graph_sizes)),
        "inference_nodes": result.inference_nodes,
        "test": {name: r.to_dict() for name, r in rows.items()},
    }
