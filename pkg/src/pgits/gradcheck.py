"""Finite-difference verification of the full training loss on a toy problem."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import WindowBatch
from .model import GraphContext, ModelConfig, init_params
from .stations import Station, build_graph, insert_virtual_nodes, make_training_masks
from .training import objective

TOY_STATIONS = [
    Station("A", 39.90, 116.40),
    Station("B", 39.91, 116.41),
    Station("C", 39.93, 116.40),
]


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst: str
    n_checked: int
    per_param: dict


def toy_problem(seed: int = 0, window: int = 6):
    """Three real stations plus one virtual node, one window of ``window`` hours."""
    graph = insert_virtual_nodes(build_graph(TOY_STATIONS, delta=1.0), 1, rng_seed=seed)
    rng = ad.make_rng(seed, 7)
    n = graph.n_nodes
    values = rng.normal(size=(window, n))
    values[:, graph.n_real:] = 0.0
    available = np.ones((window, n), dtype=bool)
    available[:, graph.n_real:] = False
    wind = rng.normal(size=(window, n, 2)) * 2.0
    wind[:, graph.n_real:] = wind[:, graph.anchors]
    mask, _ = make_training_masks(graph, 0.5, seed)
    batch = WindowBatch(values, available, wind, np.arange(window)).with_mask(mask)
    return graph, batch


def relative_error(a, b, floor: float = 1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def run_gradcheck(seed: int = 0, eps: float = 1e-4, feature_dim: int = 4, layers: int = 2,
                  lam: float = 1.0, beta: float = 0.5) -> GradcheckResult:
    """Compare every analytic parameter gradient with central differences.

    Runs in float64.  The phase-1 pseudo labels are frozen at their value for
    the unperturbed parameters, matching the stop-gradient in the loss, so
    both sides differentiate the same function.
    """
    config = ModelConfig(layers=layers, feature_dim=feature_dim, window=6)
    with ad.precision(np.float64):
        graph, batch = toy_problem(seed, config.window)
        ctx = GraphContext.from_graph(graph, config.diffusion_k)
        params = init_params(config, seed, zero_readout=False)
        params["mu_raw"].data = np.array(0.3)
        loss, _, _, ncr = objective(batch, ctx, params, config, lam, beta)
        labels = ncr.phase1.detach()
        loss.backward()

        def f():
            return objective(batch, ctx, params, config, lam, beta, pseudo_labels=labels)[0].item()

        worst, worst_name, per, count = 0.0, "", {}, 0
        for name, p in params.items():
            analytic = p.grad
            numeric = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + eps
                up = f()
                flat[i] = keep - eps
                down = f()
                flat[i] = keep
                numeric.reshape(-1)[i] = (up - down) / (2 * eps)
            err = float(relative_error(analytic, numeric).max()) if numeric.size else 0.0
            per[name] = err
            count += numeric.size
            if err > worst:
                worst, worst_name = err, name
    return GradcheckResult(worst, worst_name, count, per)
