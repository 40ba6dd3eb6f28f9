"""Increment training: virtual nodes per batch, two-phase NCR, losses, early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import KrigingData, WindowBatch, stack_windows
from .errors import DataError, DivergenceError, ParameterError
from .evaluation import validation_mae
from .model import GraphContext, ModelConfig, ModelParams, dynamic_graph, forward, init_params
from .stations import StationGraph, insert_virtual_nodes, make_training_masks, virtual_count

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.5
    batch_size: int = 32
    lr: float = 2e-4
    lam: float = 1.0
    beta: float = 0.05
    patience: int = 10
    max_epochs: int = 200
    clip_norm: float = 5.0
    seed: int = 0
    hide_real: float = 0.0

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise ParameterError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not 0 <= self.hide_real < 1:
            raise ParameterError(f"hide_real must lie in [0, 1), got {self.hide_real}")
        if self.lam < 0 or self.beta < 0:
            raise ParameterError("lambda and beta must be nonnegative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ParameterError("batch_size and max_epochs must be >= 1, patience >= 0")


@dataclass
class NcrOutput:
    phase1: Tensor
    pseudo_input: Tensor
    phase2: Tensor
    inverse_mask: np.ndarray


def ncr_pass(batch: WindowBatch, graph, params: ModelParams, config: ModelConfig) -> NcrOutput:
    """Phase 1 on the masked input, then phase 2 on the role-swapped pseudo input.

    The pseudo input keeps phase-1 estimates where the mask hides a node and
    is exactly zero elsewhere.  Both phases share parameters and the physics
    graph.
    """
    ctx = graph if isinstance(graph, GraphContext) else GraphContext.from_graph(graph, config.diffusion_k)
    single = batch.values.ndim == 2
    phys = dynamic_graph(batch.wind[None] if single else batch.wind, ctx, params)
    phase1 = forward(batch, ctx, params, config, phys=phys)
    inverse = ~batch.mask
    pseudo = ad.where(inverse, phase1, 0.0)
    swapped = WindowBatch(batch.values, batch.available | inverse, batch.wind, batch.hours, inverse, batch.fresh)
    phase2 = forward(swapped, ctx, params, config, phys=phys, x=pseudo)
    return NcrOutput(phase1, pseudo, phase2, inverse)


def masked_mae(pred: Tensor, target, where) -> Tensor:
    where = np.asarray(where, dtype=bool)
    count = int(where.sum())
    if count == 0:
        raise DataError("MAE over an empty index set")
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.data.dtype))
    diff = ((pred - target) * where.astype(pred.data.dtype)).abs()
    return diff.sum() * (1.0 / count)


def supervised_loss(ncr: NcrOutput, batch: WindowBatch, lam: float, pseudo_labels=None,
                    labelled=None) -> Tensor:
    """MAE on observed nodes plus ``lam`` times the phase-2 vs phase-1 MAE on all nodes.

    Phase-1 estimates enter the second term as constants; pass
    ``pseudo_labels`` to pin them to given values.  ``labelled`` widens the
    first term to hidden nodes whose readings are known (default: the mask).
    """
    obs = (batch.mask if labelled is None else np.asarray(labelled, dtype=bool)) & batch.available
    if not obs.any():
        raise DataError("no observed entries in the batch")
    labels = ncr.phase1.detach() if pseudo_labels is None else pseudo_labels
    sup = masked_mae(ncr.phase1, batch.values, obs)
    if lam == 0:
        return sup
    return sup + lam * masked_mae(ncr.phase2, labels, np.ones(ncr.phase2.shape, dtype=bool))


def physics_continuity_loss(phase2: Tensor) -> Tensor:
    """Mean squared change between consecutive frames (time is axis -2)."""
    t = phase2.shape[-2]
    if t < 2:
        raise ParameterError(f"continuity loss needs at least 2 frames, got {t}")
    d = phase2[..., 1:, :] - phase2[..., :-1, :]
    return (d * d).mean()


def total_loss(sup, phy, beta: float):
    return sup + beta * phy


def objective(batch, graph, params, config: ModelConfig, lam: float, beta: float, pseudo_labels=None,
              labelled=None):
    """Full loss and its parts for one batch: ``(total, sup, phy, ncr)``."""
    ncr = ncr_pass(batch, graph, params, config)
    sup = supervised_loss(ncr, batch, lam, pseudo_labels, labelled)
    phy = physics_continuity_loss(ncr.phase2)
    return total_loss(sup, phy, beta), sup, phy, ncr


def hide_labelled(mask: np.ndarray, share: float, seed: int) -> np.ndarray:
    """Hide ``round(share * visible)`` randomly chosen visible nodes.

    Their readings stay in the supervised loss, so the model is trained to
    krige real nodes rather than to echo inputs that reach a node back
    through two-hop paths.
    """
    visible = np.flatnonzero(mask)
    k = min(int(round(share * len(visible))), len(visible) - 1)
    out = mask.copy()
    if k > 0:
        out[ad.make_rng(seed).choice(visible, size=k, replace=False)] = False
    return out


# -- training loop ------------------------------------------------------------

def derived_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(keys)).generate_state(1)[0])


@dataclass
class TrainResult:
    params: ModelParams
    log: list[dict]
    best_val_mae: float
    best_epoch: int
    graph_sizes: list[int] = field(default_factory=list)
    inference_nodes: int = 0


def _snapshot(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def training_graph(data: KrigingData) -> tuple[StationGraph, np.ndarray]:
    """Real part of every training graph (observed stations) and its observed flags."""
    obs = data.nodes.observed
    return data.graph.subgraph(obs), ~np.isin(obs, data.nodes.val)


def train(data: KrigingData, config: TrainConfig, model_config: ModelConfig = ModelConfig(),
          log_path=None, checkpoint_path=None) -> TrainResult:
    """Fit the kriging model with the increment training strategy.

    Every batch gets its own virtual-node augmentation, so training graphs
    vary while always holding ``N_obs + M`` nodes, with
    ``M = ceil(alpha / (1 - alpha) * N_obs)``.  Validation MAE (raw units)
    on held-out observed stations drives early stopping; the best parameters
    are returned and, if ``checkpoint_path`` is set, written on every
    improvement.
    """
    from .autodiff import save_checkpoint

    windows = data.train_windows()
    if not windows:
        raise DataError("training split is empty")
    if len(data.nodes.val) == 0:
        raise DataError("validation split is empty")
    val_windows = data.val_windows()
    base_graph, observed = training_graph(data)
    n_train = base_graph.n_real
    m = virtual_count(n_train, config.alpha)
    inference_nodes = data.graph.n_nodes

    params = init_params(model_config, derived_seed(config.seed, 0))
    opt = ad.Adam(params, lr=config.lr)
    sub = data.nodes.observed
    history, sizes = [], []
    best, best_epoch, best_state, bad = math.inf, -1, None, 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            order = ad.make_rng(config.seed, 1, epoch).permutation(len(windows))
            totals = np.zeros(3)
            n_batches = 0
            for bi, start in enumerate(range(0, len(windows), config.batch_size)):
                idx = order[start:start + config.batch_size]
                graph = insert_virtual_nodes(base_graph, m, derived_seed(config.seed, 2, epoch, bi))
                mask, _ = make_training_masks(graph, config.alpha, derived_seed(config.seed, 3, epoch, bi),
                                              observed=observed)
                labelled = mask.copy()
                mask = hide_labelled(mask, config.hide_real, derived_seed(config.seed, 4, epoch, bi))
                sizes.append(graph.n_nodes)
                batch = stack_windows([windows[i] for i in idx]).select(sub).augment(graph).with_mask(mask)
                ctx = GraphContext.from_graph(graph, model_config.diffusion_k)

                opt.zero_grad()
                loss, sup, phy, _ = objective(batch, ctx, params, model_config, config.lam, config.beta,
                                              labelled=np.broadcast_to(labelled, batch.mask.shape))
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}: {loss.item()}")
                loss.backward()
                norm, clipped = ad.clip_grad_norm(params.values(), config.clip_norm)
                if clipped:
                    log.info("epoch %d batch %d: gradient norm %.3g clipped to %.3g",
                             epoch, bi, norm, config.clip_norm)
                opt.step()
                totals += (loss.item(), sup.item(), phy.item())
                n_batches += 1

            val = validation_mae(data, params, model_config, val_windows)
            mu = float(params["mu_raw"].sigmoid().item())
            means = totals / max(n_batches, 1)
            record = {"epoch": epoch, "train_loss": float(means[0]), "sup_loss": float(means[1]),
                      "phy_loss": float(means[2]), "val_mae": float(val), "mu": mu}
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.4f val_mae %.4f mu %.3f", epoch, means[0], val, mu)
            if val < best:
                best, best_epoch, bad = val, epoch, 0
                best_state = _snapshot(params)
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, params)
            else:
                bad += 1
            if bad >= config.patience:
                break
    finally:
        if log_fh:
            log_fh.close()

    for k, arr in best_state.items():
        params[k].data = arr
    return TrainResult(params, history, best, best_epoch, sizes, inference_nodes)

