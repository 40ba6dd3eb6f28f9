"""Kriging metrics, baselines and evaluation of trained models."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .data import KrigingData, stack_windows
from .errors import DataError, ParameterError, ShapeError
from .model import GraphContext, ModelConfig, forward
from .stations import StationGraph, pairwise_distances

MAPE_FLOOR = 1.0

# AQI-36, missing rate 0.5: (MAE, MAPE, MRE) reported for each method
AQI36_REFERENCE = {
    "KNN": (18.35, 0.50, 0.24),
    "KCN": (20.64, 0.62, 0.29),
    "IGNNK": (23.35, 0.78, 0.31),
    "DualSTN": (22.77, 0.90, 0.32),
    "INCREASE": (22.90, 1.07, 0.32),
    "KITS": (16.59, 0.39, 0.24),
    "PGITS": (16.36, 0.37, 0.23),
}


@dataclass
class MetricsReport:
    mae: float
    mape: float
    mre: float
    n_points: int
    n_mape_excluded: int = 0
    per_node: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mae": self.mae, "mape": self.mape, "mre": self.mre, "n_points": self.n_points,
                "n_mape_excluded": self.n_mape_excluded}


def compute_metrics(y_true, y_pred, omega=None, node_ids=None, mape_floor: float = MAPE_FLOOR) -> MetricsReport:
    """MAE, MAPE and MRE over the index set ``omega``.

    ``omega`` is a boolean mask shaped like ``y_true`` or an index array into
    its flattened form (default: every entry).  Entries with
    ``|y_true| < mape_floor`` are left out of MAPE only.  For 2-D inputs the
    last axis indexes nodes and a per-node MAE is reported.
    """
    y = np.asarray(y_true, dtype=float)
    yh = np.asarray(y_pred, dtype=float)
    if y.shape != yh.shape:
        raise ShapeError(f"y_true {y.shape} and y_pred {yh.shape} differ")
    if omega is None:
        sel = np.ones(y.shape, dtype=bool)
    else:
        omega = np.asarray(omega)
        if omega.dtype == bool:
            if omega.shape != y.shape:
                raise ShapeError(f"omega mask {omega.shape} does not match {y.shape}")
            sel = omega
        else:
            sel = np.zeros(y.size, dtype=bool)
            sel[omega.ravel().astype(int)] = True
            sel = sel.reshape(y.shape)
    n = int(sel.sum())
    if n == 0:
        raise DataError("evaluation index set is empty")
    err = np.abs(y[sel] - yh[sel])
    ref = np.abs(y[sel])
    if not (np.all(np.isfinite(err)) and np.all(np.isfinite(ref))):
        raise DataError("non-finite values inside the evaluation index set")
    keep = ref >= mape_floor
    mape = float(np.mean(err[keep] / ref[keep])) if keep.any() else float("nan")
    total = ref.sum()
    mre = float(err.sum() / total) if total > 0 else float("nan")
    per_node = {}
    if y.ndim == 2:
        ids = node_ids if node_ids is not None else list(range(y.shape[1]))
        for j, nid in enumerate(ids):
            col = sel[:, j]
            if col.any():
                per_node[nid] = (float(np.mean(np.abs(y[col, j] - yh[col, j]))), int(col.sum()))
    return MetricsReport(float(err.mean()), mape, mre, n, int((~keep).sum()), per_node)


# -- baselines -----------------------------------------------------------------

def knn_baseline(graph, y_obs, observed, k: int = 5, available=None) -> np.ndarray:
    """Each hidden node gets the mean of its ``k`` geographically nearest observed nodes.

    ``y_obs`` is ``(T, n)``; ``observed`` flags the ``n`` nodes whose values
    may be used.  Where a neighbour has no reading at a frame, the next
    nearest available observed node takes its place.  Observed nodes keep
    their own values.
    """
    stations = graph.stations if isinstance(graph, StationGraph) else graph
    y = np.asarray(y_obs, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    n_obs = int(observed.sum())
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    if k > n_obs:
        raise ParameterError(f"k={k} exceeds the {n_obs} observed nodes")
    avail = ~np.isnan(y) if available is None else np.asarray(available, dtype=bool) & ~np.isnan(y)
    dist = pairwise_distances(stations)
    obs_idx = np.flatnonzero(observed)
    out = y.copy()
    for i in np.flatnonzero(~observed):
        ranked = obs_idx[np.argsort(dist[i, obs_idx], kind="stable")]
        ok = avail[:, ranked]
        # position of each neighbour among the available ones of its frame
        order = np.cumsum(ok, axis=1)
        take = ok & (order <= k)
        cnt = take.sum(axis=1)
        vals = np.where(take, y[:, ranked], 0.0).sum(axis=1)
        out[:, i] = np.where(cnt > 0, vals / np.maximum(cnt, 1), np.nan)
    return out


def mean_baseline(y_obs, observed, available=None) -> np.ndarray:
    """Every hidden node gets the mean of the observed readings of its frame."""
    y = np.asarray(y_obs, dtype=float)
    observed = np.asarray(observed, dtype=bool)
    avail = ~np.isnan(y) if available is None else np.asarray(available, dtype=bool) & ~np.isnan(y)
    use = avail & observed[None, :]
    cnt = use.sum(axis=1)
    frame_mean = np.where(cnt > 0, np.where(use, y, 0.0).sum(axis=1) / np.maximum(cnt, 1), np.nan)
    out = y.copy()
    out[:, ~observed] = frame_mean[:, None]
    return out


# -- model evaluation ----------------------------------------------------------

def _frozen(params):
    return {k: Tensor(v.data) for k, v in params.items()}


def predict_windows(params, config: ModelConfig, graph, windows, visible, batch_size: int = 32):
    """Phase-1 estimates (normalized units) for each window, shape ``(T, n)`` each."""
    ctx = graph if isinstance(graph, GraphContext) else GraphContext.from_graph(graph, config.diffusion_k)
    frozen = _frozen(params)
    out = []
    for s in range(0, len(windows), batch_size):
        batch = stack_windows(windows[s:s + batch_size]).with_mask(visible)
        out.extend(forward(batch, ctx, frozen, config).data.astype(np.float64))
    return out


def assemble(windows, preds, n_hours: int, n_nodes: int) -> np.ndarray:
    """Scatter per-window predictions onto an ``(n_hours, n_nodes)`` grid (NaN where absent)."""
    grid = np.full((n_hours, n_nodes), np.nan)
    for w, p in zip(windows, preds):
        f = np.asarray(w.fresh, dtype=bool)
        grid[w.hours[f]] = p[f]
    return grid


def validation_mae(data: KrigingData, params, config: ModelConfig, windows=None) -> float:
    """Raw-unit MAE on validation stations, predicted from the other observed stations."""
    windows = data.val_windows() if windows is None else windows
    obs = data.nodes.observed
    graph = data.graph.subgraph(obs)
    is_val = np.isin(obs, data.nodes.val)
    preds = predict_windows(params, config, graph, [w.select(obs) for w in windows], ~is_val)
    grid = assemble(windows, preds, data.table.n_hours, len(obs))
    y = data.table.pm25[obs].T
    omega = ~np.isnan(grid) & ~np.isnan(y) & is_val[None, :]
    return compute_metrics(np.nan_to_num(y), data.normalizer.denormalize(np.nan_to_num(grid)), omega).mae


@dataclass
class Evaluation:
    y_true: np.ndarray  # (H, S) raw readings
    y_pred: np.ndarray  # (H, S) raw estimates, NaN off the evaluated hours
    omega: np.ndarray   # (H, S) evaluated entries
    report: MetricsReport


def evaluate_model(data: KrigingData, params, config: ModelConfig, split: str = "test") -> Evaluation:
    """Krige the hidden stations of ``split`` ("test" or "val") and score them in raw units."""
    nodes, hidden = _split_nodes(data, split)
    windows = data.val_windows() if split == "val" else data.test_windows()
    graph = data.graph.subgraph(nodes)
    preds = predict_windows(params, config, graph, [w.select(nodes) for w in windows], ~hidden)
    grid = data.normalizer.denormalize(assemble(windows, preds, data.table.n_hours, len(nodes)))
    y = data.table.pm25[nodes].T
    omega = ~np.isnan(grid) & ~np.isnan(y) & hidden[None, :]
    ids = [data.table.station_ids[i] for i in nodes]
    report = compute_metrics(np.nan_to_num(y), np.nan_to_num(grid), omega, node_ids=ids)
    return Evaluation(y, grid, omega, report)


def _split_nodes(data: KrigingData, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Node indices scored under ``split`` and the flags of those that are hidden."""
    if split == "val":
        nodes = data.nodes.observed
        return nodes, np.isin(nodes, data.nodes.val)
    if split == "test":
        nodes = np.arange(data.graph.n_nodes)
        return nodes, np.isin(nodes, data.nodes.unobserved)
    raise ParameterError(f"unknown split {split!r}")


def evaluate_baselines(data: KrigingData, omega, k: int = 5, split: str = "test") -> dict[str, MetricsReport]:
    """KNN and observed-mean predictors scored on the same entries as the model."""
    nodes, hidden = _split_nodes(data, split)
    y = data.table.pm25[nodes].T
    graph = data.graph.subgraph(nodes)
    ids = [data.table.station_ids[i] for i in nodes]
    out = {}
    for name, pred in (("KNN", knn_baseline(graph, y, ~hidden, k)),
                       ("observed-mean", mean_baseline(y, ~hidden))):
        ok = omega & ~np.isnan(pred)
        out[name] = compute_metrics(np.nan_to_num(y), np.nan_to_num(pred), ok, node_ids=ids)
    return out


# -- report files ----------------------------------------------------------------

def comparison_table(rows: dict[str, MetricsReport]) -> dict:
    """Measured rows next to the published reference rows."""
    return {
        "measured": {name: r.to_dict() for name, r in rows.items()},
        "reference_aqi36": {name: dict(zip(("mae", "mape", "mre"), v)) for name, v in AQI36_REFERENCE.items()},
    }


def write_report(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_per_node_csv(path, report: MetricsReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "mae", "n_points"])
        for nid, (mae, cnt) in report.per_node.items():
            w.writerow([nid, repr(mae), cnt])


def write_plot_csv(path, ev: Evaluation, node_ids, timestamps) -> None:
    """Rows ``node,true,pred,hour`` for every evaluated entry."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "true", "pred", "hour"])
        for h, j in zip(*np.nonzero(ev.omega)):
            w.writerow([node_ids[j], repr(float(ev.y_true[h, j])), repr(float(ev.y_pred[h, j])),
                        str(np.datetime64(timestamps[h], "h"))])
