"""Sensor-network graph: stations, distance kernel, virtual nodes, masks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import make_rng
from .errors import ConfigError, DataError, ParameterError, ShapeError

EARTH_RADIUS_KM = 6371.0088


@dataclass(frozen=True)
class Station:
    id: str
    lat: float
    lon: float
    is_virtual: bool = False

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise DataError(f"station {self.id!r}: coordinates out of range ({self.lat}, {self.lon})")


@dataclass
class StationGraph:
    """Real stations first, virtual stations appended; ``adjacency`` is W_d."""

    stations: list[Station]
    adjacency: np.ndarray
    anchors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __post_init__(self):
        n = len(self.stations)
        if self.adjacency.shape != (n, n):
            raise ShapeError(f"adjacency {self.adjacency.shape} does not match {n} stations")
        ids = [s.id for s in self.stations]
        if len(set(ids)) != n:
            raise DataError("station ids must be unique within a graph")
        flags = [s.is_virtual for s in self.stations]
        if any(flags[i] and not flags[i + 1] for i in range(n - 1)):
            raise DataError("virtual stations must follow all real stations")
        if len(self.anchors) != self.n_virtual:
            raise ShapeError("one anchor index is required per virtual station")

    @property
    def n_real(self) -> int:
        return sum(not s.is_virtual for s in self.stations)

    @property
    def n_virtual(self) -> int:
        return sum(s.is_virtual for s in self.stations)

    @property
    def n_nodes(self) -> int:
        return len(self.stations)

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.stations]

    @property
    def coords(self) -> np.ndarray:
        return np.array([[s.lat, s.lon] for s in self.stations], dtype=float)

    def source_index(self) -> np.ndarray:
        """Real-node index each node draws wind from: itself, or the anchor of a virtual node."""
        return np.concatenate([np.arange(self.n_real), self.anchors]).astype(int)

    def subgraph(self, index) -> "StationGraph":
        """Real-node subgraph keeping the existing edge weights."""
        index = np.asarray(index, dtype=int)
        if self.n_virtual:
            raise ParameterError("subgraph() is defined on real-node graphs only")
        return StationGraph([self.stations[i] for i in index], self.adjacency[np.ix_(index, index)].copy())


def load_stations(path) -> list[Station]:
    """Read a ``station_id,latitude,longitude`` CSV."""
    stations = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["station_id", "latitude", "longitude"]:
            raise DataError(f"{path}: expected header station_id,latitude,longitude")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                stations.append(Station(row[0].strip(), float(row[1]), float(row[2])))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return stations


def save_stations(stations, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "latitude", "longitude"])
        for s in stations:
            if not s.is_virtual:
                w.writerow([s.id, repr(float(s.lat)), repr(float(s.lon))])


def pairwise_distances(stations) -> np.ndarray:
    """Great-circle (haversine) distances in km."""
    if len(stations) < 2:
        raise ConfigError("pairwise_distances needs at least two stations")
    lat = np.radians([s.lat for s in stations])
    lon = np.radians([s.lon for s in stations])
    dlat = lat[:, None] - lat[None, :]
    dlon = lon[:, None] - lon[None, :]
    a = np.sin(dlat / 2) ** 2 + np.cos(lat[:, None]) * np.cos(lat[None, :]) * np.sin(dlon / 2) ** 2
    d = 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def normalized_distances(dist: np.ndarray) -> np.ndarray:
    top = dist.max()
    return dist / top if top > 0 else np.zeros_like(dist)


def default_gamma(dist: np.ndarray) -> float:
    """Kernel width: standard deviation of the normalized off-diagonal distances.

    Falls back to 1 when that spread is zero (two stations, or all pairs
    equally far apart).
    """
    d = normalized_distances(dist)
    iu = np.triu_indices(len(d), k=1)
    spread = float(np.std(d[iu])) if len(iu[0]) else 0.0
    return spread if spread > 0 else 1.0


def gaussian_kernel_adjacency(dist: np.ndarray, gamma: float | None = None, delta: float = 0.1) -> np.ndarray:
    """Thresholded Gaussian kernel on max-normalized distances.

    ``W[i, j] = exp(-d_ij**2 / gamma)`` when ``d_ij <= delta``, else 0, where
    ``d`` is ``dist`` divided by its largest entry.  The diagonal is zero.
    """
    dist = np.asarray(dist, dtype=float)
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ShapeError(f"distance matrix must be square, got {dist.shape}")
    if gamma is None:
        gamma = default_gamma(dist)
    if not gamma > 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    if not 0 < delta <= 1:
        raise ParameterError(f"delta must lie in (0, 1], got {delta}")
    d = normalized_distances(dist)
    w = np.where(d <= delta, np.exp(-(d ** 2) / gamma), 0.0)
    np.fill_diagonal(w, 0.0)
    return w


def build_graph(stations, gamma: float | None = None, delta: float = 0.1) -> StationGraph:
    stations = list(stations)
    w = gaussian_kernel_adjacency(pairwise_distances(stations), gamma, delta)
    return StationGraph(stations, w)


def insert_virtual_nodes(graph: StationGraph, m: int, rng_seed: int) -> StationGraph:
    """Append ``m`` virtual nodes.

    Each virtual node picks an anchor among the real nodes uniformly, links to
    it with weight 1, and links to each of the anchor's neighbours with one
    probability ``p ~ U[0, 1]`` drawn per virtual node.
    """
    if m < 0:
        raise ParameterError(f"virtual node count must be >= 0, got {m}")
    if graph.n_virtual:
        raise ParameterError("graph already carries virtual nodes")
    n = graph.n_real
    if n < 1:
        raise ParameterError("need at least one real node")
    if m == 0:
        return replace(graph, stations=list(graph.stations), adjacency=graph.adjacency.copy())

    rng = make_rng(rng_seed)
    real_w = graph.adjacency
    w = np.zeros((n + m, n + m))
    w[:n, :n] = real_w
    anchors = rng.integers(0, n, size=m)
    stations = list(graph.stations)
    taken = set(graph.ids)
    for k, a in enumerate(anchors):
        v = n + k
        p = rng.uniform(0.0, 1.0)
        neigh = np.flatnonzero(real_w[a] > 0)
        keep = neigh[rng.uniform(0.0, 1.0, size=len(neigh)) < p]
        for j in (a, *keep):
            w[v, j] = w[j, v] = 1.0
        vid = f"virtual-{k}"
        while vid in taken:
            vid = "_" + vid
        taken.add(vid)
        anchor = graph.stations[a]
        stations.append(Station(vid, anchor.lat, anchor.lon, is_virtual=True))
    return StationGraph(stations, w, anchors.astype(int))


def virtual_count(n_train: int, alpha: float) -> int:
    """Virtual nodes needed so a graph of ``n_train`` observed nodes matches missing rate ``alpha``."""
    if not 0 <= alpha < 1:
        raise ParameterError(f"alpha must lie in [0, 1), got {alpha}")
    # round first: 0.5/0.5*18 must give 18, not 18.000000000000004 -> 19
    return int(math.ceil(round(alpha / (1 - alpha) * n_train, 9)))


def make_training_masks(graph: StationGraph, alpha: float, rng_seed: int, observed=None):
    """Return ``(mask, inverse_mask)`` over all nodes of ``graph``.

    Observed real nodes are visible (1); virtual nodes and real nodes flagged
    unobserved in ``observed`` are hidden (0).  If fewer than
    ``round(alpha * n_nodes)`` nodes end up hidden, further observed real
    nodes are hidden at random until that count is reached.
    """
    if not 0 <= alpha < 1:
        raise ParameterError(f"alpha must lie in [0, 1), got {alpha}")
    n, n_real = graph.n_nodes, graph.n_real
    mask = np.zeros(n, dtype=bool)
    mask[:n_real] = True if observed is None else np.asarray(observed, dtype=bool)
    shortfall = int(round(alpha * n)) - int(np.count_nonzero(~mask))
    if shortfall > 0:
        visible = np.flatnonzero(mask)
        if shortfall >= len(visible):
            raise ParameterError("alpha leaves no visible node")
        rng = make_rng(rng_seed)
        mask[rng.choice(visible, size=shortfall, replace=False)] = False
    return mask, ~mask
