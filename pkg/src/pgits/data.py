"""Observation tables, windowing, splits, normalization and synthetic data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .autodiff import make_rng
from .errors import DataError, ParameterError, StabilityError
from .physics import (
    advection_flux_operator,
    diffusion_flux_operator,
    integrate_advection_diffusion,
    stable_dt,
    wind_transfer_rates,
)
from .stations import Station, StationGraph, build_graph, gaussian_kernel_adjacency, pairwise_distances

OBS_HEADER = ["station_id", "timestamp", "pm25", "wind_u", "wind_v"]
TEST_MONTHS = (3, 6, 9, 12)


@dataclass
class ObservationTable:
    """Station x hour grid.  ``pm25`` holds NaN where no reading exists."""

    station_ids: list[str]
    timestamps: np.ndarray  # datetime64[h], shape (H,)
    pm25: np.ndarray  # (S, H)
    wind_u: np.ndarray  # (S, H)
    wind_v: np.ndarray  # (S, H)
    truth: np.ndarray | None = None  # noiseless field for synthetic data

    @property
    def available(self) -> np.ndarray:
        return ~np.isnan(self.pm25)

    @property
    def n_stations(self) -> int:
        return len(self.station_ids)

    @property
    def n_hours(self) -> int:
        return len(self.timestamps)

    @property
    def wind(self) -> np.ndarray:
        """(S, H, 2) wind vectors."""
        return np.stack([self.wind_u, self.wind_v], axis=-1)

    def reorder(self, station_ids) -> "ObservationTable":
        pos = {s: i for i, s in enumerate(self.station_ids)}
        missing = [s for s in station_ids if s not in pos]
        if missing:
            raise DataError(f"stations without observations: {', '.join(missing)}")
        idx = [pos[s] for s in station_ids]
        return replace(
            self, station_ids=list(station_ids), pm25=self.pm25[idx], wind_u=self.wind_u[idx],
            wind_v=self.wind_v[idx], truth=None if self.truth is None else self.truth[idx],
        )


def _to_float(text: str) -> float:
    # float() rounds correctly, so written values read back bit-identical
    try:
        v = float(text)
    except ValueError:
        return np.nan
    return v if math.isfinite(v) else np.nan


def load_csv(path, station_ids=None) -> ObservationTable:
    """Parse ``station_id,timestamp,pm25,wind_u,wind_v`` rows into an hourly grid.

    Blank pm25 cells stay NaN (unavailable).  If ``station_ids`` is given,
    rows naming other stations are rejected and the grid rows follow that
    order; stations with no rows are filled with NaN readings and zero wind.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        header = next(csv.reader(fh), None)
    if header is None or [h.strip() for h in header] != OBS_HEADER:
        raise DataError(f"{path}: expected header {','.join(OBS_HEADER)}")
    df = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=True)
    df = df.apply(lambda col: col.str.strip())
    order = list(station_ids) if station_ids is not None else list(dict.fromkeys(df["station_id"]))
    if df.empty:
        empty = np.zeros((len(order), 0))
        return ObservationTable(order, np.array([], dtype="datetime64[h]"), empty, empty.copy(), empty.copy())

    lines = df.index.to_numpy() + 2
    ts = pd.to_datetime(df["timestamp"], errors="coerce", format="ISO8601")
    num = {c: pd.Series([_to_float(v) for v in df[c]], dtype=float) for c in ("pm25", "wind_u", "wind_v")}
    bad = ts.isna().to_numpy()
    for c in ("pm25", "wind_u", "wind_v"):
        blank = (df[c] == "").to_numpy()
        bad |= num[c].isna().to_numpy() & ~(blank & (c == "pm25"))
    bad |= (num["pm25"] < 0).to_numpy()
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataError(f"{path}:{lines[i]}: malformed row {','.join(df.iloc[i])!r}")
    known = set(order)
    unknown = ~df["station_id"].isin(known).to_numpy()
    if unknown.any():
        i = int(np.flatnonzero(unknown)[0])
        raise DataError(f"{path}:{lines[i]}: unknown station {df['station_id'].iloc[i]!r}")

    if getattr(ts.dt, "tz", None) is not None:
        ts = ts.dt.tz_convert("UTC").dt.tz_localize(None)
    hours = ts.to_numpy().astype("datetime64[h]")
    sid = df["station_id"].to_numpy()
    for s in known:
        h = hours[sid == s]
        if len(h) > 1 and np.any(np.diff(h) <= np.timedelta64(0, "h")):
            i = int(np.flatnonzero(sid == s)[np.flatnonzero(np.diff(h) <= np.timedelta64(0, "h"))[0] + 1])
            raise DataError(f"{path}:{lines[i]}: timestamps for {s!r} are not strictly increasing")

    grid = np.arange(hours.min(), hours.max() + np.timedelta64(1, "h"), dtype="datetime64[h]")
    row = {s: i for i, s in enumerate(order)}
    r = np.array([row[s] for s in sid])
    c = (hours - grid[0]).astype(int)
    shape = (len(order), len(grid))
    pm25 = np.full(shape, np.nan)
    wu = np.zeros(shape)
    wv = np.zeros(shape)
    pm25[r, c] = num["pm25"].to_numpy(dtype=float)
    wu[r, c] = num["wind_u"].to_numpy(dtype=float)
    wv[r, c] = num["wind_v"].to_numpy(dtype=float)
    return ObservationTable(order, grid, pm25, wu, wv)


def _format_hour(t) -> str:
    return str(np.datetime64(t, "h")) + ":00:00"


def write_csv(table: ObservationTable, path, values: np.ndarray | None = None) -> None:
    """Write ``table`` in the observation schema; ``values`` overrides the pm25 column."""
    vals = table.pm25 if values is None else values
    stamps = [_format_hour(t) for t in table.timestamps]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBS_HEADER)
        for s, sid in enumerate(table.station_ids):
            for h, stamp in enumerate(stamps):
                v = vals[s, h]
                w.writerow([sid, stamp, "" if np.isnan(v) else repr(float(v)),
                            repr(float(table.wind_u[s, h])), repr(float(table.wind_v[s, h]))])


# -- splits and normalization ------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    test_months: tuple[int, ...] = TEST_MONTHS
    val_fraction: float = 0.1

    def __post_init__(self):
        if not set(self.test_months) <= set(range(1, 13)):
            raise ParameterError(f"test months must lie in 1..12, got {self.test_months}")
        if not 0 <= self.val_fraction < 1:
            raise ParameterError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")


def test_hours(timestamps, test_months=TEST_MONTHS) -> np.ndarray:
    """Boolean mask of hours falling in ``test_months``."""
    months = pd.DatetimeIndex(np.asarray(timestamps, dtype="datetime64[h]")).month.to_numpy()
    return np.isin(months, list(test_months))


@dataclass(frozen=True)
class NodeSplit:
    """Real-station roles; all arrays are sorted station indices."""

    observed: np.ndarray
    unobserved: np.ndarray
    val: np.ndarray

    @property
    def train(self) -> np.ndarray:
        return np.setdiff1d(self.observed, self.val)


def split_nodes(n: int, alpha: float, val_fraction: float, seed: int) -> NodeSplit:
    """Hide ``round(alpha * n)`` stations for kriging; hold out a share of the rest for validation."""
    if not 0 <= alpha < 1:
        raise ParameterError(f"alpha must lie in [0, 1), got {alpha}")
    rng = make_rng(seed, 11)
    perm = rng.permutation(n)
    n_unobs = int(round(alpha * n))
    unobs = np.sort(perm[:n_unobs])
    obs = np.sort(perm[n_unobs:])
    n_val = int(round(val_fraction * len(obs)))
    if val_fraction > 0:
        n_val = max(1, n_val)
    if n_val >= len(obs):
        raise ParameterError("validation split leaves no training stations")
    val = np.sort(rng.permutation(obs)[:n_val])
    return NodeSplit(obs, unobs, val)


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float
    eps: float = 1e-6

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / (self.std + self.eps)

    def denormalize(self, z):
        return np.asarray(z, dtype=float) * (self.std + self.eps) + self.mean


def fit_normalizer(table: ObservationTable, hours_mask, node_index) -> Normalizer:
    """z-score statistics over available readings of the given stations and hours."""
    vals = table.pm25[np.ix_(np.asarray(node_index, dtype=int), np.flatnonzero(hours_mask))]
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise DataError("no observed values to fit the normalizer")
    return Normalizer(float(vals.mean()), float(vals.std()))


# -- windows -------------------------------------------------------------------

@dataclass
class WindowBatch:
    """One window ``(T, n)`` or a stack of windows ``(B, T, n)``.

    ``values`` are normalized readings (0 where unavailable); ``x`` is the
    model input, equal to ``values`` where ``mask`` is set and exactly 0
    elsewhere.  ``fresh`` flags hours not already covered by an earlier
    window (only the tail window of a run overlaps).
    """

    values: np.ndarray
    available: np.ndarray
    wind: np.ndarray
    hours: np.ndarray
    mask: np.ndarray = None
    fresh: np.ndarray = None
    x: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.mask is None:
            self.mask = self.available.copy()
        if self.fresh is None:
            self.fresh = np.ones(self.hours.shape, dtype=bool)
        self.mask = self.mask & self.available
        self.x = np.where(self.mask, self.values, 0.0).astype(self.values.dtype)

    @property
    def n_nodes(self) -> int:
        return self.values.shape[-1]

    @property
    def window(self) -> int:
        return self.values.shape[-2]

    def with_mask(self, node_mask) -> "WindowBatch":
        """Restrict visibility to ``node_mask`` (broadcast over time)."""
        m = np.broadcast_to(np.asarray(node_mask, dtype=bool), self.values.shape)
        return WindowBatch(self.values, self.available, self.wind, self.hours, m & self.available, self.fresh)

    def select(self, index) -> "WindowBatch":
        index = np.asarray(index, dtype=int)
        return WindowBatch(self.values[..., index], self.available[..., index], self.wind[..., index, :],
                           self.hours, self.mask[..., index], self.fresh)

    def augment(self, graph: StationGraph) -> "WindowBatch":
        """Append empty virtual-node columns; wind is copied from each anchor."""
        if self.n_nodes != graph.n_real:
            raise DataError(f"batch has {self.n_nodes} nodes, graph has {graph.n_real} real nodes")
        src = graph.source_index()
        pad = self.values.shape[:-1] + (graph.n_virtual,)
        values = np.concatenate([self.values, np.zeros(pad, dtype=self.values.dtype)], axis=-1)
        avail = np.concatenate([self.available, np.zeros(pad, dtype=bool)], axis=-1)
        mask = np.concatenate([self.mask, np.zeros(pad, dtype=bool)], axis=-1)
        return WindowBatch(values, avail, self.wind[..., src, :], self.hours, mask, self.fresh)


def stack_windows(windows) -> WindowBatch:
    windows = list(windows)
    if not windows:
        raise DataError("cannot stack an empty list of windows")
    return WindowBatch(
        np.stack([w.values for w in windows]), np.stack([w.available for w in windows]),
        np.stack([w.wind for w in windows]), np.stack([w.hours for w in windows]),
        np.stack([w.mask for w in windows]), np.stack([w.fresh for w in windows]),
    )


def _runs(flags) -> list[tuple[int, int]]:
    idx = np.flatnonzero(flags)
    if idx.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[cuts + 1]])
    ends = np.concatenate([idx[cuts], [idx[-1]]]) + 1
    return list(zip(starts.tolist(), ends.tolist()))


def window_starts(length: int, t: int, stride: int | None = None, cover_tail: bool = False) -> list[int]:
    stride = t if stride is None else stride
    if t < 2:
        raise ParameterError(f"window length must be >= 2, got {t}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    starts = list(range(0, length - t + 1, stride))
    if cover_tail and length >= t and starts[-1] + t < length:
        starts.append(length - t)
    return starts


def make_windows(table: ObservationTable, t: int = 24, stride: int | None = None, hours=None,
                 normalizer: Normalizer | None = None, cover_tail: bool = False,
                 dtype=np.float32) -> list[WindowBatch]:
    """Cut ``table`` into ``(t, S)`` windows.

    Windows never straddle a gap in ``hours`` (a boolean hour mask, default
    all hours).  Values are z-scored with ``normalizer`` and set to 0 where
    unavailable.  With ``cover_tail`` each contiguous run ends in one extra
    window aligned to its last hour, whose already-covered hours are marked
    not fresh.
    """
    hours = np.ones(table.n_hours, dtype=bool) if hours is None else np.asarray(hours, dtype=bool)
    runs = _runs(hours)
    if t < 2:
        raise ParameterError(f"window length must be >= 2, got {t}")
    if not runs or max(e - s for s, e in runs) < t:
        raise ParameterError(f"window length {t} exceeds every contiguous series segment")
    normalizer = normalizer or Normalizer(0.0, 1.0, 0.0)
    avail = table.available.T
    vals = np.where(avail, normalizer.normalize(np.nan_to_num(table.pm25.T)), 0.0).astype(dtype)
    wind = table.wind.transpose(1, 0, 2).astype(dtype)
    out = []
    for s, e in runs:
        covered = s
        for off in window_starts(e - s, t, stride, cover_tail):
            a = s + off
            sl = slice(a, a + t)
            fresh = np.arange(a, a + t) >= covered if cover_tail else None
            out.append(WindowBatch(vals[sl], avail[sl], wind[sl], np.arange(a, a + t), fresh=fresh))
            covered = max(covered, a + t)
    return out


# -- dataset bundle --------------------------------------------------------------

@dataclass
class KrigingData:
    """A table plus every split decision needed for training and evaluation."""

    table: ObservationTable
    graph: StationGraph
    nodes: NodeSplit
    test_mask: np.ndarray
    normalizer: Normalizer
    window: int = 24
    stride: int | None = None

    @classmethod
    def prepare(cls, table: ObservationTable, stations, alpha=0.5, split: SplitSpec = SplitSpec(),
                seed=0, window=24, stride=None, delta=0.1, gamma=None) -> "KrigingData":
        stations = list(stations)
        table = table.reorder([s.id for s in stations])
        graph = build_graph(stations, gamma=gamma, delta=delta)
        nodes = split_nodes(len(stations), alpha, split.val_fraction, seed)
        test = test_hours(table.timestamps, split.test_months)
        norm = fit_normalizer(table, ~test, nodes.train)
        return cls(table, graph, nodes, test, norm, window, stride)

    def train_windows(self) -> list[WindowBatch]:
        return make_windows(self.table, self.window, self.stride, ~self.test_mask, self.normalizer)

    def val_windows(self) -> list[WindowBatch]:
        return make_windows(self.table, self.window, None, ~self.test_mask, self.normalizer, cover_tail=True)

    def test_windows(self) -> list[WindowBatch]:
        if not self.test_mask.any():
            raise DataError("test split is empty")
        return make_windows(self.table, self.window, None, self.test_mask, self.normalizer, cover_tail=True)


# -- synthetic data -------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the synthetic advection-diffusion generator.

    Rates are per hour; wind in m/s; concentrations in ug/m3.  Setting
    ``emission`` and ``decay`` to zero gives a closed, mass-conserving system.
    """

    start: str = "2014-05-01T00"
    diffusion: float = 0.5
    advection_scale: float = 0.1
    substeps: int = 40
    wind_mean: tuple[float, float] = (1.0, -0.5)
    wind_amplitude: float = 3.0
    wind_period: float = 72.0
    wind_diurnal: float = 1.0
    wind_noise: float = 0.3
    initial_mean: float = 60.0
    initial_std: float = 20.0
    emission: float = 1.2
    emission_hotspots: int = 4
    emission_diurnal: float = 0.4
    episode_std: float = 0.15
    episode_memory: float = 0.97
    decay: float = 0.06
    noise: float = 1.0
    missing: float = 0.0


def _spatial_field(coords, rng, n_blobs, scale) -> np.ndarray:
    """Smooth positive field: sum of Gaussian bumps around random stations."""
    c = np.asarray(coords, dtype=float)
    span = np.ptp(c, axis=0).max() or 1.0
    out = np.ones(len(c))
    for _ in range(n_blobs):
        centre = c[rng.integers(len(c))] + rng.normal(0, 0.1 * span, 2)
        width = scale * span * rng.uniform(0.5, 1.5)
        out += rng.uniform(0.5, 2.0) * np.exp(-np.sum((c - centre) ** 2, axis=1) / (2 * width ** 2))
    return out


def generate_synthetic(graph: StationGraph, hours: int, wind_model: SyntheticConfig = SyntheticConfig(),
                       seed: int = 0) -> ObservationTable:
    """Simulate an hourly PM2.5 field on ``graph`` by advection-diffusion.

    The state is advanced with explicit Euler in ``substeps`` steps per hour
    under hourly wind that varies sinusoidally in time and space.  Optional
    emissions (a smooth spatial field modulated diurnally and by a shared
    AR(1) episode factor) and first-order decay drive the field.  Readings
    are the state plus Gaussian noise, clipped at 0; ``truth`` keeps the
    noiseless state.
    """
    cfg = wind_model
    if graph.n_nodes < 2:
        raise ParameterError("synthetic generation needs at least two nodes")
    if hours < 0:
        raise ParameterError(f"hours must be >= 0, got {hours}")
    if cfg.substeps < 1:
        raise ParameterError("substeps must be >= 1")
    n = graph.n_nodes
    rng = make_rng(seed, 21)
    coords = graph.coords
    w_d = graph.adjacency
    diff_op = diffusion_flux_operator(w_d, cfg.diffusion) if cfg.diffusion > 0 else np.zeros((n, n))
    dt = 1.0 / cfg.substeps

    # a crude bound from the strongest wind keeps the error message useful before simulating
    peak = np.hypot(*cfg.wind_mean) + cfg.wind_amplitude + cfg.wind_diurnal + 4 * cfg.wind_noise
    worst = diff_op + advection_flux_operator(cfg.advection_scale * peak * w_d)
    bound = stable_dt(worst, cfg.decay)
    if dt >= bound:
        raise StabilityError(f"unstable synthetic config: substep {dt:.4g} h >= bound {bound:.4g} h; "
                             f"raise substeps above {int(np.ceil(1 / bound))}", bound=bound)

    rel = coords - coords.mean(axis=0)
    span = np.ptp(coords, axis=0).max() or 1.0
    phase = 2 * np.pi * (rel @ rng.normal(0, 0.5, 2)) / span
    base = _spatial_field(coords, rng, cfg.emission_hotspots, 0.25)
    init_field = _spatial_field(coords, rng, 3, 0.3)
    x = cfg.initial_mean + cfg.initial_std * (init_field - init_field.mean()) / (init_field.std() + 1e-12)
    x = np.maximum(x, 0.0)

    truth = np.zeros((n, hours))
    wind = np.zeros((n, hours, 2))
    episode = 0.0
    for h in range(hours):
        tt = float(h)
        swing = cfg.wind_amplitude * np.sin(2 * np.pi * tt / cfg.wind_period + phase)
        diurnal = cfg.wind_diurnal * np.sin(2 * np.pi * tt / 24.0)
        u = cfg.wind_mean[0] + swing + diurnal + cfg.wind_noise * rng.normal(size=n)
        v = cfg.wind_mean[1] + 0.5 * swing * np.cos(phase) - diurnal + cfg.wind_noise * rng.normal(size=n)
        wind[:, h, 0], wind[:, h, 1] = u, v
        rates = wind_transfer_rates(w_d, coords, wind[:, h], cfg.advection_scale)
        episode = cfg.episode_memory * episode + cfg.episode_std * rng.normal()
        src = cfg.emission * base * (1 + cfg.emission_diurnal * np.sin(2 * np.pi * (tt - 6) / 24.0)) * np.exp(episode)
        traj = integrate_advection_diffusion(x, diff_op, advection_flux_operator(rates), cfg.substeps, dt,
                                             source=src, decay=cfg.decay)
        x = traj[-1]
        truth[:, h] = x

    obs = truth + cfg.noise * rng.normal(size=truth.shape) if cfg.noise > 0 else truth.copy()
    obs = np.maximum(obs, 0.0) if cfg.noise > 0 else obs
    if cfg.missing > 0:
        obs[rng.uniform(size=obs.shape) < cfg.missing] = np.nan
    start = np.datetime64(cfg.start, "h")
    stamps = start + np.arange(hours).astype("timedelta64[h]")
    return ObservationTable(graph.ids, stamps, obs, wind[..., 0].copy(), wind[..., 1].copy(), truth)


def synthetic_stations(n: int = 36, seed: int = 0, centre=(39.92, 116.40), core_share: float = 0.7,
                       delta: float = 0.1, max_rounds: int = 100) -> list[Station]:
    """City-like layout: a dense core plus sparser suburbs.

    A station left without a neighbour inside the ``delta`` kernel radius is
    moved next to a randomly chosen other station, so none is cut off from
    the graph.
    """
    if n < 2:
        raise ParameterError("need at least two stations")
    rng = make_rng(seed, 31)
    n_core = int(round(core_share * n))
    off = np.concatenate([rng.normal(0, 1, (n_core, 2)) * (0.06, 0.08),
                          rng.normal(0, 1, (n - n_core, 2)) * (0.22, 0.28)])

    def place(o):
        return [Station(f"S{i:03d}", round(centre[0] + a, 5), round(centre[1] + b, 5))
                for i, (a, b) in enumerate(o)]

    for _ in range(max_rounds):
        stations = place(off)
        dist = pairwise_distances(stations)
        lonely = np.flatnonzero((gaussian_kernel_adjacency(dist, delta=delta) > 0).sum(axis=1) == 0)
        if lonely.size == 0:
            return stations
        # move into degrees; 111 km per degree of latitude
        reach = 0.5 * delta * dist.max() / 111.0
        for i in lonely:
            j = rng.choice(np.setdiff1d(np.arange(n), [i]))
            ang = rng.uniform(0, 2 * np.pi)
            off[i] = off[j] + reach * np.array([np.sin(ang), np.cos(ang) / np.cos(np.radians(centre[0]))])
    raise ParameterError("could not place stations without isolated nodes")
