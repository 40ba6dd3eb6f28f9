"""Advection and diffusion operators on the station graph.

Two families live here:

* differentiable operators that feed the kriging model (diffusion Laplacian,
  learned advection matrix, and their mixture), built on :mod:`pgits.autodiff`;
* conservative numpy operators and an explicit-Euler integrator used to
  simulate concentration fields.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ParameterError, ShapeError, StabilityError

DEFAULT_K = 0.1
WINDFIELD_HIDDEN = 16


@dataclass(frozen=True)
class DiffusionConfig:
    k: float = DEFAULT_K

    def __post_init__(self):
        if not self.k > 0:
            raise ParameterError(f"diffusion coefficient must be positive, got {self.k}")


@dataclass
class PhysicsAdjacency:
    w_diff: Tensor
    w_adv: Tensor
    mu: Tensor
    w_phy: Tensor


def _square(w, what="matrix") -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"{what} must be square, got shape {w.shape}")
    return w


def normalized_laplacian(w_d) -> np.ndarray:
    """``I - D^-1/2 W D^-1/2``; zero-degree rows keep a unit diagonal."""
    w = _square(w_d, "adjacency")
    deg = w.sum(axis=1)
    dinv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    s = dinv[:, None] * w * dinv[None, :]
    return np.eye(len(w)) - 0.5 * (s + s.T)  # exact symmetry despite product rounding


def diffusion_adjacency(w_d, k: float = DEFAULT_K) -> np.ndarray:
    """W_diff = K * (I - D^-1/2 W_d D^-1/2)."""
    DiffusionConfig(k)
    return k * normalized_laplacian(w_d)


def diffusion_flux_operator(w_d, k: float = DEFAULT_K) -> np.ndarray:
    """Conservative diffusion operator ``K * (D - W_d)`` (zero row and column sums)."""
    DiffusionConfig(k)
    w = _square(w_d, "adjacency")
    return k * (np.diag(w.sum(axis=1)) - w)


# -- learned advection --------------------------------------------------------

def init_windfield(rng, hidden: int = WINDFIELD_HIDDEN) -> dict[str, Tensor]:
    return {
        "windfield.w1": ad.parameter(ad.uniform_init(rng, 2, (2, hidden)), "windfield.w1"),
        "windfield.b1": ad.parameter(ad.uniform_init(rng, 2, (hidden,)), "windfield.b1"),
        "windfield.w2": ad.parameter(ad.uniform_init(rng, hidden, (hidden, 1)), "windfield.w2"),
        "windfield.b2": ad.parameter(ad.uniform_init(rng, hidden, (1,)), "windfield.b2"),
    }


def wind_field_embed(wind_uv, params) -> Tensor:
    """Per-node scalar potential from wind: ``tanh(P W1 + b1) W2 + b2``.

    ``wind_uv`` has shape ``(..., n, 2)``; the result has shape ``(..., n, 1)``.
    The map is applied to each node independently.
    """
    wind = wind_uv.data if isinstance(wind_uv, Tensor) else np.asarray(wind_uv)
    if wind.shape[-1] != 2:
        raise ShapeError(f"wind must end in a U/V axis of size 2, got {wind.shape}")
    if not np.all(np.isfinite(wind)):
        raise DataError("wind input contains NaN or infinite values")
    x = wind_uv if isinstance(wind_uv, Tensor) else Tensor(wind)
    h = (x @ params["windfield.w1"] + params["windfield.b1"]).tanh()
    return h @ params["windfield.w2"] + params["windfield.b2"]


def advection_weights(p: Tensor, edges) -> Tensor:
    """W_p[i, j] = p_i - p_j on existing edges, zero elsewhere."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    if p.shape[-1] != 1:
        p = p.reshape(p.shape + (1,))
    edges = np.asarray(edges, dtype=bool)
    n = p.shape[-2]
    if edges.shape != (n, n):
        raise ShapeError(f"edge mask {edges.shape} does not match {n} nodes")
    return (p - p.transpose()) * edges.astype(p.data.dtype)


def advection_adjacency(p, edges) -> Tensor:
    """W_adv = I - D^-1/2 W_p D^-1/2 with D built from row sums of |W_p|."""
    w_p = advection_weights(p, edges)
    n = w_p.shape[-1]
    dinv = ad.inv_sqrt(w_p.abs().sum(axis=-1, keepdims=True))
    eye = np.eye(n, dtype=w_p.data.dtype)
    return eye - dinv * w_p * dinv.transpose()


def fuse_physics(w_adv, w_diff, mu_raw) -> PhysicsAdjacency:
    """W_phy = mu * W_adv + (1 - mu) * W_diff with mu = sigmoid(mu_raw)."""
    w_adv = w_adv if isinstance(w_adv, Tensor) else Tensor(w_adv)
    w_diff = w_diff if isinstance(w_diff, Tensor) else Tensor(w_diff)
    mu_raw = mu_raw if isinstance(mu_raw, Tensor) else Tensor(mu_raw)
    if w_adv.shape[-2:] != w_diff.shape[-2:]:
        raise ShapeError(f"W_adv {w_adv.shape} and W_diff {w_diff.shape} differ")
    mu = mu_raw.sigmoid()
    return PhysicsAdjacency(w_diff, w_adv, mu, mu * w_adv + (1.0 - mu) * w_diff)


# -- simulation ---------------------------------------------------------------

def local_offsets_km(coords) -> np.ndarray:
    """Equirectangular east/north offsets (km) between every pair of nodes, ``[i, j] = j - i``."""
    coords = np.asarray(coords, dtype=float)
    lat = np.radians(coords[:, 0])
    lon = np.radians(coords[:, 1])
    mid = 0.5 * (lat[:, None] + lat[None, :])
    east = (lon[None, :] - lon[:, None]) * np.cos(mid) * 6371.0088
    north = (lat[None, :] - lat[:, None]) * 6371.0088
    return np.stack([east, north], axis=-1)


def advection_flux_operator(rates) -> np.ndarray:
    """Flux operator F with dx/dt = -F x for nonnegative transfer rates.

    ``rates[i, j]`` is the rate v_{i->j}.  Node i gains ``x_j v_{j->i}`` and
    loses ``x_i v_{i->k}``; columns of F sum to zero so total mass is
    conserved.
    """
    v = _square(rates, "rate matrix")
    if np.any(v < 0):
        raise ParameterError("transfer rates must be nonnegative")
    v = v.copy()
    np.fill_diagonal(v, 0.0)
    return np.diag(v.sum(axis=1)) - v.T


def wind_transfer_rates(w_d, coords, wind_uv, scale: float = 1.0) -> np.ndarray:
    """Rates v_{i->j} = scale * W_d[i,j] * max(0, wind_i . unit(j - i))."""
    w = _square(w_d, "adjacency")
    off = local_offsets_km(coords)
    norm = np.linalg.norm(off, axis=-1, keepdims=True)
    unit = np.divide(off, norm, out=np.zeros_like(off), where=norm > 0)
    along = np.einsum("ijc,ic->ij", unit, np.asarray(wind_uv, dtype=float))
    return scale * w * np.maximum(along, 0.0)


def stable_dt(operator, decay: float = 0.0) -> float:
    """Largest admissible Euler step: 1 / (2 * max absolute row sum)."""
    a = np.asarray(operator, dtype=float) + decay * np.eye(len(operator))
    top = np.abs(a).sum(axis=1).max() if a.size else 0.0
    return np.inf if top == 0 else 1.0 / (2.0 * top)


def integrate_advection_diffusion(x0, w_diff, w_flux, steps: int, dt: float = 0.1,
                                  source=None, decay: float = 0.0) -> np.ndarray:
    """Explicit Euler for dx/dt = -(W_diff + W_flux) x + source - decay * x.

    Returns the ``(steps + 1, n)`` trajectory including ``x0``.  Raises
    :class:`StabilityError` when ``dt`` exceeds :func:`stable_dt`.
    """
    x = np.asarray(x0, dtype=float).copy()
    n = len(x)
    w_diff = np.zeros((n, n)) if w_diff is None else _square(w_diff, "W_diff")
    w_flux = np.zeros((n, n)) if w_flux is None else _square(w_flux, "W_flux")
    if w_diff.shape != (n, n) or w_flux.shape != (n, n):
        raise ShapeError("operators must match the state dimension")
    if not dt > 0:
        raise ParameterError(f"dt must be positive, got {dt}")
    if steps < 0:
        raise ParameterError(f"steps must be >= 0, got {steps}")
    op = w_diff + w_flux
    bound = stable_dt(op, decay)
    if dt >= bound:
        raise StabilityError(f"dt={dt} is unstable; use dt < {bound:.6g}", bound=bound)
    src = np.zeros(n) if source is None else np.broadcast_to(np.asarray(source, dtype=float), (n,))
    out = np.empty((steps + 1, n))
    out[0] = x
    for s in range(steps):
        x = x - dt * (op @ x) + dt * (src - decay * x)
        out[s + 1] = x
    return out


def write_trajectory_csv(path, trajectory, node_ids) -> None:
    """Long-format export with header ``step,node_id,value``."""
    trajectory = np.asarray(trajectory)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "node_id", "value"])
        for step, row in enumerate(trajectory):
            for nid, val in zip(node_ids, row):
                w.writerow([step, nid, repr(float(val))])
