"""Kriging network: dynamic physics graph -> STGC stack -> per-node readout."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import WindowBatch
from .errors import ContractError, ParameterError, ShapeError
from .physics import (
    DEFAULT_K,
    PhysicsAdjacency,
    advection_adjacency,
    diffusion_adjacency,
    fuse_physics,
    init_windfield,
    wind_field_embed,
)
from .stations import StationGraph

GC_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    feature_dim: int = 64
    window: int = 24
    m_halo: int = 1
    windfield_hidden: int = 16
    diffusion_k: float = DEFAULT_K
    residual: bool = True
    # starting advection share; the advection term is O(1/degree) and swamps
    # K * L at mu = 0.5, so training starts near the diffusion end
    mu_init: float = 0.05

    def __post_init__(self):
        if self.layers < 1 or self.feature_dim < 1 or self.windfield_hidden < 1:
            raise ParameterError("layers, feature_dim and windfield_hidden must be >= 1")
        if self.window < 2 or self.m_halo < 0:
            raise ParameterError(f"need window >= 2 and m_halo >= 0, got {self.window}, {self.m_halo}")
        if not self.diffusion_k > 0:
            raise ParameterError(f"diffusion coefficient must be positive, got {self.diffusion_k}")
        if not 0 < self.mu_init < 1:
            raise ParameterError(f"mu_init must lie in (0, 1), got {self.mu_init}")

    def to_dict(self) -> dict:
        return asdict(self)


ModelParams = dict  # name -> Tensor


def init_params(config: ModelConfig, seed: int, zero_readout: bool = True) -> ModelParams:
    """Uniform(+-1/sqrt(fan_in)) weights; the readout starts at zero unless told otherwise."""
    rng = ad.make_rng(seed, 1)
    d = config.feature_dim
    params = init_windfield(rng, config.windfield_hidden)
    params["mu_raw"] = ad.parameter(np.array(np.log(config.mu_init / (1 - config.mu_init))), "mu_raw")
    params["embed.w"] = ad.parameter(ad.uniform_init(rng, 2, (2, d)), "embed.w")
    params["embed.b"] = ad.parameter(ad.uniform_init(rng, 2, (d,)), "embed.b")
    fan = (2 * config.m_halo + 1) * d
    for layer in range(config.layers):
        params[f"stgc.{layer}.w"] = ad.parameter(ad.uniform_init(rng, fan, (fan, d)), f"stgc.{layer}.w")
        params[f"stgc.{layer}.b"] = ad.parameter(ad.uniform_init(rng, fan, (d,)), f"stgc.{layer}.b")
    if zero_readout:
        params["readout.w"] = ad.parameter(np.zeros((d, 1)), "readout.w")
        params["readout.b"] = ad.parameter(np.zeros((1,)), "readout.b")
    else:
        params["readout.w"] = ad.parameter(ad.uniform_init(rng, d, (d, 1)), "readout.w")
        params["readout.b"] = ad.parameter(ad.uniform_init(rng, d, (1,)), "readout.b")
    return params


def expected_shapes(config: ModelConfig) -> dict[str, tuple]:
    with ad.precision(np.float64):
        return {k: v.shape for k, v in init_params(config, 0).items()}


def params_from_arrays(arrays, config: ModelConfig) -> ModelParams:
    """Wrap loaded checkpoint arrays, checking names and shapes against ``config``."""
    want = expected_shapes(config)
    if set(arrays) != set(want):
        extra = sorted(set(arrays) ^ set(want))
        raise ShapeError(f"checkpoint parameters do not match the model: {', '.join(extra)}")
    for k, shape in want.items():
        if tuple(arrays[k].shape) != tuple(shape):
            raise ShapeError(f"parameter {k}: checkpoint shape {arrays[k].shape}, model expects {shape}")
    return {k: ad.parameter(arrays[k], k) for k in want}


@dataclass
class GraphContext:
    """Static per-graph quantities reused by every forward pass on that graph."""

    n_nodes: int
    edges: np.ndarray
    w_diff: np.ndarray

    @classmethod
    def from_graph(cls, graph: StationGraph | np.ndarray, k: float = DEFAULT_K) -> "GraphContext":
        w = graph.adjacency if isinstance(graph, StationGraph) else np.asarray(graph, dtype=float)
        return cls(len(w), w > 0, diffusion_adjacency(w, k))


def dynamic_graph(wind, ctx: GraphContext, params: ModelParams) -> PhysicsAdjacency:
    """Per-window W_phy from the window's mean wind.  ``wind``: ``(B, T, n, 2)``."""
    dtype = params["mu_raw"].data.dtype
    mean_wind = np.asarray(wind, dtype=dtype).mean(axis=-3)
    p = wind_field_embed(mean_wind, params)
    w_adv = advection_adjacency(p, ctx.edges)
    return fuse_physics(w_adv, ctx.w_diff.astype(dtype), params["mu_raw"])


def remove_self_loops(w: Tensor) -> Tensor:
    n = w.shape[-1]
    return w * (1.0 - np.eye(n, dtype=w.data.dtype))


def _normalize_rows(w: Tensor) -> Tensor:
    return ad.safe_div(w, w.abs().sum(axis=-1, keepdims=True), GC_EPS)


def stgc_layer(z: Tensor, w_phy_minus: Tensor, params: ModelParams, layer: int, m_halo: int = 1,
               gate: np.ndarray | None = None) -> Tensor:
    """One spatio-temporal graph convolution.

    ``z`` is ``(B, T, n, D)``; ``w_phy_minus`` is ``(n, n)`` or ``(B, n, n)``
    with a zero diagonal.  With ``gate`` (``(B, T, n)``, 1 for nodes whose
    input is known) only gated neighbours contribute in each frame, which
    makes the aggregate a masked mean.  Rows are scaled to unit absolute
    sum, every frame is aggregated over neighbours, frames ``t-m .. t+m`` are
    concatenated (edge frames replicated at the window boundary) and passed
    through a ReLU-activated dense map.
    """
    w = w_phy_minus if isinstance(w_phy_minus, Tensor) else Tensor(w_phy_minus)
    diag = np.diagonal(w.data, axis1=-2, axis2=-1)
    if np.any(diag != 0):
        raise ContractError("STGC adjacency must have its self-loops removed (zero diagonal)")
    if z.ndim != 4:
        raise ShapeError(f"STGC features must be (B, T, n, D), got {z.shape}")
    b, t = z.shape[:2]
    if w.ndim == 3:
        w = w.reshape(w.shape[0], 1, w.shape[1], w.shape[2])
    if gate is not None:
        g = np.asarray(gate, dtype=w.data.dtype)
        if g.shape != (b, t, z.shape[2]):
            raise ShapeError(f"gate {g.shape} does not match features {z.shape[:3]}")
        w = w * g[:, :, None, :]
    wn = _normalize_rows(w)
    if m_halo:
        z = ad.concat([z[:, :1]] * m_halo + [z] + [z[:, -1:]] * m_halo, axis=1)
    if gate is not None and m_halo:
        wn = ad.concat([wn[:, :1]] * m_halo + [wn] + [wn[:, -1:]] * m_halo, axis=1)
    agg = wn @ z
    frames = ad.concat([agg[:, k:k + t] for k in range(2 * m_halo + 1)], axis=-1)
    return (frames @ params[f"stgc.{layer}.w"] + params[f"stgc.{layer}.b"]).relu()


def forward(batch: WindowBatch, graph: StationGraph | GraphContext, params: ModelParams,
            config: ModelConfig, phys: PhysicsAdjacency | None = None, x: Tensor | None = None) -> Tensor:
    """Estimate every node in every frame: ``(B, T, n)`` (or ``(T, n)`` for one window).

    ``x`` overrides ``batch.x`` as the model input, which lets a tensor that
    carries gradient (the phase-1 output) be fed back in.
    """
    ctx = graph if isinstance(graph, GraphContext) else GraphContext.from_graph(graph, config.diffusion_k)
    single = batch.values.ndim == 2
    dtype = params["mu_raw"].data.dtype
    wind = batch.wind[None] if single else batch.wind
    mask = (batch.mask[None] if single else batch.mask).astype(dtype)
    if x is None:
        x = Tensor((batch.x[None] if single else batch.x).astype(dtype))
    elif single and x.ndim == 2:
        x = x.reshape((1,) + x.shape)
    b, t, n = mask.shape
    if n != ctx.n_nodes:
        raise ShapeError(f"batch has {n} nodes, graph has {ctx.n_nodes}")
    if x.shape != (b, t, n):
        raise ShapeError(f"input {x.shape} does not match mask {mask.shape}")
    if phys is None:
        phys = dynamic_graph(wind, ctx, params)
    w_minus = remove_self_loops(phys.w_phy)

    inp = ad.concat([x.reshape(b, t, n, 1), Tensor(mask.reshape(b, t, n, 1))], axis=-1)
    z = inp @ params["embed.w"] + params["embed.b"]
    for layer in range(config.layers):
        out = stgc_layer(z, w_minus, params, layer, config.m_halo, gate=mask if layer == 0 else None)
        # skip path: a node keeps its own features, the layer adds what neighbours say
        z = out + z if config.residual else out
    out = (z @ params["readout.w"] + params["readout.b"]).reshape(b, t, n)
    return out.reshape(t, n) if single else out
