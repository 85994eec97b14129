"""Spatio-temporal surrogate: spatial blocks, causal temporal blocks, skip path, constraint block."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import Normalizer, Sample
from .graph import DrainageGraph, build_adjacency, incidence_matrix
from .layers import dense_layer, fused_spatial_layer, receptive_field, temporal_block
from .tensorio import read_tensors, write_tensors

SPATIAL_KINDS = ("fully_connected", "gat")
FUSION_MODES = ("individual", "fusion")
FLOOD_METHODS = ("balance", "classification")


class ModelConfigError(ValueError):
    pass


class DivergenceError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    m: int = 60
    n: int = 60
    spatial_kind: str = "gat"
    fusion: str = "fusion"
    flood_method: str = "classification"
    spatial_layers: int = 3
    hidden_channels: int = 32
    attention_heads: int = 2
    temporal_kernel: int = 3
    temporal_dilations: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    delta: float = 1000.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "temporal_dilations", tuple(int(d) for d in self.temporal_dilations))

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.temporal_kernel, self.temporal_dilations)

    @property
    def variant(self) -> str:
        spatial = "GNN" if self.spatial_kind == "gat" else "NN"
        return f"{spatial}-{self.fusion}"

    def validate(self) -> None:
        if self.spatial_kind not in SPATIAL_KINDS:
            raise ModelConfigError(f"spatial_kind must be one of {SPATIAL_KINDS}, got {self.spatial_kind!r}")
        if self.fusion not in FUSION_MODES:
            raise ModelConfigError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.flood_method not in FLOOD_METHODS:
            raise ModelConfigError(f"flood_method must be one of {FLOOD_METHODS}, got {self.flood_method!r}")
        for name in ("m", "n", "spatial_layers", "hidden_channels", "attention_heads", "temporal_kernel"):
            if getattr(self, name) < 1:
                raise ModelConfigError(f"{name} must be >= 1")
        if self.hidden_channels % self.attention_heads:
            raise ModelConfigError("hidden_channels must be divisible by attention_heads")
        d = self.temporal_dilations
        if not d or any(b <= a for a, b in zip(d, d[1:])) or d[0] < 1:
            raise ModelConfigError(f"temporal_dilations must be positive and strictly increasing, got {d}")
        if self.receptive_field < self.m:
            raise ModelConfigError(f"temporal receptive field {self.receptive_field} < m = {self.m}")
        if self.delta < 0:
            raise ModelConfigError("delta must be >= 0")

    def to_json(self) -> dict:
        out = asdict(self)
        out["temporal_dilations"] = list(self.temporal_dilations)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class ModelInputs:
    """Normalized tensors for a batch; shapes as in ``dataset.Sample`` plus a batch axis."""

    past_node: torch.Tensor
    past_edge: torch.Tensor
    future_node: torch.Tensor
    future_edge: torch.Tensor
    target_node: torch.Tensor
    target_edge: torch.Tensor
    flood_labels: torch.Tensor

    def __len__(self) -> int:
        return self.past_node.shape[0]

    def select(self, index) -> "ModelInputs":
        index = torch.as_tensor(np.asarray(index), dtype=torch.long)
        return ModelInputs(**{k: v[index] for k, v in self.__dict__.items()})


def model_inputs(batch: Sample, normalizer: Normalizer, dtype=torch.float32) -> ModelInputs:
    norm = normalizer.normalize(batch)
    single = norm.past_node.ndim == 3

    def t(a):
        a = torch.as_tensor(np.asarray(a), dtype=dtype)
        return a.unsqueeze(0) if single else a

    return ModelInputs(
        past_node=t(norm.past_node),
        past_edge=t(norm.past_edge),
        future_node=t(norm.future_node),
        future_edge=t(norm.future_edge),
        target_node=t(norm.target_node),
        target_edge=t(norm.target_edge),
        flood_labels=t(norm.flood_labels),
    )


@dataclass
class Prediction:
    """Normalized forecast. node (B, n, N, 3) = h_v, Q_in, Q_out; edge (B, n, C, 2) = h_e, Q.

    ``q_w`` is the flooding after the constraint block (gated for the
    classification method); ``q_w_balance`` is the ungated flow-balance value.
    """

    node: torch.Tensor
    edge: torch.Tensor
    q_w: torch.Tensor
    q_w_balance: torch.Tensor
    flood_logit: torch.Tensor | None = None

    @property
    def flood_prob(self) -> torch.Tensor | None:
        return None if self.flood_logit is None else torch.sigmoid(self.flood_logit)

    def detach(self) -> "Prediction":
        return Prediction(**{k: (None if v is None else v.detach()) for k, v in self.__dict__.items()})


class _Scaler:
    """Differentiable min-max maps for the flow kinds used by the constraint block."""

    def __init__(self, normalizer: Normalizer):
        self.bounds = {k: normalizer.bounds[k] for k in ("q_in", "q_out", "q", "r", "q_w")}

    def scale(self, kind: str, x: torch.Tensor) -> torch.Tensor:
        lo, hi = self.bounds[kind]
        return (x - lo) / (hi - lo) if hi > lo else x * 0.0

    def unscale(self, kind: str, x: torch.Tensor) -> torch.Tensor:
        lo, hi = self.bounds[kind]
        return x * (hi - lo) + lo


class _Init:
    """Seeded Glorot-uniform initializer; draw order is parameter registration order."""

    def __init__(self, seed: int, dtype):
        self.gen = torch.Generator().manual_seed(int(seed))
        self.dtype = dtype

    def glorot(self, shape, fan_in: int, fan_out: int) -> nn.Parameter:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        u = torch.rand(shape, generator=self.gen, dtype=torch.float64)
        return nn.Parameter(((2 * u - 1) * limit).to(self.dtype))

    def zeros(self, shape) -> nn.Parameter:
        return nn.Parameter(torch.zeros(shape, dtype=self.dtype))


class Dense(nn.Module):
    def __init__(self, init: _Init, n_in: int, n_out: int, zero: bool = False):
        super().__init__()
        self.weight = init.zeros((n_out, n_in)) if zero else init.glorot((n_out, n_in), n_in, n_out)
        self.bias = init.zeros((n_out,))

    def forward(self, x, activation=None):
        return dense_layer(x, self.weight, self.bias, activation)


class FusedGATLayer(nn.Module):
    def __init__(self, init: _Init, node_in: int, edge_in: int, hidden: int, heads: int, n_nodes: int, n_edges: int):
        super().__init__()
        fh = hidden // heads
        self.f_node_w = init.glorot((hidden, node_in), node_in, hidden)
        self.f_node_b = init.zeros((hidden,))
        self.f_edge_w = init.glorot((hidden, edge_in), edge_in, hidden)
        self.f_edge_b = init.zeros((hidden,))
        self.w_ex = init.glorot((n_nodes, n_edges), n_edges, n_nodes)
        self.b_ex = init.zeros((n_nodes, n_edges))
        self.w_xe = init.glorot((n_edges, n_nodes), n_nodes, n_edges)
        self.b_xe = init.zeros((n_edges, n_nodes))
        for kind, width in (("node", node_in + hidden), ("edge", edge_in + hidden)):
            setattr(self, f"{kind}_weight", init.glorot((heads, width, fh), width, hidden))
            setattr(self, f"{kind}_att_src", init.glorot((heads, fh), fh, 1))
            setattr(self, f"{kind}_att_dst", init.glorot((heads, fh), fh, 1))
            setattr(self, f"{kind}_bias", init.zeros((hidden,)))

    def forward(self, x, e, adj_node, adj_edge, incidence):
        params = dict(self.named_parameters())
        return fused_spatial_layer(x, e, adj_node, adj_edge, incidence, params)


class GATBlock(nn.Module):
    """Stacked fused node/edge GAT layers."""

    def __init__(self, init: _Init, node_in: int, edge_in: int, cfg: ModelConfig, n_nodes: int, n_edges: int):
        super().__init__()
        h = cfg.hidden_channels
        widths = [(node_in, edge_in)] + [(h, h)] * (cfg.spatial_layers - 1)
        self.layers = nn.ModuleList(
            FusedGATLayer(init, xi, ei, h, cfg.attention_heads, n_nodes, n_edges) for xi, ei in widths
        )

    def forward(self, x, e, graph_buffers):
        for layer in self.layers:
            x, e = layer(x, e, *graph_buffers)
        return x, e


class DenseBlock(nn.Module):
    """Fully-connected layers over the flattened per-step vector of all elements."""

    def __init__(self, init: _Init, n_in: int, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden_channels
        self.layers = nn.ModuleList(Dense(init, w, h) for w in [n_in] + [h] * (cfg.spatial_layers - 1))

    def forward(self, h):
        for layer in self.layers:
            h = layer(h, torch.relu)
        return h


class TemporalBlock(nn.Module):
    def __init__(self, init: _Init, channels: int, kernel: int, dilations: Sequence[int]):
        super().__init__()
        fan = channels * kernel
        self.kernels = nn.ParameterList(init.glorot((channels, channels, kernel), fan, fan) for _ in dilations)
        self.biases = nn.ParameterList(init.zeros((channels,)) for _ in dilations)
        self.dilations = tuple(dilations)

    def forward(self, x):
        return temporal_block(x, list(self.kernels), list(self.biases), self.dilations)


class Surrogate(nn.Module):
    """Predicts n future steps of node/edge states and flooding from m past steps.

    Pipeline: past states and forcing -> spatial block -> causal temporal block,
    whose last step is the context; future forcing -> spatial block, plus the
    broadcast context -> causal temporal block -> linear heads. Head outputs are
    residuals on top of the last observed state. The constraint block then
    derives node flows from edge flows (fusion) and flooding from the node
    flow balance, optionally gated by a classifier.
    """

    def __init__(
        self,
        config: ModelConfig,
        graph: DrainageGraph,
        normalizer: Normalizer | None = None,
        dtype=torch.float32,
        zero_heads: bool = True,
    ):
        super().__init__()
        config.validate()
        self.config = config
        self.normalizer = normalizer or Normalizer.identity()
        self.scaler = _Scaler(self.normalizer)
        self.network_hash = graph.content_hash
        n, c = graph.n_nodes, graph.n_edges
        self.n_nodes, self.n_edges = n, c

        adj = build_adjacency(graph, config.delta)
        inc = incidence_matrix(graph)
        self.register_buffer("adj_node", torch.as_tensor(adj.node, dtype=dtype))
        self.register_buffer("adj_edge", torch.as_tensor(adj.edge, dtype=dtype))
        self.register_buffer("incidence", torch.as_tensor(inc, dtype=dtype))
        self.register_buffer("inflow_sum", torch.as_tensor((inc < 0).astype(np.float64), dtype=dtype))
        self.register_buffer("outflow_sum", torch.as_tensor((inc > 0).astype(np.float64), dtype=dtype))
        self.register_buffer("junction", torch.as_tensor(~graph.outfall_mask, dtype=dtype))
        self.register_buffer("node_static", torch.as_tensor(static_features(graph, "node"), dtype=dtype))
        self.register_buffer("edge_static", torch.as_tensor(static_features(graph, "edge"), dtype=dtype))

        init = _Init(config.seed, dtype)
        h, k, dil = config.hidden_channels, config.temporal_kernel, config.temporal_dilations
        node_out = 1 if config.fusion == "fusion" else 3
        if config.spatial_kind == "gat":
            ns, es = self.node_static.shape[1], self.edge_static.shape[1]
            self.past_spatial = GATBlock(init, 4 + ns, 3 + es, config, n, c)
            self.future_spatial = GATBlock(init, 1 + ns, 1 + es, config, n, c)
            self.past_node_tcn = TemporalBlock(init, h, k, dil)
            self.past_edge_tcn = TemporalBlock(init, h, k, dil)
            self.future_node_tcn = TemporalBlock(init, h, k, dil)
            self.future_edge_tcn = TemporalBlock(init, h, k, dil)
            self.node_head = Dense(init, h, node_out, zero=zero_heads)
            self.edge_head = Dense(init, h, 2, zero=zero_heads)
            if config.flood_method == "classification":
                self.flood_head = Dense(init, h, 1, zero=zero_heads)
        else:
            self.past_spatial = DenseBlock(init, 3 * n + 2 * c + n + c, config)
            self.future_spatial = DenseBlock(init, n + c, config)
            self.past_tcn = TemporalBlock(init, h, k, dil)
            self.future_tcn = TemporalBlock(init, h, k, dil)
            self.node_head = Dense(init, h, node_out * n, zero=zero_heads)
            self.edge_head = Dense(init, h, 2 * c, zero=zero_heads)
            if config.flood_method == "classification":
                self.flood_head = Dense(init, h, n, zero=zero_heads)

    @property
    def graph_buffers(self):
        return self.adj_node, self.adj_edge, self.incidence

    check_finite = True  # switched off under vmap, where data-dependent branches are not allowed

    def _check(self, name: str, t: torch.Tensor) -> None:
        if self.check_finite and not bool(torch.isfinite(t).all()):
            raise DivergenceError(f"non-finite output in {name}")

    def _gat_body(self, inp: ModelInputs):
        node_past, edge_past = _with_static(inp.past_node, self.node_static), _with_static(inp.past_edge, self.edge_static)
        xp, ep = self.past_spatial(node_past, edge_past, self.graph_buffers)
        self._check("past_spatial", xp)
        # time axis must sit at -2 for the temporal block: (B, E, T, H)
        ctx_x = self.past_node_tcn(xp.transpose(1, 2))[:, :, -1]
        ctx_e = self.past_edge_tcn(ep.transpose(1, 2))[:, :, -1]
        self._check("past_temporal", ctx_x)
        xf, ef = self.future_spatial(
            _with_static(inp.future_node, self.node_static), _with_static(inp.future_edge, self.edge_static), self.graph_buffers
        )
        hx = self.future_node_tcn(xf.transpose(1, 2) + ctx_x[:, :, None]).transpose(1, 2)
        he = self.future_edge_tcn(ef.transpose(1, 2) + ctx_e[:, :, None]).transpose(1, 2)
        self._check("future_temporal", hx)
        node_res = self.node_head(hx)
        edge_res = self.edge_head(he)
        logit = self.flood_head(hx)[..., 0] if hasattr(self, "flood_head") else None
        return node_res, edge_res, logit

    def _dense_body(self, inp: ModelInputs):
        b, m = inp.past_node.shape[:2]
        n_steps = inp.future_node.shape[1]
        nn_, c = self.n_nodes, self.n_edges
        past = torch.cat(
            [
                inp.past_node[..., :3].reshape(b, m, 3 * nn_),
                inp.past_edge[..., :2].reshape(b, m, 2 * c),
                inp.past_node[..., 3],
                inp.past_edge[..., 2],
            ],
            dim=-1,
        )
        ctx = self.past_tcn(self.past_spatial(past))[:, -1]
        self._check("past_temporal", ctx)
        fut = torch.cat([inp.future_node[..., 0], inp.future_edge[..., 0]], dim=-1)
        h = self.future_tcn(self.future_spatial(fut) + ctx[:, None])
        self._check("future_temporal", h)
        node_res = self.node_head(h).reshape(b, n_steps, nn_, -1)
        edge_res = self.edge_head(h).reshape(b, n_steps, c, 2)
        logit = self.flood_head(h) if hasattr(self, "flood_head") else None
        return node_res, edge_res, logit

    def forward(self, inp: ModelInputs) -> Prediction:
        if self.config.spatial_kind == "gat":
            node_res, edge_res, logit = self._gat_body(inp)
        else:
            node_res, edge_res, logit = self._dense_body(inp)
        pred = constraint_block(
            self.scaler,
            inp,
            node_res,
            edge_res,
            logit,
            fusion=self.config.fusion == "fusion",
            inflow_sum=self.inflow_sum,
            outflow_sum=self.outflow_sum,
            junction=self.junction,
        )
        self._check("constraint_block", pred.node)
        return pred


def static_features(graph: DrainageGraph, kind: str) -> np.ndarray:
    """Per-element geometry scaled by its network maximum: (max_depth, invert) for nodes, (capacity, length) for edges.

    Weights in the graph layers are shared across elements, so without these
    channels a node could not tell how close its pooled-normalized depth is to
    its own surcharge level.
    """
    names = ("max_depth", "invert_elevation") if kind == "node" else ("capacity", "length")
    attr = graph.node_attr if kind == "node" else graph.edge_attr
    cols = []
    for name in names:
        v = attr(name).astype(np.float64)
        top = np.abs(v).max()
        cols.append(v / top if top > 0 else v)
    return np.stack(cols, axis=-1)


def _with_static(x: torch.Tensor, static: torch.Tensor) -> torch.Tensor:
    return torch.cat([x, static.expand(*x.shape[:-1], static.shape[-1])], dim=-1)


def flood_balance(q_in: torch.Tensor, r: torch.Tensor, q_out: torch.Tensor) -> torch.Tensor:
    """Spill as the positive part of inflow plus runoff minus outflow."""
    return torch.relu(q_in + r - q_out)


def constraint_block(
    scaler: _Scaler,
    inp: ModelInputs,
    node_res: torch.Tensor,
    edge_res: torch.Tensor,
    logit: torch.Tensor | None,
    fusion: bool,
    inflow_sum: torch.Tensor,
    outflow_sum: torch.Tensor,
    junction: torch.Tensor,
) -> Prediction:
    """Skip connection, node-edge flow fusion and flooding determination.

    Flow sums and the flooding balance are evaluated in physical units and
    mapped back, so they hold exactly after denormalization. Outfalls
    discharge freely and never flood, so their balance excess is dropped.
    """
    last_node = inp.past_node[:, -1:, :, :3]
    last_edge = inp.past_edge[:, -1:, :, :2]
    edge = last_edge + edge_res
    if fusion:
        h_v = last_node[..., 0] + node_res[..., 0]
        q = scaler.unscale("q", edge[..., 1])
        q_in_phys = q @ inflow_sum.transpose(0, 1)
        q_out_phys = q @ outflow_sum.transpose(0, 1)
        node = torch.stack([h_v, scaler.scale("q_in", q_in_phys), scaler.scale("q_out", q_out_phys)], dim=-1)
    else:
        node = last_node + node_res
        q_in_phys = scaler.unscale("q_in", node[..., 1])
        q_out_phys = scaler.unscale("q_out", node[..., 2])
    r = scaler.unscale("r", inp.future_node[..., 0])
    q_w_phys = flood_balance(q_in_phys, r, q_out_phys) * junction
    q_w_balance = scaler.scale("q_w", q_w_phys)
    if logit is None:
        q_w = q_w_balance
    else:
        q_w = scaler.scale("q_w", torch.where(logit > 0, q_w_phys, torch.zeros_like(q_w_phys)))
    return Prediction(node=node, edge=edge, q_w=q_w, q_w_balance=q_w_balance, flood_logit=logit)


def persistence_prediction(
    inp: ModelInputs, normalizer: Normalizer, graph: DrainageGraph, flood_method: str = "balance"
) -> Prediction:
    """Last observed state repeated over the horizon; flooding from the balance of the repeated flows.

    For the classification method the flood probability is the uninformative 0.5.
    """
    b, n_steps = inp.future_node.shape[:2]
    node = inp.past_node[:, -1:, :, :3].expand(b, n_steps, -1, -1)
    edge = inp.past_edge[:, -1:, :, :2].expand(b, n_steps, -1, -1)
    scaler = _Scaler(normalizer)
    junction = torch.as_tensor(~graph.outfall_mask, dtype=node.dtype)
    q_w_phys = junction * flood_balance(
        scaler.unscale("q_in", node[..., 1]), scaler.unscale("r", inp.future_node[..., 0]), scaler.unscale("q_out", node[..., 2])
    )
    q_w = scaler.scale("q_w", q_w_phys)
    logit = torch.zeros_like(q_w) if flood_method == "classification" else None
    gated = q_w * 0.0 if logit is not None else q_w
    return Prediction(node=node, edge=edge, q_w=gated, q_w_balance=q_w, flood_logit=logit)


@dataclass
class LossTerms:
    total: torch.Tensor
    mse_node: torch.Tensor
    mse_edge: torch.Tensor
    bce_flood: torch.Tensor

    def item(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.__dict__.items()}


def loss_terms(pred: Prediction, inp: ModelInputs) -> LossTerms:
    """Node MSE (h_v, Q_in, Q_out, ungated Q_w) / NT + edge MSE / CT + flood BCE / NT, batch-averaged."""
    b, n_steps, n_nodes = pred.q_w.shape
    n_edges = pred.edge.shape[2]
    node_hat = torch.cat([pred.node, pred.q_w_balance[..., None]], dim=-1)
    mse_node = ((node_hat - inp.target_node) ** 2).sum(dim=(1, 2, 3)) / (n_nodes * n_steps)
    mse_edge = ((pred.edge - inp.target_edge) ** 2).sum(dim=(1, 2, 3)) / (n_edges * n_steps)
    if pred.flood_logit is None:
        bce = torch.zeros_like(mse_node)
    else:
        bce = F.binary_cross_entropy_with_logits(pred.flood_logit, inp.flood_labels, reduction="none").sum(dim=(1, 2)) / (
            n_nodes * n_steps
        )
    mse_node, mse_edge, bce = mse_node.mean(), mse_edge.mean(), bce.mean()
    return LossTerms(mse_node + mse_edge + bce, mse_node, mse_edge, bce)


def gradients(model: Surrogate, inp: ModelInputs) -> dict[str, torch.Tensor]:
    """d(mean batch loss)/d(parameter) for every named parameter."""
    names, params = zip(*model.named_parameters())
    loss = loss_terms(model(inp), inp).total
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = {}
    for name, p, g in zip(names, params, grads):
        g = torch.zeros_like(p) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise DivergenceError(f"non-finite gradient for {name}")
        out[name] = g
    return out


# -- finite-difference gradient check ---------------------------------------------


@dataclass
class GradcheckResult:
    variant: str
    flood_method: str
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    per_param: dict[str, float]
    tolerance: float
    seconds: float
    kinks: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        kinks = f", {self.kinks} kink(s) re-checked at step/10" if self.kinks else ""
        return (
            f"{status} {self.variant}/{self.flood_method}: max relative error {self.max_rel_error:.3e} "
            f"(worst: {self.worst_param}{list(self.worst_index)}{kinks}) in {self.seconds:.1f}s"
        )


def random_inputs(graph: DrainageGraph, m: int, n: int, batch: int = 2, seed: int = 0, dtype=torch.float64) -> ModelInputs:
    """Normalized-looking random inputs with a mix of flood labels."""
    g = torch.Generator().manual_seed(seed)
    nn_, c = graph.n_nodes, graph.n_edges
    r = lambda *shape: torch.rand(shape, generator=g, dtype=torch.float64).to(dtype)  # noqa: E731
    return ModelInputs(
        past_node=r(batch, m, nn_, 4),
        past_edge=torch.cat([r(batch, m, c, 2), torch.ones(batch, m, c, 1, dtype=dtype)], dim=-1),
        future_node=r(batch, n, nn_, 1),
        future_edge=torch.ones(batch, n, c, 1, dtype=dtype),
        target_node=r(batch, n, nn_, 4),
        target_edge=r(batch, n, c, 2),
        flood_labels=(r(batch, n, nn_) > 0.5).to(dtype),
    )


def gradcheck(
    config: ModelConfig,
    graph: DrainageGraph,
    inp: ModelInputs | None = None,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    floor: float = 1e-6,
    corrupt: str | None = None,
    normalizer: Normalizer | None = None,
) -> GradcheckResult:
    """Compare autograd gradients with central differences for every scalar parameter, in float64.

    Relative error is |g - g_fd| / max(|g|, |g_fd|, ``floor``); the floor keeps
    entries whose true gradient is zero from dividing rounding noise by zero.
    Output heads start from random values and every parameter is jittered, so
    every path carries gradient and no ReLU sits exactly on its kink.
    An entry that misses ``tolerance`` while its forward and backward one-sided
    slopes disagree has a ReLU/clip kink inside the stencil; it is re-measured
    with step/10 and counted in ``kinks``. A wrong backward pass has matching
    one-sided slopes and is not excused.
    ``corrupt`` names a parameter whose backward pass is deliberately scaled,
    to show the check catches a broken gradient.
    """
    from torch.func import functional_call, vmap

    start = time.perf_counter()
    model = Surrogate(config, graph, normalizer, dtype=torch.float64, zero_heads=False)
    # zero biases put ReLU inputs exactly on the kink, so move to a generic point first
    jitter = torch.Generator().manual_seed(config.seed + 1)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=jitter, dtype=p.dtype))
    inp = inp if inp is not None else random_inputs(graph, config.m, config.n, seed=config.seed)
    if corrupt is not None:
        target = dict(model.named_parameters()).get(corrupt)
        if target is None:
            raise KeyError(f"no parameter named {corrupt!r}")
        handle = target.register_hook(lambda g: g * 1.5 + 1e-3)
    analytic = gradients(model, inp)
    if corrupt is not None:
        handle.remove()

    params = {k: v.detach() for k, v in model.named_parameters()}
    buffers = {k: v for k, v in model.named_buffers()}
    model.check_finite = False

    def loss_at(p):
        return loss_terms(functional_call(model, (p, buffers), (inp,)), inp).total

    def rel_error(a, b):
        return (a - b).abs() / torch.maximum(torch.maximum(a.abs(), b.abs()), torch.tensor(floor, dtype=torch.float64))

    with torch.no_grad():
        centre = loss_at(params)
    worst, worst_name, worst_index = 0.0, "", ()
    per_param, kinks = {}, 0
    for name, base in params.items():
        flat = base.reshape(-1)

        def shifted(delta, name=name, flat=flat, shape=base.shape):
            p = dict(params)
            p[name] = (flat + delta).reshape(shape)
            return loss_at(p)

        eye = torch.eye(flat.numel(), dtype=torch.float64) * step
        plus = vmap(shifted, chunk_size=256)(eye)
        minus = vmap(shifted, chunk_size=256)(-eye)
        fd = (plus - minus) / (2 * step)
        g = analytic[name].reshape(-1)
        rel = rel_error(g, fd)
        for i in torch.nonzero(rel >= tolerance).flatten().tolist():
            slopes = ((plus[i] - centre) / step).reshape(1), ((centre - minus[i]) / step).reshape(1)
            if rel_error(*slopes).item() < tolerance:
                continue
            unit = torch.zeros_like(flat)
            unit[i] = step / 10
            with torch.no_grad():
                fine = (shifted(unit) - shifted(-unit)) / (2 * step / 10)
            rel[i] = rel_error(g[i].reshape(1), fine.reshape(1)).item()
            kinks += 1
        k = int(torch.argmax(rel))
        per_param[name] = float(rel[k])
        if per_param[name] > worst or not worst_name:
            worst, worst_name = per_param[name], name
            worst_index = tuple(int(i) for i in np.unravel_index(k, tuple(base.shape))) if base.dim() else ()
    model.check_finite = True
    return GradcheckResult(
        config.variant, config.flood_method, worst, worst_name, worst_index, per_param, tolerance, time.perf_counter() - start, kinks
    )


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(model: Surrogate, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``<path>.bin`` (parameters, raw little-endian) and ``<path>.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items() if k in dict(model.named_parameters())}
    dtype = "<f8" if next(model.parameters()).dtype == torch.float64 else "<f4"
    index = write_tensors(path.with_suffix(".bin"), tensors, dtype=dtype)
    sidecar = {
        "model_config": model.config.to_json(),
        "normalizer": model.normalizer.to_json(),
        "network_hash": model.network_hash,
        "container": {"file": path.with_suffix(".bin").name, **index},
    }
    sidecar.update(extra or {})
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return json_path


def load_checkpoint(path: str | Path, graph: DrainageGraph) -> tuple[Surrogate, dict]:
    json_path = Path(path).with_suffix(".json")
    sidecar = json.loads(json_path.read_text())
    if sidecar["network_hash"] != graph.content_hash:
        raise ValueError(f"{json_path}: checkpoint was trained on a different network")
    arrays = read_tensors(json_path.parent / sidecar["container"]["file"], sidecar["container"])
    dtype = torch.float64 if sidecar["container"]["tensors"][0]["dtype"] == "<f8" else torch.float32
    model = Surrogate(
        ModelConfig.from_json(sidecar["model_config"]), graph, Normalizer.from_json(sidecar["normalizer"]), dtype=dtype
    )
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(arrays[name]))
    return model, sidecar
