"""Functional building blocks of the surrogate.

Every function takes its weights explicitly so it can be tested against
brute-force recomputation; ``model.py`` wraps them in modules.
"""

from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn.functional as F

Activation = Callable[[torch.Tensor], torch.Tensor] | None


def _act(x: torch.Tensor, activation: Activation) -> torch.Tensor:
    return x if activation is None else activation(x)


def dense_layer(h: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, activation: Activation = None) -> torch.Tensor:
    """sigma(W h + b) applied to the last axis; ``weight`` is (out, in)."""
    if h.shape[-1] != weight.shape[1]:
        raise ValueError(f"dense_layer: input width {h.shape[-1]} != weight fan-in {weight.shape[1]}")
    return _act(h @ weight.transpose(0, 1) + bias, activation)


def gat_layer(
    x: torch.Tensor,
    adjacency: torch.Tensor,
    weight: torch.Tensor,
    att_src: torch.Tensor,
    att_dst: torch.Tensor,
    bias: torch.Tensor,
    activation: Activation = torch.relu,
    negative_slope: float = 0.2,
    return_attention: bool = False,
):
    """Multi-head graph attention over a dense 0/1 adjacency with self loops.

    x: (..., E, F); weight: (heads, F, F_h); att_src/att_dst: (heads, F_h);
    bias: (heads * F_h,). For element i the logit of neighbour j is
    LeakyReLU(att_dst . z_i + att_src . z_j), softmax-normalised over the
    neighbourhood; outputs of the heads are concatenated.
    """
    heads, f_in, f_h = weight.shape
    if x.shape[-1] != f_in:
        raise ValueError(f"gat_layer: feature width {x.shape[-1]} != {f_in}")
    if not bool((adjacency.diagonal() > 0).all()):
        raise ValueError("gat_layer: every element must be its own neighbour")
    z = torch.einsum("...ef,hfk->...hek", x, weight)
    s_dst = (z * att_dst[:, None, :]).sum(-1)
    s_src = (z * att_src[:, None, :]).sum(-1)
    logits = F.leaky_relu(s_dst[..., :, None] + s_src[..., None, :], negative_slope)
    logits = logits.masked_fill(adjacency == 0, float("-inf"))
    alpha = torch.softmax(logits, dim=-1)
    out = alpha @ z  # (..., heads, E, F_h)
    out = out.movedim(-3, -2).reshape(*out.shape[:-3], out.shape[-2], heads * f_h) + bias
    out = _act(out, activation)
    return (out, alpha) if return_attention else out


def node_edge_exchange(features: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, incidence: torch.Tensor) -> torch.Tensor:
    """(weight * incidence + bias) @ features, contracting over the source elements."""
    return (weight * incidence + bias) @ features


def fused_spatial_layer(
    x: torch.Tensor,
    e: torch.Tensor,
    adj_node: torch.Tensor,
    adj_edge: torch.Tensor,
    incidence: torch.Tensor,
    params: dict[str, torch.Tensor],
    activation: Activation = torch.relu,
    f_activation: Activation = torch.relu,
) -> tuple[torch.Tensor, torch.Tensor]:
    """One node/edge GAT layer with incidence-weighted feature exchange.

    Nodes attend over ``[x, (W_ex * M + b_ex) @ f_e(e)]`` and edges over
    ``[e, (W_xe * M^T + b_xe) @ f_x(x)]`` where ``f_*`` are one-layer perceptrons.
    ``params`` keys: f_edge_w, f_edge_b, f_node_w, f_node_b, w_ex, b_ex, w_xe,
    b_xe, and {node,edge}_{weight,att_src,att_dst,bias} for the two GATs.
    """
    p = params
    f_e = dense_layer(e, p["f_edge_w"], p["f_edge_b"], f_activation)
    f_x = dense_layer(x, p["f_node_w"], p["f_node_b"], f_activation)
    to_nodes = node_edge_exchange(f_e, p["w_ex"], p["b_ex"], incidence)
    to_edges = node_edge_exchange(f_x, p["w_xe"], p["b_xe"], incidence.transpose(0, 1))
    x_new = gat_layer(
        torch.cat([x, to_nodes], dim=-1), adj_node, p["node_weight"], p["node_att_src"], p["node_att_dst"], p["node_bias"], activation
    )
    e_new = gat_layer(
        torch.cat([e, to_edges], dim=-1), adj_edge, p["edge_weight"], p["edge_att_src"], p["edge_att_dst"], p["edge_bias"], activation
    )
    return x_new, e_new


def causal_conv(x: torch.Tensor, kernel: torch.Tensor, bias: torch.Tensor | None, dilation: int) -> torch.Tensor:
    """Dilated causal convolution along axis -2 of ``x`` (..., T, C_in); kernel (C_out, C_in, K)."""
    *lead, steps, c_in = x.shape
    if kernel.shape[1] != c_in:
        raise ValueError(f"causal_conv: {c_in} input channels, kernel expects {kernel.shape[1]}")
    k = kernel.shape[-1]
    seq = x.reshape(-1, steps, c_in).transpose(1, 2)
    seq = F.pad(seq, ((k - 1) * dilation, 0))
    out = F.conv1d(seq, kernel, bias, dilation=dilation)
    return out.transpose(1, 2).reshape(*lead, steps, kernel.shape[0])


def temporal_block(
    x: torch.Tensor,
    kernels: Sequence[torch.Tensor],
    biases: Sequence[torch.Tensor | None],
    dilations: Sequence[int],
    activation: Activation = torch.relu,
) -> torch.Tensor:
    """Stack of dilated causal convolutions; output at step t sees inputs at steps <= t only."""
    if not (len(kernels) == len(biases) == len(dilations)):
        raise ValueError("temporal_block: kernels, biases and dilations differ in length")
    *lead, steps, _ = x.shape
    seq = x.reshape(-1, steps, x.shape[-1]).transpose(1, 2)  # stay channel-first between layers
    for kernel, bias, d in zip(kernels, biases, dilations):
        if kernel.shape[1] != seq.shape[1]:
            raise ValueError(f"temporal_block: {seq.shape[1]} channels, kernel expects {kernel.shape[1]}")
        seq = F.conv1d(F.pad(seq, ((kernel.shape[-1] - 1) * d, 0)), kernel, bias, dilation=d)
        seq = _act(seq, activation)
    return seq.transpose(1, 2).reshape(*lead, steps, seq.shape[1])


def receptive_field(kernel_size: int, dilations: Sequence[int]) -> int:
    return 1 + (kernel_size - 1) * sum(dilations)
