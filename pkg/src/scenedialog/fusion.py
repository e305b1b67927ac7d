"""Vision update: inject dialog information into node and edge features.

Nodes and edges attend over the dialog memory (per-round fused QA vectors
plus the final history) with scaled dot-product attention; updates enter
through a gated residual, so zero value/gate weights leave the input intact.
"""

from __future__ import annotations

import math
from dataclasses import replace

import torch
from torch import nn

from .core import SceneDialogError
from .dialog import DialogConfig, DialogState, dialog_memory
from .perception import PreliminaryObjectSet

GATE_INIT = 0.1


class FusionError(SceneDialogError):
    pass


class FusionParams(nn.Module):
    def __init__(self, feat_dim: int, d_h: int, d_k: int = 16):
        super().__init__()
        self.feat_dim = feat_dim
        self.d_k = d_k
        self.node_query = nn.Linear(feat_dim, d_k, bias=False)
        self.edge_query = nn.Linear(feat_dim, d_k, bias=False)
        self.key = nn.Linear(d_h, d_k, bias=False)
        self.value = nn.Linear(d_h, feat_dim, bias=False)
        self.node_gate = nn.Parameter(torch.full((feat_dim,), GATE_INIT))
        self.edge_gate = nn.Parameter(torch.full((feat_dim,), GATE_INIT))
        self.double()

    def zero_update_(self) -> "FusionParams":
        """Zero the value and gate weights, making the update an exact identity."""
        with torch.no_grad():
            self.value.weight.zero_()
            self.node_gate.zero_()
            self.edge_gate.zero_()
        return self


def attention(query: torch.Tensor, keys: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention; output rows are convex mixes of values."""
    d_k = keys.shape[-1]
    scores = query @ keys.transpose(-2, -1) / math.sqrt(d_k)
    weights = torch.softmax(scores, dim=-1)
    return weights @ values


def update_features(
    features: torch.Tensor,
    memory: torch.Tensor,
    query_proj: nn.Linear,
    gate: torch.Tensor,
    params: FusionParams,
) -> torch.Tensor:
    """Gated residual attention update of a (..., feat_dim) feature block."""
    q = query_proj(features)
    attended = attention(q, params.key(memory), params.value(memory))
    return features + gate * attended


def update_vision(
    oprime: PreliminaryObjectSet,
    state: DialogState,
    params: FusionParams,
    cfg: DialogConfig,
) -> PreliminaryObjectSet:
    """Produce the updated object set from the completed dialog."""
    if state.round != cfg.n_rounds:
        raise FusionError(
            f"dialog incomplete: round {state.round}, expected {cfg.n_rounds}"
        )
    memory = dialog_memory(state)
    nodes = torch.as_tensor(oprime.node_features, dtype=torch.float64)
    edges = torch.as_tensor(oprime.edge_features, dtype=torch.float64)
    with torch.no_grad():
        new_nodes = update_features(nodes, memory, params.node_query, params.node_gate, params)
        new_edges = update_features(edges, memory, params.edge_query, params.edge_gate, params)
    return PreliminaryObjectSet(
        boxes=list(oprime.boxes),
        node_features=new_nodes.numpy(),
        edge_features=new_edges.numpy(),
        label_logits=oprime.label_logits.copy(),
    )
