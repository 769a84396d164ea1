"""Hierarchical graph neural network over identity graphs.

Each layer runs three message passes in order:

1. intra-actor: an ordered temporal aggregator along each tracklet, with
   separate affine maps for messages coming from the past and the future;
2. inter-actor intra-clip: self-attention among the nodes of each clip;
3. inter-actor inter-clip: actor nodes attend to all memory nodes.

Between layers the graph is down-sampled and removed rows are dropped.  The
memory feature of an actor is the channel-reduced mean of its post-layer
features.

Graphs are processed in batches through :class:`GraphBatch`, which flattens a
list of graph pyramids into index tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data_model import ModelConfig
from .identity_graph import IdentityGraph, graph_pyramid


def layer_norm(x: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:])


class AttentionBlock(nn.Module):
    """Single-head attention block with shared key/value input.

    ``out = norm(q + W_o softmax(Q K^T / sqrt(d)) V)`` where ``Q``, ``K`` and
    ``V`` are projections of the queries and of the key input.  Query rows
    without any valid key are returned unchanged.
    """

    def __init__(self, channels: int, attn_dim: int):
        super().__init__()
        self.query = nn.Linear(channels, attn_dim)
        self.key = nn.Linear(channels, attn_dim)
        self.value = nn.Linear(channels, attn_dim)
        self.out = nn.Linear(attn_dim, channels)
        self.scale = 1.0 / math.sqrt(attn_dim)

    def forward(self, queries: torch.Tensor, keys: torch.Tensor,
                key_mask: torch.Tensor) -> torch.Tensor:
        # queries (B, Nq, C), keys (B, Nk, C), key_mask (B, Nk)
        any_key = key_mask.any(dim=-1)  # (B,)
        # rows with no valid key get a dummy all-valid mask; their result is discarded
        safe_mask = key_mask | ~any_key[:, None]
        logits = torch.einsum("bqd,bkd->bqk", self.query(queries), self.key(keys)) * self.scale
        logits = logits.masked_fill(~safe_mask[:, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)
        attended = torch.einsum("bqk,bkd->bqd", weights, self.value(keys))
        updated = layer_norm(queries + self.out(attended))
        return torch.where(any_key[:, None, None], updated, queries)


class TemporalAggregator(nn.Module):
    """Direction-aware fusion of a node with its tracklet predecessor and successor."""

    def __init__(self, channels: int):
        super().__init__()
        self.forward_map = nn.Linear(channels, channels)
        self.backward_map = nn.Linear(channels, channels)

    def forward(self, x, pred, succ, update_mask=None):
        # pred/succ index rows of x; index len(x) means "no neighbor"
        padded = torch.cat([x, x.new_zeros(1, x.shape[1])], dim=0)
        n = x.shape[0]
        has_pred = (pred < n).to(x.dtype)[:, None]
        has_succ = (succ < n).to(x.dtype)[:, None]
        msg = (self.forward_map(padded[pred]) * has_pred
               + self.backward_map(padded[succ]) * has_succ)
        out = layer_norm(x + msg)
        if update_mask is not None:
            out = torch.where(update_mask[:, None], out, x)
        return out


@dataclass
class LayerLayout:
    """Index tensors describing one layer's graphs, flattened over a batch."""

    num_nodes: int
    keep: Optional[torch.Tensor]  # rows of the previous layer that survive here
    pred: torch.Tensor
    succ: torch.Tensor
    is_actor: torch.Tensor
    clip_rows: torch.Tensor  # (G, S), padded with num_nodes
    clip_mask: torch.Tensor
    clip_is_center: torch.Tensor  # (G,)
    actor_rows: torch.Tensor  # (B, A)
    actor_mask: torch.Tensor
    memory_rows: torch.Tensor  # (B, M)
    memory_mask: torch.Tensor
    memory_clips: list  # per graph, sorted surviving memory clip indices


@dataclass
class LocalLayout:
    """Per-graph index arrays, local to the graph's own node order."""

    num_nodes: int
    pred: np.ndarray  # -1 = none
    succ: np.ndarray
    is_actor: np.ndarray
    clip_groups: list  # arrays of local rows, one per clip in ascending clip order
    clip_is_center: list
    actor_rows: np.ndarray
    memory_rows: np.ndarray
    memory_clips: list
    keep: Optional[np.ndarray]  # local rows of the previous layer's graph


def local_layout(g: IdentityGraph, previous: Optional[IdentityGraph] = None) -> LocalLayout:
    n = len(g.nodes)
    row = {node.node_id: i for i, node in enumerate(g.nodes)}
    clip_of = {node.node_id: node.clip_index for node in g.nodes}
    pred = np.full(n, -1, dtype=np.int64)
    succ = np.full(n, -1, dtype=np.int64)
    for a, c in g.edges.intra:
        early, late = (a, c) if clip_of[a] < clip_of[c] else (c, a)
        succ[row[early]] = row[late]
        pred[row[late]] = row[early]
    groups: dict[int, list[int]] = {}
    for i, node in enumerate(g.nodes):
        groups.setdefault(node.clip_index, []).append(i)
    clips = sorted(groups)
    keep = None
    if previous is not None:
        prev_row = {node.node_id: i for i, node in enumerate(previous.nodes)}
        keep = np.array([prev_row[node.node_id] for node in g.nodes], dtype=np.int64)
    return LocalLayout(
        num_nodes=n,
        pred=pred,
        succ=succ,
        is_actor=np.array([node.is_actor for node in g.nodes], dtype=bool),
        clip_groups=[np.array(groups[c], dtype=np.int64) for c in clips],
        clip_is_center=[c == g.center for c in clips],
        actor_rows=np.array([i for i, node in enumerate(g.nodes) if node.is_actor], dtype=np.int64),
        memory_rows=np.array([i for i, node in enumerate(g.nodes) if not node.is_actor], dtype=np.int64),
        memory_clips=sorted({node.clip_index for node in g.nodes if not node.is_actor}),
        keep=keep,
    )


def _pad(rows: Sequence[np.ndarray], fill: int):
    width = max([len(r) for r in rows] + [1])
    out = np.full((len(rows), width), fill, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        mask[i, : len(r)] = True
    return torch.from_numpy(out), torch.from_numpy(mask)


def _merge(locals_: Sequence[LocalLayout], prev_sizes: Optional[Sequence[int]]) -> LayerLayout:
    sizes = [loc.num_nodes for loc in locals_]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    total = int(sum(sizes))

    def shift(arrays):
        parts = [np.where(a >= 0, a + o, total) for a, o in zip(arrays, offsets)]
        return torch.from_numpy(np.concatenate(parts)) if parts else torch.zeros(0, dtype=torch.long)

    groups, center = [], []
    for loc, o in zip(locals_, offsets):
        groups.extend(gr + o for gr in loc.clip_groups)
        center.extend(loc.clip_is_center)
    clip_rows, clip_mask = _pad(groups, total)
    a_rows, a_mask = _pad([loc.actor_rows + o for loc, o in zip(locals_, offsets)], total)
    m_rows, m_mask = _pad([loc.memory_rows + o for loc, o in zip(locals_, offsets)], total)
    keep = None
    if prev_sizes is not None:
        prev_offsets = np.concatenate([[0], np.cumsum(prev_sizes)[:-1]]).astype(np.int64)
        keep = torch.from_numpy(np.concatenate([loc.keep + o for loc, o in zip(locals_, prev_offsets)]))
    return LayerLayout(
        num_nodes=total,
        keep=keep,
        pred=shift([loc.pred for loc in locals_]),
        succ=shift([loc.succ for loc in locals_]),
        is_actor=torch.from_numpy(np.concatenate([loc.is_actor for loc in locals_])),
        clip_rows=clip_rows, clip_mask=clip_mask,
        clip_is_center=torch.as_tensor(center, dtype=torch.bool),
        actor_rows=a_rows, actor_mask=a_mask,
        memory_rows=m_rows, memory_mask=m_mask,
        memory_clips=[loc.memory_clips for loc in locals_],
    )


def _layout(graphs: Sequence[IdentityGraph], previous: Optional[Sequence[IdentityGraph]]) -> LayerLayout:
    prev = previous if previous is not None else [None] * len(graphs)
    locals_ = [local_layout(g, p) for g, p in zip(graphs, prev)]
    return _merge(locals_, None if previous is None else [len(p.nodes) for p in previous])


def pyramid_layouts(pyramid: Sequence[IdentityGraph]) -> list[LocalLayout]:
    return [local_layout(g, pyramid[i - 1] if i else None) for i, g in enumerate(pyramid)]


class GraphBatch:
    """A batch of graph pyramids (one graph per HGNN layer per keyframe)."""

    def __init__(self, pyramids: Sequence[Sequence[IdentityGraph]],
                 layouts: Optional[Sequence[Sequence[LocalLayout]]] = None):
        if not pyramids:
            raise ValueError("empty graph batch")
        depth = len(pyramids[0])
        if any(len(p) != depth for p in pyramids):
            raise ValueError("all pyramids must have the same depth")
        self.pyramids = [list(p) for p in pyramids]
        self.num_layers = depth
        if layouts is None:
            layouts = [pyramid_layouts(p) for p in self.pyramids]
        self.layers: list[LayerLayout] = []
        for layer in range(depth):
            prev_sizes = None if layer == 0 else [len(p[layer - 1].nodes) for p in self.pyramids]
            self.layers.append(_merge([lay[layer] for lay in layouts], prev_sizes))
        self.actor_counts = [len(p[0].actor_nodes) for p in self.pyramids]
        self.source_slots = [np.array([n.feature_slot for n in p[0].nodes], dtype=np.int64)
                             for p in self.pyramids]

    @classmethod
    def from_graphs(cls, graphs: Sequence[IdentityGraph], num_layers: int,
                    downsampling: bool = True) -> "GraphBatch":
        return cls([graph_pyramid(g, num_layers, downsampling) for g in graphs])

    def gather_sources(self, sources: Sequence[torch.Tensor]) -> torch.Tensor:
        """Stack layer-0 node features from per-graph source tables."""
        offsets = np.concatenate([[0], np.cumsum([s.shape[0] for s in sources])[:-1]])
        flat = torch.cat(list(sources), dim=0)
        index = np.concatenate([slots + o for slots, o in zip(self.source_slots, offsets)])
        return flat[torch.from_numpy(index)]


def _scatter_rows(x: torch.Tensor, rows: torch.Tensor, mask: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    flat_rows = rows[mask]
    return x.index_copy(0, flat_rows, values[mask])


class HGNNLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.temporal = TemporalAggregator(cfg.c_feat)
        self.intra_clip = AttentionBlock(cfg.c_feat, cfg.attn_dim)
        self.inter_clip = AttentionBlock(cfg.c_feat, cfg.attn_dim)

    def intra_actor_pass(self, x, layout: LayerLayout):
        update = layout.is_actor if self.cfg.freeze_memory else None
        return self.temporal(x, layout.pred, layout.succ, update)

    def inter_intra_clip_pass(self, x, layout: LayerLayout):
        rows, mask = layout.clip_rows, layout.clip_mask
        if self.cfg.freeze_memory:
            rows, mask = rows[layout.clip_is_center], mask[layout.clip_is_center]
        if rows.shape[0] == 0:
            return x
        padded = torch.cat([x, x.new_zeros(1, x.shape[1])], dim=0)
        feats = padded[rows]
        out = self.intra_clip(feats, feats, mask)
        return _scatter_rows(x, rows, mask, out)

    def inter_inter_clip_pass(self, x, layout: LayerLayout):
        padded = torch.cat([x, x.new_zeros(1, x.shape[1])], dim=0)
        queries = padded[layout.actor_rows]
        keys = padded[layout.memory_rows]
        out = self.inter_clip(queries, keys, layout.memory_mask)
        return _scatter_rows(x, layout.actor_rows, layout.actor_mask, out)

    def forward(self, x, layout: LayerLayout):
        if self.cfg.intra_actor:
            x = self.intra_actor_pass(x, layout)
        x = self.inter_intra_clip_pass(x, layout)
        return self.inter_inter_clip_pass(x, layout)


@dataclass
class HGNNOutput:
    f_mem: torch.Tensor  # (total actors, C_mem)
    layer_actor_features: list  # per layer, (total actors, C_feat)
    layer_memory_counts: list  # per layer, memory node count per graph


class HGNN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(HGNNLayer(cfg) for _ in range(cfg.num_layers))
        self.reduce = nn.Linear(cfg.c_feat, cfg.c_mem)

    def actor_index(self, layout: LayerLayout) -> torch.Tensor:
        return layout.actor_rows[layout.actor_mask]

    def forward(self, batch: GraphBatch, x0: torch.Tensor) -> HGNNOutput:
        if batch.num_layers != len(self.layers):
            raise ValueError(f"graph batch has {batch.num_layers} layers, model has {len(self.layers)}")
        if x0.shape[0] != batch.layers[0].num_nodes:
            raise ValueError("node feature table does not match the graph batch")
        x = x0
        per_layer, mem_counts = [], []
        for layer, layout in zip(self.layers, batch.layers):
            if layout.keep is not None:
                x = x[layout.keep]
            x = layer(x, layout)
            per_layer.append(x[self.actor_index(layout)])
            mem_counts.append(layout.memory_mask.sum(dim=1).tolist())
        pooled = torch.stack(per_layer, dim=0).mean(dim=0)
        return HGNNOutput(self.reduce(pooled), per_layer, mem_counts)

    def skip(self, actor_features: torch.Tensor) -> torch.Tensor:
        """Memory feature used when message passing is disabled."""
        return self.reduce(layer_norm(actor_features))


# -- single-graph entry points ---------------------------------------------


def _single(g: IdentityGraph) -> LayerLayout:
    return _layout([g], None)


def intra_actor_pass(g: IdentityGraph, table: torch.Tensor, layer: HGNNLayer) -> torch.Tensor:
    return layer.intra_actor_pass(table, _single(g))


def inter_intra_clip_pass(g: IdentityGraph, table: torch.Tensor, layer: HGNNLayer) -> torch.Tensor:
    return layer.inter_intra_clip_pass(table, _single(g))


def inter_inter_clip_pass(g: IdentityGraph, table: torch.Tensor, layer: HGNNLayer) -> torch.Tensor:
    return layer.inter_inter_clip_pass(table, _single(g))


def hgnn_forward(g0: IdentityGraph, table0: torch.Tensor, model: HGNN) -> HGNNOutput:
    """Run the layer stack on one graph whose node rows are given in node order."""
    batch = GraphBatch.from_graphs([g0], len(model.layers), model.cfg.downsample)
    return model(batch, table0)
