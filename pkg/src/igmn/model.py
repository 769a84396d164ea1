"""Full model: identity graph memory branch, dual attention branch and fusion head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from .dam import DAMOutput, DualAttention, geometry_from_boxes, interference_from_boxes
from .data_model import ActorRecord, BoundingBox, ModelConfig
from .hgnn import HGNN, GraphBatch, HGNNOutput, pyramid_layouts
from .identity_graph import build_graph, graph_pyramid
from .losses import (fused_loss, identity_prior_loss, relaxation_matrix, relaxed_bce,
                     semantic_prior_loss, standard_bce, weighted_total)
from .memory_bank import MemoryWindow


class FeatureProvider(Protocol):
    """Source of RoI feature maps for arbitrary boxes (stands in for backbone + RoIAlign)."""

    def crop(self, video_id: str, clip_index: int, box: BoundingBox, roi_box: BoundingBox,
             rng: Optional[np.random.Generator] = None) -> np.ndarray: ...


@dataclass
class KeyframeSample:
    """Everything the model sees for one keyframe.

    ``actors[i].box`` is the RoI box the feature map was cropped from;
    ``own_boxes[i]`` is the box the actor really occupies (equal unless the
    RoI was enlarged or jittered).
    """

    video_id: str
    clip_index: int
    actors: list
    window: Optional[MemoryWindow] = None
    own_boxes: Optional[list] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.actors:
            raise ValueError(f"keyframe {self.video_id}:{self.clip_index} has no actors")
        if self.own_boxes is None:
            self.own_boxes = [a.box for a in self.actors]


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    scores: torch.Tensor
    f_mem: torch.Tensor
    actor_counts: list
    dam: Optional[DAMOutput] = None
    aux_sem: Optional[torch.Tensor] = None
    aux_idt: Optional[torch.Tensor] = None
    hgnn: Optional[HGNNOutput] = None
    pyramids: Optional[list] = None
    p_hat: Optional[np.ndarray] = None


def class_scores(logits: torch.Tensor, pose_mask) -> torch.Tensor:
    """Sigmoid scores, with a softmax taken over the pose classes instead."""
    pose_mask = np.asarray(pose_mask, dtype=bool)
    scores = torch.sigmoid(logits)
    if pose_mask.any():
        idx = torch.as_tensor(np.flatnonzero(pose_mask))
        scores = scores.index_copy(1, idx, torch.softmax(logits[:, idx], dim=1))
    return scores


def _structure_key(sample: KeyframeSample, use_memory: bool) -> tuple:
    tracks = tuple(a.track_id for a in sample.actors)
    if not use_memory or sample.window is None:
        return (sample.clip_index, tracks, ())
    w = sample.window
    return (sample.clip_index, tracks, tuple(map(tuple, np.argwhere(w.mask))),
            w.track_ids[w.mask].tobytes(), w.clip_indices.tobytes())


class IGMN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dam_channels
        self.hgnn = HGNN(cfg)
        self.dam = DualAttention(d, cfg.ffn_hidden)
        self.sem_head = nn.Linear(d, cfg.c_cls)
        self.idt_head = nn.Linear(d, cfg.c_cls)
        self.fuse_proj = nn.Linear(d, cfg.c_mem)
        self.head = nn.Sequential(nn.Linear(cfg.c_mem, cfg.head_hidden), nn.ReLU(),
                                  nn.Linear(cfg.head_hidden, cfg.c_cls))
        self._graph_cache: dict = {}

    @property
    def dtype(self):
        return self.head[0].weight.dtype

    def pyramid(self, sample: KeyframeSample):
        """Graphs per layer for a keyframe plus their index layouts, cached by structure."""
        cfg = self.cfg
        key = _structure_key(sample, cfg.use_memory)
        cached = self._graph_cache.get(key)
        if cached is None:
            window = sample.window if cfg.use_memory else None
            g0 = build_graph(sample.actors, window, center=sample.clip_index)
            pyramid = graph_pyramid(g0, cfg.num_layers, cfg.downsample)
            cached = (pyramid, pyramid_layouts(pyramid))
            if len(self._graph_cache) > 50_000:
                self._graph_cache.clear()
            self._graph_cache[key] = cached
        return cached

    def _sources(self, sample: KeyframeSample, pooled: torch.Tensor) -> torch.Tensor:
        if not self.cfg.use_memory or sample.window is None:
            return pooled
        mem = torch.as_tensor(sample.window.features, dtype=self.dtype).reshape(-1, self.cfg.c_feat)
        return torch.cat([pooled, mem], dim=0)

    def forward(self, samples: Sequence[KeyframeSample], with_prior_maps: bool = False) -> ForwardOutput:
        cfg = self.cfg
        dtype = self.dtype
        maps = np.stack([a.feature_map for s in samples for a in s.actors])
        if maps.shape[1:] != (cfg.c_feat, cfg.k, cfg.k):
            raise ValueError(f"feature maps have shape {maps.shape[1:]}, expected {(cfg.c_feat, cfg.k, cfg.k)}")
        f = torch.as_tensor(maps, dtype=dtype)
        pooled = f.flatten(2).amax(dim=2)
        counts = [len(s.actors) for s in samples]

        out_hgnn, pyramids = None, None
        if cfg.use_hgnn:
            cached = [self.pyramid(s) for s in samples]
            pyramids = [c[0] for c in cached]
            batch = GraphBatch(pyramids, [c[1] for c in cached])
            splits = torch.split(pooled, counts)
            x0 = batch.gather_sources([self._sources(s, p) for s, p in zip(samples, splits)])
            out_hgnn = self.hgnn(batch, x0)
            f_mem = out_hgnn.f_mem
        else:
            f_mem = self.hgnn.skip(pooled)

        dam_out = aux_sem = aux_idt = p_hat = None
        if cfg.use_dam:
            geo = torch.as_tensor(np.stack([
                geometry_from_boxes(a.box, [b for j, b in enumerate(s.own_boxes) if j != i],
                                    cfg.k, cfg.epsilon, cfg.geometry_axis_swap)
                for s in samples for i, a in enumerate(s.actors)]), dtype=dtype)
            dam_out = self.dam(f, geo, f_mem)
            aux_sem = torch.sigmoid(self.sem_head(dam_out.f_sem))
            aux_idt = torch.sigmoid(self.idt_head(dam_out.f_idt))
            f_fuse = f_mem + self.fuse_proj(dam_out.f_idt)
            if with_prior_maps:
                p_hat = interference_maps(samples, cfg)
        else:
            f_fuse = f_mem
        logits = self.head(f_fuse)
        return ForwardOutput(logits, class_scores(logits, cfg.pose_mask), f_mem, counts,
                             dam_out, aux_sem, aux_idt, out_hgnn, pyramids, p_hat)


def interference_maps(samples: Sequence[KeyframeSample], cfg: ModelConfig) -> np.ndarray:
    return np.stack([
        interference_from_boxes(a.box, s.own_boxes[i],
                                [b for j, b in enumerate(s.own_boxes) if j != i],
                                cfg.k, cfg.geometry_axis_swap)
        for s in samples for i, a in enumerate(s.actors)])


@dataclass
class LossTerms:
    total: torch.Tensor
    components: dict = field(default_factory=dict)


def compute_losses(cfg: ModelConfig, out: ForwardOutput, samples: Sequence[KeyframeSample]) -> LossTerms:
    """All five objectives for one forward pass; disabled terms are zero."""
    if any(s.labels is None for s in samples):
        raise ValueError("training samples need labels")
    labels = np.concatenate([s.labels for s in samples]).astype(np.float64)
    pose_mask = cfg.pose_mask
    zero = out.logits.new_zeros(())
    comps = {"cls_sem": zero, "cls_idt": zero, "prior_sem": zero, "prior_idt": zero}
    comps["cls_fuse"] = fused_loss(out.logits, labels, pose_mask)
    if cfg.use_dam and out.dam is not None:
        if cfg.aux_cls:
            relax = np.concatenate([relaxation_matrix(s.labels, s.own_boxes) for s in samples])
            comps["cls_sem"] = relaxed_bce(out.aux_sem, labels, relax, ~pose_mask)
            comps["cls_idt"] = standard_bce(out.aux_idt, labels, ~pose_mask)
        if cfg.aux_prior:
            p_hat = out.p_hat if out.p_hat is not None else interference_maps(samples, cfg)
            comps["prior_sem"] = semantic_prior_loss(out.dam.omega_sem, p_hat, cfg.gamma)
            comps["prior_idt"] = identity_prior_loss(out.dam.omega_idt, p_hat)
    total = weighted_total(comps["cls_fuse"], comps["cls_sem"], comps["cls_idt"],
                           comps["prior_sem"], comps["prior_idt"], cfg.lambda_aux)
    return LossTerms(total, comps)


def forward(model: IGMN, actors: Sequence[ActorRecord], bank=None, video_id: str = "") -> ForwardOutput:
    """Score the actors of one keyframe against the memory bank."""
    if not actors:
        raise ValueError("empty actor list")
    t = actors[0].clip_index
    window = None
    if bank is not None:
        if bank.c_feat != model.cfg.c_feat:
            raise ValueError(f"memory bank feature length {bank.c_feat} != model {model.cfg.c_feat}")
        window = bank.window(t, model.cfg.half_window)
    return model([KeyframeSample(video_id, t, list(actors), window)])
