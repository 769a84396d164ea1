"""Dual attention over RoI feature maps.

Geometry inputs are computed in numpy (they carry no gradient); the attention
functions and pooling are torch modules.

Grid convention: maps are indexed ``[y_r, x_r]`` to line up with feature maps
stored as ``(C, K, K)`` = ``(C, rows, cols)``.  Cell ``(y_r, x_r)`` sits at the
absolute point ``x_a = x + x_r * h / K``, ``y_a = y + y_r * w / K``, i.e. the
cell-corner offsets with height paired to the horizontal step as written in the
original formulation.  ``axis_swap=True`` pairs width with the horizontal step
instead; the two agree on square boxes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .data_model import ActorRecord, BoundingBox, contains


def roi_grid(box: BoundingBox, k: int, axis_swap: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Absolute sample points of a K x K RoI grid, each of shape (K, K) indexed [y_r, x_r]."""
    steps = np.arange(k, dtype=np.float64)
    x_step, y_step = (box.w, box.h) if axis_swap else (box.h, box.w)
    xs = box.x + steps * x_step / k
    ys = box.y + steps * y_step / k
    return np.broadcast_to(xs[None, :], (k, k)), np.broadcast_to(ys[:, None], (k, k))


def polar_angle(xa, ya, box: BoundingBox) -> np.ndarray:
    """Angle of points about the box center in (-pi, pi]; the center itself maps to 0."""
    cx, cy = box.center
    angle = np.arctan2(np.asarray(ya) - cy, np.asarray(xa) - cx)
    return np.where(angle <= -math.pi, math.pi, angle)


def geometry_from_boxes(target: BoundingBox, others: Sequence[BoundingBox], k: int,
                        eps: float = 1e-6, axis_swap: bool = False) -> np.ndarray:
    """Geometry embedding of shape (4, K, K): (x_r, y_r, alpha, mean interferer alpha)."""
    xa, ya = roi_grid(target, k, axis_swap)
    grid = np.arange(k, dtype=np.float64)
    x_r = np.broadcast_to(grid[None, :], (k, k))
    y_r = np.broadcast_to(grid[:, None], (k, k))
    alpha = polar_angle(xa, ya, target)
    num = np.zeros((k, k))
    den = np.zeros((k, k))
    for other in others:
        p = contains(other, xa, ya)
        num += p * polar_angle(xa, ya, other)
        den += p
    alpha_bar = num / (den + eps)
    return np.stack([x_r, y_r, alpha, alpha_bar]).astype(np.float64)


def geometry_embedding(target: ActorRecord, all_actors: Sequence[ActorRecord], k: int,
                       eps: float = 1e-6, axis_swap: bool = False) -> np.ndarray:
    others = [a.box for a in all_actors if a is not target]
    if len(others) == len(all_actors):
        raise ValueError("target must be one of all_actors")
    return geometry_from_boxes(target.box, others, k, eps, axis_swap)


def interference_from_boxes(roi_box: BoundingBox, own_box: BoundingBox,
                            others: Sequence[BoundingBox], k: int,
                            axis_swap: bool = False) -> np.ndarray:
    """Binary (K, K) map: 1 where another actor covers the cell or the cell lies in the expansion ring."""
    xa, ya = roi_grid(roi_box, k, axis_swap)
    p_hat = np.zeros((k, k), dtype=np.int64)
    for other in others:
        p_hat = np.maximum(p_hat, contains(other, xa, ya))
    if roi_box != own_box:
        ring = contains(roi_box, xa, ya) * (1 - contains(own_box, xa, ya))
        p_hat = np.maximum(p_hat, ring)
    return p_hat


def interference_indicator(target_index: int, all_actors: Sequence[ActorRecord], k: int,
                           expanded_box: Optional[BoundingBox] = None,
                           axis_swap: bool = False) -> np.ndarray:
    own = all_actors[target_index].box
    others = [a.box for j, a in enumerate(all_actors) if j != target_index]
    return interference_from_boxes(expanded_box or own, own, others, k, axis_swap)


@dataclass
class DAMOutput:
    omega_sem: torch.Tensor  # (A, K, K)
    omega_idt: torch.Tensor
    omega_idt_combined: torch.Tensor
    f_sem: torch.Tensor  # (A, D)
    f_idt: torch.Tensor


def dam_input(f: torch.Tensor, geo: torch.Tensor, f_mem: torch.Tensor) -> torch.Tensor:
    """Concatenate features, geometry and tiled memory feature into (A, D, K, K)."""
    a, _, k, _ = f.shape
    tiled = f_mem[:, :, None, None].expand(a, f_mem.shape[1], k, k)
    return torch.cat([f, geo, tiled], dim=1)


class AttentionFunction(nn.Sequential):
    """Two per-pixel channel-mixing maps with a rectifier in between, producing a logit map."""

    def __init__(self, in_channels: int, hidden: int):
        super().__init__(nn.Linear(in_channels, hidden), nn.ReLU(), nn.Linear(hidden, 1))


class DualAttention(nn.Module):
    def __init__(self, in_channels: int, hidden: int):
        super().__init__()
        self.ffn_sem = AttentionFunction(in_channels, hidden)
        self.ffn_idt = AttentionFunction(in_channels, hidden)

    def forward(self, f: torch.Tensor, geo: torch.Tensor, f_mem: torch.Tensor) -> DAMOutput:
        f_dam = dam_input(f, geo, f_mem)
        pixels = f_dam.permute(0, 2, 3, 1)  # (A, K, K, D)
        omega_sem = torch.sigmoid(self.ffn_sem(pixels)).squeeze(-1)
        omega_idt = torch.sigmoid(self.ffn_idt(pixels)).squeeze(-1)
        combined = omega_sem * omega_idt
        k2 = f.shape[-1] * f.shape[-2]
        f_sem = torch.einsum("adxy,axy->ad", f_dam, omega_sem) / k2
        f_idt = torch.einsum("adxy,axy->ad", f_dam, combined) / k2
        return DAMOutput(omega_sem, omega_idt, combined, f_sem, f_idt)


def dual_attention(f: torch.Tensor, geo: torch.Tensor, f_mem: torch.Tensor,
                   module: DualAttention) -> DAMOutput:
    """Single-actor convenience wrapper: f is (C, K, K), geo (4, K, K), f_mem (C_mem,)."""
    if f.dim() != 3 or geo.shape != (4,) + tuple(f.shape[1:]) or f_mem.dim() != 1:
        raise ValueError(f"shape mismatch: f {tuple(f.shape)}, geo {tuple(geo.shape)}, f_mem {tuple(f_mem.shape)}")
    out = module(f[None], geo[None], f_mem[None])
    return DAMOutput(out.omega_sem[0], out.omega_idt[0], out.omega_idt_combined[0],
                     out.f_sem[0], out.f_idt[0])
