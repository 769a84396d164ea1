"""Training objectives.

All classification losses are means over actors of per-class sums.  Predictions
are probabilities, clamped to ``[1e-7, 1 - 1e-7]`` before taking logs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch

from .data_model import BoundingBox, iou

PRED_CLAMP = 1e-7


class NonFiniteLossError(FloatingPointError):
    pass


def relaxation_matrix(labels: np.ndarray, boxes: Sequence[BoundingBox]) -> np.ndarray:
    """E[i, c] = max_j IOU(b_i, b_j) * y_j[c], with j ranging over all actors including i."""
    labels = np.asarray(labels, dtype=np.float64)
    n = len(boxes)
    if labels.shape[0] != n:
        raise ValueError("labels and boxes are not aligned")
    overlaps = np.array([[iou(boxes[i], boxes[j]) for j in range(n)] for i in range(n)]).reshape(n, n)
    return (overlaps[:, :, None] * labels[None, :, :]).max(axis=1)


def relaxation(labels: np.ndarray, boxes: Sequence[BoundingBox], i: int) -> np.ndarray:
    return relaxation_matrix(labels, boxes)[i]


def _clamp(preds: torch.Tensor) -> torch.Tensor:
    return preds.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP)


def _class_weights(num_classes: int, class_mask, like: torch.Tensor) -> torch.Tensor:
    if class_mask is None:
        return like.new_ones(num_classes)
    return torch.as_tensor(np.asarray(class_mask), dtype=like.dtype)


def relaxed_bce(preds: torch.Tensor, labels, relax, class_mask=None) -> torch.Tensor:
    """Mean over actors of sum_c -[y log p + (1 - E) log(1 - p)] over the counted classes."""
    labels = torch.as_tensor(labels, dtype=preds.dtype)
    relax = torch.as_tensor(relax, dtype=preds.dtype)
    if preds.shape != labels.shape or preds.shape != relax.shape:
        raise ValueError(f"shape mismatch: {tuple(preds.shape)} {tuple(labels.shape)} {tuple(relax.shape)}")
    p = _clamp(preds)
    per_class = -(labels * torch.log(p) + (1.0 - relax) * torch.log1p(-p))
    weights = _class_weights(preds.shape[-1], class_mask, preds)
    return (per_class * weights).sum(dim=-1).mean()


def standard_bce(preds: torch.Tensor, labels, class_mask=None) -> torch.Tensor:
    """Mean over actors of sum_c -[y log p + (1 - y) log(1 - p)] over the counted classes."""
    labels = torch.as_tensor(labels, dtype=preds.dtype)
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch: {tuple(preds.shape)} {tuple(labels.shape)}")
    p = _clamp(preds)
    per_class = -(labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p))
    weights = _class_weights(preds.shape[-1], class_mask, preds)
    return (per_class * weights).sum(dim=-1).mean()


def identity_prior_loss(omega_idt: torch.Tensor, p_hat) -> torch.Tensor:
    """Mean over cells of (1 - p_hat) (omega_idt - 1)^2; batched inputs are averaged over actors."""
    p_hat = torch.as_tensor(p_hat, dtype=omega_idt.dtype)
    if omega_idt.shape != p_hat.shape:
        raise ValueError("attention map and interference map differ in shape")
    per_actor = ((1.0 - p_hat) * (omega_idt - 1.0) ** 2).mean(dim=(-2, -1))
    return per_actor.mean()


def semantic_prior_loss(omega_sem: torch.Tensor, p_hat, gamma: float = 0.1) -> torch.Tensor:
    """Ranking hinge pushing attention toward interference cells, normalised by K^2 on both sides."""
    p_hat = torch.as_tensor(p_hat, dtype=omega_sem.dtype)
    if omega_sem.shape != p_hat.shape:
        raise ValueError("attention map and interference map differ in shape")
    k2 = omega_sem.shape[-1] * omega_sem.shape[-2]
    inside = (p_hat * omega_sem).sum(dim=(-2, -1))
    outside = ((1.0 - p_hat) * omega_sem).sum(dim=(-2, -1))
    per_actor = torch.clamp(gamma - (inside - outside) / k2, min=0.0)
    return per_actor.mean()


def fused_loss(logits: torch.Tensor, labels, pose_mask) -> torch.Tensor:
    """BCE on sigmoid scores of non-pose classes plus softmax cross-entropy over pose classes.

    Actors without a positive pose label contribute no pose term.
    """
    labels = torch.as_tensor(labels, dtype=logits.dtype)
    pose_mask = np.asarray(pose_mask, dtype=bool)
    loss = standard_bce(torch.sigmoid(logits), labels, ~pose_mask)
    if pose_mask.any():
        pose_idx = torch.as_tensor(np.flatnonzero(pose_mask))
        pose_labels = labels[:, pose_idx]
        has_pose = pose_labels.sum(dim=1) > 0
        log_probs = torch.log_softmax(logits[:, pose_idx], dim=1)
        ce = -(pose_labels * log_probs).sum(dim=1) * has_pose.to(logits.dtype)
        loss = loss + ce.mean()
    return loss


@dataclass(frozen=True)
class LossReport:
    cls_sem: float
    cls_idt: float
    prior_sem: float
    prior_idt: float
    cls_fuse: float
    total: float
    lambda_aux: float

    def to_dict(self) -> dict:
        return asdict(self)


def weighted_total(cls_fuse, cls_sem, cls_idt, prior_sem, prior_idt, lambda_aux: float):
    return cls_fuse + lambda_aux * (cls_sem + cls_idt + prior_sem + prior_idt)


def total_loss(components: dict, lambda_aux: float = 0.5) -> LossReport:
    """Build a report from component values; raises on any non-finite component."""
    values = {}
    for name in ("cls_sem", "cls_idt", "prior_sem", "prior_idt", "cls_fuse"):
        v = components.get(name, 0.0)
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise NonFiniteLossError(f"loss component {name} is not finite: {v}")
        values[name] = v
    total = weighted_total(values["cls_fuse"], values["cls_sem"], values["cls_idt"],
                           values["prior_sem"], values["prior_idt"], lambda_aux)
    return LossReport(total=total, lambda_aux=float(lambda_aux), **values)
