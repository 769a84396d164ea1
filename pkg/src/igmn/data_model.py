"""Boxes, label vectors, actor records and the model configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in absolute pixels; (x, y) is the top-left corner."""

    x: float
    y: float
    h: float
    w: float

    def __post_init__(self):
        if not (self.h > 0 and self.w > 0):
            raise ValueError(f"box extent must be positive, got h={self.h} w={self.w}")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self) -> float:
        return self.h * self.w

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.h, self.w)

    @classmethod
    def from_tuple(cls, values: Sequence[float]) -> "BoundingBox":
        x, y, h, w = (float(v) for v in values)
        return cls(x, y, h, w)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    if a == b:
        return 1.0
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def contains(b: BoundingBox, px, py):
    """1 where (px, py) lies inside ``b``; edges count as inside.

    Accepts scalars or numpy arrays and returns an int or an int array.
    """
    inside = (b.x <= px) & (px <= b.x + b.w) & (b.y <= py) & (py <= b.y + b.h)
    if isinstance(inside, np.ndarray):
        return inside.astype(np.int64)
    return int(bool(inside))


def scale_box(b: BoundingBox, factor: float) -> BoundingBox:
    """Center-preserving rescale of both sides by ``factor``."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    cx, cy = b.center
    h, w = b.h * factor, b.w * factor
    return BoundingBox(cx - w / 2.0, cy - h / 2.0, h, w)


@dataclass(frozen=True, eq=False)
class ActionLabelVector:
    values: np.ndarray
    pose_mask: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.int8)
        pose_mask = np.asarray(self.pose_mask, dtype=bool)
        if values.ndim != 1 or values.shape != pose_mask.shape:
            raise ValueError("label values and pose mask must be 1-D of equal length")
        if not np.isin(values, (0, 1)).all():
            raise ValueError("label values must be binary")
        if values[pose_mask].sum() > 1:
            raise ValueError("at most one pose class may be positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "pose_mask", pose_mask)

    @classmethod
    def from_indices(cls, positives: Sequence[int], num_classes: int,
                     pose_class_indices: Sequence[int]) -> "ActionLabelVector":
        values = np.zeros(num_classes, dtype=np.int8)
        values[list(positives)] = 1
        mask = np.zeros(num_classes, dtype=bool)
        mask[list(pose_class_indices)] = True
        return cls(values, mask)

    def positives(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.values)]

    def __eq__(self, other):
        if not isinstance(other, ActionLabelVector):
            return NotImplemented
        return (np.array_equal(self.values, other.values)
                and np.array_equal(self.pose_mask, other.pose_mask))


@dataclass(frozen=True, eq=False)
class ActorRecord:
    """One actor in one clip, with its RoI feature map of shape (C, K, K)."""

    clip_index: int
    box: BoundingBox
    track_id: int
    score: float
    feature_map: np.ndarray
    labels: Optional[ActionLabelVector] = None

    def __post_init__(self):
        if self.track_id < 0:
            raise ValueError("track_id must be non-negative")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        fm = np.asarray(self.feature_map)
        if fm.ndim != 3 or fm.shape[1] != fm.shape[2]:
            raise ValueError(f"feature map must be C x K x K, got {fm.shape}")
        object.__setattr__(self, "feature_map", fm)

    def check_shape(self, c_feat: int, k: int) -> None:
        if self.feature_map.shape != (c_feat, k, k):
            raise ValueError(
                f"actor (clip {self.clip_index}, track {self.track_id}) has feature "
                f"shape {self.feature_map.shape}, expected {(c_feat, k, k)}")

    def pooled(self) -> np.ndarray:
        """Spatial max pooling of the RoI feature map."""
        return self.feature_map.reshape(self.feature_map.shape[0], -1).max(axis=1)

    def replace(self, **changes) -> "ActorRecord":
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, ActorRecord):
            return NotImplemented
        return (self.clip_index == other.clip_index and self.box == other.box
                and self.track_id == other.track_id and self.score == other.score
                and self.feature_map.dtype == other.feature_map.dtype
                and np.array_equal(self.feature_map, other.feature_map)
                and self.labels == other.labels)


@dataclass
class ModelConfig:
    c_feat: int = 32
    k: int = 5
    c_cls: int = 12
    pose_class_indices: tuple[int, ...] = (0, 1, 2)
    half_window: int = 4
    n_max: int = 4
    num_layers: int = 2
    c_mem: Optional[int] = None
    gamma: float = 0.1
    lambda_aux: float = 0.5
    epsilon: float = 1e-6
    attn_dim: Optional[int] = None
    ffn_hidden: int = 32
    head_hidden: int = 64
    geometry_axis_swap: bool = False
    # ablation switches
    use_memory: bool = True
    use_hgnn: bool = True
    use_dam: bool = True
    intra_actor: bool = True
    downsample: bool = True
    freeze_memory: bool = False
    aux_cls: bool = True
    aux_prior: bool = True
    memory_update_order: str = "read_before_write"

    def __post_init__(self):
        self.pose_class_indices = tuple(sorted(int(i) for i in self.pose_class_indices))
        if self.c_mem is None:
            self.c_mem = max(1, self.c_feat // 2)
        if self.attn_dim is None:
            self.attn_dim = max(1, self.c_feat // 2)
        for name in ("c_feat", "k", "c_cls", "half_window", "n_max", "num_layers",
                     "c_mem", "attn_dim", "ffn_hidden", "head_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("gamma", "lambda_aux", "epsilon"):
            if getattr(self, name) < 0 or (name == "epsilon" and self.epsilon == 0):
                raise ValueError(f"{name} must be positive")
        if any(i < 0 or i >= self.c_cls for i in self.pose_class_indices):
            raise ValueError("pose class index out of range")
        if self.memory_update_order not in ("read_before_write", "write_before_read"):
            raise ValueError(f"unknown memory_update_order {self.memory_update_order!r}")

    @property
    def dam_channels(self) -> int:
        return self.c_feat + 4 + self.c_mem

    @property
    def pose_mask(self) -> np.ndarray:
        mask = np.zeros(self.c_cls, dtype=bool)
        mask[list(self.pose_class_indices)] = True
        return mask

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pose_class_indices"] = list(self.pose_class_indices)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Detection:
    """A person proposal in one clip, optionally carrying its RoI features."""

    video_id: str
    clip_index: int
    box: BoundingBox
    score: float
    track_id: int
    feature_map: Optional[np.ndarray] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")

    def key(self) -> tuple:
        return (self.video_id, self.clip_index, self.box.as_tuple())


@dataclass(frozen=True)
class PredictionRecord:
    video_id: str
    clip_index: int
    box: BoundingBox
    score: float
    track_id: int
    class_scores: tuple[float, ...]

    def key(self) -> tuple:
        return (self.video_id, self.clip_index, self.box.as_tuple(), self.track_id)
