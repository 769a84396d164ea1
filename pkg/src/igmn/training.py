"""Training step with asynchronous memory update, trainer loop and checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .data_model import ActorRecord, BoundingBox, ModelConfig, scale_box
from .losses import LossReport, NonFiniteLossError, total_loss
from .memory_bank import MemoryActor, MemoryBank, MemoryEntry
from .model import IGMN, FeatureProvider, KeyframeSample, compute_losses

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "igmn-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 20
    batch_size: int = 16
    # learning-rate drops by 10x at these fractions of the total step count
    milestones: tuple = (0.66, 0.86)
    augment: bool = True
    jitter: float = 0.1
    scale_min: float = 1.0
    scale_max: float = 1.5
    seed: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "milestones" in d:
            d["milestones"] = tuple(d["milestones"])
        return cls(**d)


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def make_optimizer(model: IGMN, tc: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.SGD(model.parameters(), lr=tc.lr, momentum=tc.momentum,
                           weight_decay=tc.weight_decay)


def make_scheduler(optimizer, tc: TrainConfig, total_steps: int):
    milestones = sorted({max(1, int(round(f * total_steps))) for f in tc.milestones})
    return torch.optim.lr_scheduler.MultiStepLR(optimizer, milestones=milestones, gamma=0.1)


def augment_box(box: BoundingBox, rng: np.random.Generator, tc: TrainConfig) -> BoundingBox:
    """Random center jitter (fraction of box size) followed by a random enlargement."""
    dx = rng.uniform(-tc.jitter, tc.jitter) * box.w
    dy = rng.uniform(-tc.jitter, tc.jitter) * box.h
    shifted = BoundingBox(box.x + dx, box.y + dy, box.h, box.w)
    return scale_box(shifted, rng.uniform(tc.scale_min, tc.scale_max))


@dataclass
class TrainItem:
    video_id: str
    clip_index: int
    actors: list  # ground-truth ActorRecords with labels


def _labels(actors: Sequence[ActorRecord]) -> np.ndarray:
    if any(a.labels is None for a in actors):
        raise ValueError("training actors need labels")
    return np.stack([a.labels.values for a in actors]).astype(np.float64)


def prepare_item(item: TrainItem, provider: Optional[FeatureProvider],
                 rng: Optional[np.random.Generator], tc: TrainConfig) -> KeyframeSample:
    """Apply box augmentation (when a provider can re-crop) and build an unwindowed sample."""
    own = [a.box for a in item.actors]
    if provider is not None and tc.augment and rng is not None:
        actors = []
        for a in item.actors:
            roi = augment_box(a.box, rng, tc)
            fm = provider.crop(item.video_id, item.clip_index, a.box, roi, rng)
            actors.append(a.replace(box=roi, feature_map=fm))
    else:
        actors = list(item.actors)
    return KeyframeSample(item.video_id, item.clip_index, actors, None, own, _labels(item.actors))


def memory_entry(sample: KeyframeSample) -> MemoryEntry:
    """Pooled features of a sample's actors, stored under their real boxes."""
    return MemoryEntry(sample.clip_index, tuple(
        MemoryActor(a.track_id, own, a.score, a.pooled())
        for a, own in zip(sample.actors, sample.own_boxes)))


def _bank(banks: dict, video_id: str, cfg: ModelConfig) -> MemoryBank:
    bank = banks.get(video_id)
    if bank is None:
        bank = banks[video_id] = MemoryBank(cfg.c_feat, cfg.n_max)
    return bank


def train_step(model: IGMN, batch: Sequence[TrainItem], banks: dict, optimizer,
               provider: Optional[FeatureProvider] = None,
               rng: Optional[np.random.Generator] = None,
               tc: Optional[TrainConfig] = None) -> LossReport:
    """One optimisation step; the batch's pooled features are written to the memory bank."""
    cfg = model.cfg
    tc = tc or TrainConfig()
    model.train()
    samples = [prepare_item(item, provider, rng, tc) for item in batch]
    write_first = cfg.memory_update_order == "write_before_read"
    if write_first:
        for s in samples:
            _bank(banks, s.video_id, cfg).write(memory_entry(s))
    if cfg.use_memory:
        for s in samples:
            s.window = _bank(banks, s.video_id, cfg).window(s.clip_index, cfg.half_window)
    out = model(samples, with_prior_maps=True)
    terms = compute_losses(cfg, out, samples)
    try:
        report = total_loss(terms.components, cfg.lambda_aux)
    except NonFiniteLossError as exc:
        where = ", ".join(f"{s.video_id}:{s.clip_index}" for s in samples)
        raise NonFiniteLossError(f"{exc} (keyframes {where})") from exc
    optimizer.zero_grad()
    terms.total.backward()
    optimizer.step()
    if not write_first:
        for s in samples:
            _bank(banks, s.video_id, cfg).write(memory_entry(s))
    return report


def warm_up(banks: dict, videos: dict, cfg: ModelConfig) -> None:
    """Fill the banks with un-augmented pooled features of every clip."""
    for video_id, clips in videos.items():
        bank = _bank(banks, video_id, cfg)
        for t, actors in sorted(clips.items()):
            if actors:
                bank.write(MemoryEntry(t, tuple(
                    MemoryActor(a.track_id, a.box, a.score, a.pooled()) for a in actors)))


class Trainer:
    """Epoch loop over keyframes of ``videos`` (video id -> clip -> GT actors)."""

    def __init__(self, model: IGMN, tc: TrainConfig, provider: Optional[FeatureProvider] = None,
                 metrics_path=None):
        self.model = model
        self.tc = tc
        self.provider = provider
        self.optimizer = make_optimizer(model, tc)
        self.scheduler = None
        self.rng = np.random.default_rng(tc.seed)
        self.banks: dict = {}
        self.step = 0
        self.history: list[LossReport] = []
        self.metrics_path = Path(metrics_path) if metrics_path else None

    def _log(self, report: LossReport, lr: float) -> None:
        if self.metrics_path is None:
            return
        record = {"step": self.step, **report.to_dict(), "lr": lr}
        with open(self.metrics_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")

    def fit(self, videos: dict, callback: Optional[Callable] = None) -> list[LossReport]:
        items = [TrainItem(v, t, actors) for v, clips in sorted(videos.items())
                 for t, actors in sorted(clips.items()) if actors]
        if not items:
            raise ValueError("no keyframes with actors to train on")
        steps_per_epoch = -(-len(items) // self.tc.batch_size)
        self.scheduler = make_scheduler(self.optimizer, self.tc, steps_per_epoch * self.tc.epochs)
        warm_up(self.banks, videos, self.model.cfg)
        for epoch in range(self.tc.epochs):
            order = self.rng.permutation(len(items))
            for start in range(0, len(items), self.tc.batch_size):
                batch = [items[i] for i in order[start:start + self.tc.batch_size]]
                lr = self.optimizer.param_groups[0]["lr"]
                report = train_step(self.model, batch, self.banks, self.optimizer,
                                    self.provider, self.rng, self.tc)
                self.scheduler.step()
                self.history.append(report)
                self._log(report, lr)
                self.step += 1
            log.info("epoch %d: total %.4f fuse %.4f", epoch, report.total, report.cls_fuse)
            if callback is not None:
                callback(epoch, self)
        return self.history


def save_checkpoint(path, model: IGMN, optimizer=None, step: int = 0, seed: int = 0,
                    train_config: Optional[TrainConfig] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "config_hash": config_hash(model.cfg),
        "train_config": train_config.to_dict() if train_config else None,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "seed": seed,
    }
    torch.save(payload, path)


def load_checkpoint(path, expected: Optional[ModelConfig] = None):
    """Return (model, payload); ``expected`` must hash-match the stored config."""
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a supported checkpoint")
    cfg = ModelConfig.from_dict(payload["config"])
    if config_hash(cfg) != payload["config_hash"]:
        raise ValueError(f"{path}: stored config hash does not match its config")
    if expected is not None and config_hash(expected) != payload["config_hash"]:
        raise ValueError(f"{path}: checkpoint config differs from the requested config")
    model = IGMN(cfg)
    model.load_state_dict(payload["model"])
    return model, payload
