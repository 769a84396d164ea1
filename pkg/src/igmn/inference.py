"""Two-pass keyframe scoring over a video."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch

from .data_model import ActorRecord, Detection, PredictionRecord, scale_box
from .memory_bank import MemoryActor, MemoryBank, MemoryEntry
from .model import IGMN, FeatureProvider, KeyframeSample

SCORE_THRESHOLD = 0.8
CONTEXT_SCALE = 1.25


def select_detections(detections: Sequence[Detection], threshold: float = SCORE_THRESHOLD) -> list[Detection]:
    return [d for d in detections if d.score > threshold]


def predict(model: IGMN, video_id: str, detections: dict, bank: Optional[MemoryBank] = None,
            provider: Optional[FeatureProvider] = None, score_threshold: float = SCORE_THRESHOLD,
            context_scale: float = CONTEXT_SCALE, batch_size: int = 32,
            rng: Optional[np.random.Generator] = None) -> list[PredictionRecord]:
    """Score every kept detection of one video.

    Pass one crops features for kept detections (score above the threshold,
    boxes enlarged by ``context_scale``) and fills the memory bank; pass two
    scores each keyframe against its full memory window.
    """
    cfg = model.cfg
    bank = bank if bank is not None else MemoryBank(cfg.c_feat, cfg.n_max)
    rng = rng if rng is not None else np.random.default_rng(0)
    samples = []
    for t in sorted(detections):
        kept = select_detections(detections[t], score_threshold)
        if not kept:
            continue
        actors, own = [], []
        for d in kept:
            roi = scale_box(d.box, context_scale)
            if provider is not None:
                fm = provider.crop(video_id, t, d.box, roi, rng)
            elif d.feature_map is not None:
                fm = d.feature_map
            else:
                raise ValueError(f"detection {d.key()} has no features and no provider was given")
            actors.append(ActorRecord(t, roi, d.track_id, d.score, fm))
            own.append(d.box)
        bank.write(MemoryEntry(t, tuple(
            MemoryActor(a.track_id, b, a.score, a.pooled()) for a, b in zip(actors, own))))
        samples.append(KeyframeSample(video_id, t, actors, None, own))

    model.eval()
    records = []
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start:start + batch_size]
            for s in chunk:
                s.window = bank.window(s.clip_index, cfg.half_window) if cfg.use_memory else None
            scores = model(chunk).scores.double().numpy()
            row = 0
            for s in chunk:
                for a, own_box in zip(s.actors, s.own_boxes):
                    records.append(PredictionRecord(video_id, s.clip_index, own_box, a.score,
                                                    a.track_id, tuple(float(v) for v in scores[row])))
                    row += 1
    return records
