"""Shared builders for small, fully controlled inputs."""

import numpy as np
import pytest
import torch

from igmn.data_model import ActionLabelVector, ActorRecord, BoundingBox, ModelConfig
from igmn.memory_bank import MemoryActor, MemoryBank, MemoryEntry


def small_config(**overrides) -> ModelConfig:
    base = dict(c_feat=8, k=3, c_cls=6, pose_class_indices=(0, 1), half_window=2, n_max=3,
                num_layers=2, ffn_hidden=6, head_hidden=10)
    base.update(overrides)
    return ModelConfig(**base)


def make_actor(clip, track, box=(0.0, 0.0, 10.0, 10.0), c=8, k=3, rng=None, score=0.9, labels=None):
    rng = rng or np.random.default_rng(clip * 1000 + track)
    return ActorRecord(clip, BoundingBox.from_tuple(box), track, score,
                       rng.normal(size=(c, k, k)), labels)


def random_box(rng, size=100.0):
    x, y = rng.uniform(0, size, 2)
    h, w = rng.uniform(5, size / 2, 2)
    return BoundingBox(float(x), float(y), float(h), float(w))


def random_labels(rng, cfg: ModelConfig, n: int) -> np.ndarray:
    labels = (rng.random((n, cfg.c_cls)) < 0.3).astype(np.float64)
    pose = list(cfg.pose_class_indices)
    labels[:, pose] = 0
    labels[np.arange(n), rng.choice(pose, size=n)] = 1
    return labels


def random_tracklets(rng, center=0, half_width=None, max_tracks=5):
    """Random tracks over the window of ``center``; returns (actors, bank, half_width, n_max).

    At least one track is present at the center clip so that the keyframe has actors.
    """
    half_width = half_width or int(rng.integers(1, 5))
    clips = [center + d for d in range(-half_width, half_width + 1)]
    num_tracks = int(rng.integers(1, max_tracks + 1))
    presence = rng.random((num_tracks, len(clips))) < rng.uniform(0.3, 0.9)
    presence[int(rng.integers(num_tracks)), half_width] = True
    c = 4
    actors = []
    entries: dict[int, list] = {}
    for track in range(num_tracks):
        for j, clip in enumerate(clips):
            if not presence[track, j]:
                continue
            box = (float(track * 20), float(clip % 7), 15.0, 12.0)
            if clip == center:
                actors.append(make_actor(clip, track, box, c=c, k=2, rng=rng))
            else:
                entries.setdefault(clip, []).append(
                    MemoryActor(track, BoundingBox.from_tuple(box), float(rng.uniform(0.5, 1)),
                                rng.normal(size=c)))
    bank = MemoryBank(c, max(num_tracks, 1))
    for clip, items in entries.items():
        bank.write(MemoryEntry(clip, tuple(items)))
    return actors, bank, half_width, num_tracks


@pytest.fixture
def double_precision():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


__all__ = ["small_config", "make_actor", "random_box", "random_labels", "random_tracklets",
           "ActionLabelVector"]


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    if module is None or not module.OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for outcome in module.OUTCOMES:
        terminalreporter.write_line(outcome.line())
