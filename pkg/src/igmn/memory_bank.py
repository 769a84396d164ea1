"""Clip-indexed store of pooled actor features.

The bank keeps, for every clip of one video, the pooled feature vector of each
actor together with its box, track id and detection score.  A keyframe at
clip ``t`` reads the surrounding clips ``t-L .. t+L`` (``t`` itself excluded)
as a fixed-size, masked window.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .data_model import BoundingBox

FORMAT_VERSION = 1


class MemoryBankFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MemoryActor:
    track_id: int
    box: BoundingBox
    score: float
    feature: np.ndarray

    def __eq__(self, other):
        if not isinstance(other, MemoryActor):
            return NotImplemented
        return (self.track_id == other.track_id and self.box == other.box
                and self.score == other.score
                and self.feature.dtype == other.feature.dtype
                and np.array_equal(self.feature, other.feature))


@dataclass(frozen=True)
class MemoryEntry:
    """Actors of one clip, kept in descending score order."""

    clip_index: int
    actors: tuple[MemoryActor, ...] = ()

    def __post_init__(self):
        ordered = sorted(self.actors, key=lambda a: -a.score)
        object.__setattr__(self, "actors", tuple(ordered))


@dataclass
class MemoryWindow:
    """Dense view of the clips around ``center``.

    Slot ``s`` holds clip ``clip_indices[s]``; the clip ``center`` is never
    among them.  Invalid actor slots carry zero features, track id -1 and a
    false mask.
    """

    center: int
    half_width: int
    clip_indices: np.ndarray  # (2L,)
    features: np.ndarray  # (2L, N_max, C)
    boxes: np.ndarray  # (2L, N_max, 4) as (x, y, h, w)
    track_ids: np.ndarray  # (2L, N_max)
    scores: np.ndarray  # (2L, N_max)
    mask: np.ndarray  # (2L, N_max) bool

    @property
    def n_max(self) -> int:
        return self.mask.shape[1]

    def valid_slots(self):
        """Yield (slot, position, clip_index) for every valid actor slot."""
        for s, n in zip(*np.nonzero(self.mask)):
            yield int(s), int(n), int(self.clip_indices[s])

    @classmethod
    def empty(cls, center: int, half_width: int, n_max: int, c_feat: int,
              dtype=np.float32) -> "MemoryWindow":
        clips = window_clips(center, half_width)
        slots = len(clips)
        return cls(
            center=center,
            half_width=half_width,
            clip_indices=np.asarray(clips, dtype=np.int64),
            features=np.zeros((slots, n_max, c_feat), dtype=dtype),
            boxes=np.zeros((slots, n_max, 4), dtype=np.float64),
            track_ids=np.full((slots, n_max), -1, dtype=np.int64),
            scores=np.zeros((slots, n_max), dtype=np.float64),
            mask=np.zeros((slots, n_max), dtype=bool),
        )


def window_clips(center: int, half_width: int) -> list[int]:
    if half_width < 1:
        raise ValueError("half window must be >= 1")
    return [t for t in range(center - half_width, center + half_width + 1) if t != center]


class MemoryBank:
    """Per-video feature memory with overwrite-on-write semantics.

    Writes replace the whole entry of a clip atomically, so a concurrent
    reader sees either the previous or the new entry.
    """

    def __init__(self, c_feat: int, n_max: int, dtype=np.float32):
        if c_feat < 1 or n_max < 1:
            raise ValueError("c_feat and n_max must be >= 1")
        self.c_feat = c_feat
        self.n_max = n_max
        self.dtype = np.dtype(dtype)
        self._entries: dict[int, MemoryEntry] = {}
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, clip_index: int):
        return clip_index in self._entries

    def clips(self) -> list[int]:
        return sorted(self._entries)

    def read(self, clip_index: int) -> Optional[MemoryEntry]:
        return self._entries.get(clip_index)

    def write(self, entry: MemoryEntry) -> None:
        actors = []
        for a in entry.actors[: self.n_max]:
            feat = np.array(a.feature, dtype=self.dtype, copy=True).reshape(-1)
            if feat.shape != (self.c_feat,):
                raise ValueError(
                    f"memory feature for track {a.track_id} at clip {entry.clip_index} "
                    f"has length {feat.size}, expected {self.c_feat}")
            feat.setflags(write=False)
            actors.append(MemoryActor(int(a.track_id), a.box, float(a.score), feat))
        stored = MemoryEntry(int(entry.clip_index), tuple(actors))
        with self._lock:
            self._entries[stored.clip_index] = stored

    def window(self, t: int, half_width: int) -> MemoryWindow:
        win = MemoryWindow.empty(t, half_width, self.n_max, self.c_feat, self.dtype)
        entries = self._entries
        for s, clip in enumerate(win.clip_indices):
            entry = entries.get(int(clip))
            if entry is None:
                continue
            for n, a in enumerate(entry.actors[: self.n_max]):
                win.features[s, n] = a.feature
                win.boxes[s, n] = a.box.as_tuple()
                win.track_ids[s, n] = a.track_id
                win.scores[s, n] = a.score
                win.mask[s, n] = True
        return win

    def entries(self) -> Iterable[MemoryEntry]:
        for clip in self.clips():
            yield self._entries[clip]

    def __eq__(self, other):
        if not isinstance(other, MemoryBank):
            return NotImplemented
        return (self.c_feat == other.c_feat and self.n_max == other.n_max
                and self.dtype == other.dtype and self._entries == other._entries)

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        rows = [(e.clip_index, a) for e in self.entries() for a in e.actors]
        header = {
            "format_version": FORMAT_VERSION,
            "c_feat": self.c_feat,
            "n_max": self.n_max,
            "dtype": self.dtype.str,
            "clips": self.clips(),
        }
        arrays = {
            "header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8),
            "clip_index": np.array([c for c, _ in rows], dtype=np.int64),
            "track_id": np.array([a.track_id for _, a in rows], dtype=np.int64),
            "box": np.array([a.box.as_tuple() for _, a in rows], dtype=np.float64).reshape(-1, 4),
            "score": np.array([a.score for _, a in rows], dtype=np.float64),
            "feature": np.array([a.feature for _, a in rows], dtype=self.dtype).reshape(-1, self.c_feat),
        }
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)

    @classmethod
    def load(cls, path, c_feat: Optional[int] = None, n_max: Optional[int] = None) -> "MemoryBank":
        path = Path(path)
        if path.stat().st_size == 0:
            raise MemoryBankFormatError(f"{path}: empty file is not a memory bank snapshot")
        try:
            with np.load(path, allow_pickle=False) as data:
                arrays = {k: data[k] for k in data.files}
        except (ValueError, OSError, EOFError) as exc:
            raise MemoryBankFormatError(f"{path}: unreadable snapshot ({exc})") from exc
        if "header" not in arrays:
            raise MemoryBankFormatError(f"{path}: missing header")
        header = json.loads(arrays["header"].tobytes().decode())
        if header.get("format_version") != FORMAT_VERSION:
            raise MemoryBankFormatError(
                f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
        if c_feat is not None and header["c_feat"] != c_feat:
            raise MemoryBankFormatError(
                f"{path}: feature length {header['c_feat']} does not match expected {c_feat}")
        if n_max is not None and header["n_max"] != n_max:
            raise MemoryBankFormatError(
                f"{path}: n_max {header['n_max']} does not match expected {n_max}")
        bank = cls(header["c_feat"], header["n_max"], dtype=np.dtype(header["dtype"]))
        feats = arrays["feature"]
        if feats.shape[1:] != (bank.c_feat,):
            raise MemoryBankFormatError(f"{path}: feature array shape {feats.shape} inconsistent")
        grouped: dict[int, list[MemoryActor]] = {c: [] for c in header["clips"]}
        for i, clip in enumerate(arrays["clip_index"]):
            grouped[int(clip)].append(MemoryActor(
                int(arrays["track_id"][i]), BoundingBox.from_tuple(arrays["box"][i]),
                float(arrays["score"][i]), feats[i]))
        for clip, actors in grouped.items():
            bank.write(MemoryEntry(clip, tuple(actors)))
        return bank
