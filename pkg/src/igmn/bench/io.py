"""Line-delimited JSON records and a binary feature container.

Feature file layout (little endian)::

    b"IGMNFEAT" | uint32 version | uint64 index length | JSON index | raw data

The JSON index lists, per record, its key (video_id, clip_index, box), dtype,
shape and byte offset into the raw data block.
"""

from __future__ import annotations

import json
import struct
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ..data_model import ActionLabelVector, ActorRecord, BoundingBox, Detection, PredictionRecord

FEATURE_MAGIC = b"IGMNFEAT"
FEATURE_VERSION = 1


class IngestError(ValueError):
    pass


def _key(video_id, clip_index, box) -> tuple:
    return (str(video_id), int(clip_index), tuple(float(v) for v in box))


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
    return out


def write_features(path, items: Iterable[tuple[tuple, np.ndarray]]) -> None:
    index, blobs, offset = [], [], 0
    for key, arr in items:
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        index.append({"video_id": key[0], "clip_index": key[1], "box": list(key[2]),
                      "dtype": arr.dtype.newbyteorder("<").str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(index).encode()
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<IQ", FEATURE_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def read_features(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise IngestError(f"{path}: not a feature container")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FEATURE_VERSION:
        raise IngestError(f"{path}: unsupported feature container version {version}")
    index = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    out = {}
    for rec in index:
        key = _key(rec["video_id"], rec["clip_index"], rec["box"])
        if key in out:
            raise IngestError(f"{path}: duplicate feature key {key}")
        start = base + rec["offset"]
        arr = np.frombuffer(raw[start:start + rec["nbytes"]], dtype=np.dtype(rec["dtype"]))
        out[key] = arr.reshape(rec["shape"]).copy()
    return out


def detection_record(video_id, clip_index, box: BoundingBox, score, labels=None) -> dict:
    rec = {"video_id": video_id, "clip_index": int(clip_index), "box": list(box.as_tuple()),
           "score": float(score)}
    if labels is not None:
        rec["labels"] = labels.positives()
    return rec


def export_actors(directory, prefix: str, videos: dict) -> None:
    """Write ``{prefix}_detections.jsonl``, ``_tracks.jsonl`` and ``_features.bin``.

    ``videos`` maps video id -> clip -> list of ActorRecord.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dets, tracks, feats = [], [], []
    for vid in sorted(videos):
        for t in sorted(videos[vid]):
            for a in videos[vid][t]:
                dets.append(detection_record(vid, t, a.box, a.score, a.labels))
                tracks.append({"video_id": vid, "clip_index": int(t), "box": list(a.box.as_tuple()),
                               "track_id": int(a.track_id)})
                feats.append((_key(vid, t, a.box.as_tuple()), a.feature_map))
    write_jsonl(directory / f"{prefix}_detections.jsonl", dets)
    write_jsonl(directory / f"{prefix}_tracks.jsonl", tracks)
    write_features(directory / f"{prefix}_features.bin", feats)


@dataclass
class IngestReport:
    accepted: int = 0
    rejected: list = field(default_factory=list)  # (key, reason)

    @property
    def num_rejected(self) -> int:
        return len(self.rejected)


def ingest(detections_file, tracks_file, features_file, c_feat: Optional[int] = None,
           k: Optional[int] = None, num_classes: Optional[int] = None,
           pose_class_indices=(0, 1, 2)):
    """Join detection, track and feature files into ``video -> clip -> [ActorRecord]``.

    Detections without a track row or without features are rejected and
    reported; duplicate keys and malformed records raise ``IngestError``.
    """
    tracks = {}
    for rec in read_jsonl(tracks_file):
        _require(rec, ("video_id", "clip_index", "box", "track_id"), tracks_file)
        key = _key(rec["video_id"], rec["clip_index"], rec["box"])
        if key in tracks:
            raise IngestError(f"{tracks_file}: duplicate track key {key}")
        tracks[key] = int(rec["track_id"])
    features = read_features(features_file)
    videos: dict = defaultdict(lambda: defaultdict(list))
    report = IngestReport()
    seen = set()
    for rec in read_jsonl(detections_file):
        _require(rec, ("video_id", "clip_index", "box", "score"), detections_file)
        key = _key(rec["video_id"], rec["clip_index"], rec["box"])
        if key in seen:
            raise IngestError(f"{detections_file}: duplicate detection key {key}")
        seen.add(key)
        if key not in tracks:
            report.rejected.append((key, "no track"))
            continue
        if key not in features:
            report.rejected.append((key, "no features"))
            continue
        fm = features[key]
        if fm.ndim != 3 or fm.shape[1] != fm.shape[2]:
            raise IngestError(f"feature for {key} has shape {fm.shape}, expected C x K x K")
        if (c_feat is not None and fm.shape[0] != c_feat) or (k is not None and fm.shape[1] != k):
            raise IngestError(f"feature for {key} has shape {fm.shape}, expected {(c_feat, k, k)}")
        labels = None
        if "labels" in rec:
            if num_classes is None:
                raise IngestError("labelled detections need num_classes")
            labels = ActionLabelVector.from_indices(rec["labels"], num_classes, pose_class_indices)
        actor = ActorRecord(key[1], BoundingBox.from_tuple(key[2]), tracks[key], float(rec["score"]),
                            fm, labels)
        videos[key[0]][key[1]].append(actor)
        report.accepted += 1
    return {v: dict(c) for v, c in videos.items()}, report


def _require(rec: dict, fields, path) -> None:
    missing = [f for f in fields if f not in rec]
    if missing:
        raise IngestError(f"{path}: record {rec} lacks fields {missing}")
    if len(rec["box"]) != 4:
        raise IngestError(f"{path}: box must have 4 values, got {rec['box']}")


def write_detections(path, detections: Iterable[Detection]) -> None:
    write_jsonl(path, ({"video_id": d.video_id, "clip_index": d.clip_index, "box": list(d.box.as_tuple()),
                        "score": d.score, "track_id": d.track_id} for d in detections))


def read_detections(path) -> dict:
    """Detections grouped as ``video -> clip -> [Detection]``."""
    out: dict = defaultdict(lambda: defaultdict(list))
    for rec in read_jsonl(path):
        _require(rec, ("video_id", "clip_index", "box", "score", "track_id"), path)
        d = Detection(rec["video_id"], int(rec["clip_index"]), BoundingBox.from_tuple(rec["box"]),
                      float(rec["score"]), int(rec["track_id"]))
        out[d.video_id][d.clip_index].append(d)
    return {v: dict(c) for v, c in out.items()}


def write_predictions(path, predictions: Iterable[PredictionRecord]) -> None:
    write_jsonl(path, ({"video_id": p.video_id, "clip_index": p.clip_index, "box": list(p.box.as_tuple()),
                        "score": p.score, "track_id": p.track_id, "class_scores": list(p.class_scores)}
                       for p in predictions))


def read_predictions(path) -> list[PredictionRecord]:
    return [PredictionRecord(r["video_id"], int(r["clip_index"]), BoundingBox.from_tuple(r["box"]),
                             float(r["score"]), int(r["track_id"]), tuple(r["class_scores"]))
            for r in read_jsonl(path)]
