"""Synthetic scenes in which correct labels need identity cues.

Every identity renders a signature into the pixels its box covers: a shared
body marker, its pose, a binary "state" and, while acting, an action
signature.  Overlapping actors therefore contaminate each other's RoIs.

Class layout (12 classes):

====  ===========  =====================================================
idx   name         positive when
====  ===========  =====================================================
0-2   pose         the identity's pose at t (exactly one, softmax-scored)
3     start        state(t-1) = 0 and state(t+1) = 1
4     stop         state(t-1) = 1 and state(t+1) = 0
5     long_start   state(t-3) = 0 and state(t+3) = 1
6     long_stop    state(t-3) = 1 and state(t+3) = 0
7     steady       state is 1 at every clip t-2 .. t+2
8-9   do_k         the identity performs action k at t
10-11 receive_k    another identity whose box overlaps performs action k
====  ===========  =====================================================

Temporal classes need the identity to be present at every clip they look at;
otherwise they are negative.  The temporal classes depend on the order of one
identity's own states, the receive classes on a partner's signature inside
the overlap region.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..dam import roi_grid
from ..data_model import ActionLabelVector, ActorRecord, BoundingBox, Detection, contains

CLASS_NAMES = ("stand", "sit", "lie", "start", "stop", "long_start", "long_stop", "steady",
               "do_0", "do_1", "receive_0", "receive_1")
NUM_CLASSES = len(CLASS_NAMES)
POSE_CLASSES = (0, 1, 2)
START, STOP, LONG_START, LONG_STOP, STEADY = 3, 4, 5, 6, 7
DO = (8, 9)
RECEIVE = (10, 11)
NUM_POSES = 3
NUM_ACTIONS = 2
CODEBOOK_SEED = 20210801


class InfeasibleScriptError(ValueError):
    pass


@dataclass
class IdentityScript:
    track_id: int
    first_clip: int
    boxes: list  # (x, y, h, w) per clip from first_clip on
    poses: list
    states: list
    actions: list  # -1 = idle, else action index

    @property
    def last_clip(self) -> int:
        return self.first_clip + len(self.boxes) - 1

    def present(self, t: int) -> bool:
        return self.first_clip <= t <= self.last_clip

    def box(self, t: int) -> BoundingBox:
        return BoundingBox.from_tuple(self.boxes[t - self.first_clip])

    def state(self, t: int) -> int:
        return self.states[t - self.first_clip]

    def pose(self, t: int) -> int:
        return self.poses[t - self.first_clip]

    def action(self, t: int) -> int:
        return self.actions[t - self.first_clip]


@dataclass
class SceneScript:
    video_id: str
    num_clips: int
    frame_w: float
    frame_h: float
    identities: list
    interactions: list = field(default_factory=list)  # (agent, receiver, action, first, last)
    noise: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        for ident in self.identities:
            if ident.first_clip < 0 or ident.last_clip >= self.num_clips:
                raise InfeasibleScriptError(f"track {ident.track_id} outside the clip range")
            for t in range(ident.first_clip, ident.last_clip + 1):
                b = ident.box(t)
                if b.x < 0 or b.y < 0 or b.x + b.w > self.frame_w or b.y + b.h > self.frame_h:
                    raise InfeasibleScriptError(f"track {ident.track_id} leaves the frame at clip {t}")
        by_id = {i.track_id: i for i in self.identities}
        for agent, receiver, k, first, last in self.interactions:
            a, r = by_id[agent], by_id[receiver]
            for t in range(first, last + 1):
                if not (a.present(t) and r.present(t)):
                    raise InfeasibleScriptError(f"interaction {agent}->{receiver} at clip {t} lacks a partner")
                if not boxes_overlap(a.box(t), r.box(t)):
                    raise InfeasibleScriptError(f"interaction {agent}->{receiver} at clip {t} without overlap")
                if a.action(t) != k:
                    raise InfeasibleScriptError(f"agent {agent} not performing action {k} at clip {t}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneScript":
        d = dict(d)
        d["identities"] = [IdentityScript(**i) for i in d["identities"]]
        d["interactions"] = [tuple(x) for x in d.get("interactions", [])]
        return cls(**d)


def boxes_overlap(a: BoundingBox, b: BoundingBox) -> bool:
    return (min(a.x + a.w, b.x + b.w) > max(a.x, b.x)
            and min(a.y + a.h, b.y + b.h) > max(a.y, b.y))


# -- labels -------------------------------------------------------------------


def _states_at(ident: IdentityScript, clips: Sequence[int]):
    if not all(ident.present(c) for c in clips):
        return None
    return [ident.state(c) for c in clips]


def label_indices(script: SceneScript, ident: IdentityScript, t: int) -> list[int]:
    positives = [ident.pose(t)]
    pair = _states_at(ident, (t - 1, t + 1))
    if pair == [0, 1]:
        positives.append(START)
    elif pair == [1, 0]:
        positives.append(STOP)
    far = _states_at(ident, (t - 3, t + 3))
    if far == [0, 1]:
        positives.append(LONG_START)
    elif far == [1, 0]:
        positives.append(LONG_STOP)
    span = _states_at(ident, range(t - 2, t + 3))
    if span is not None and all(s == 1 for s in span):
        positives.append(STEADY)
    if ident.action(t) >= 0:
        positives.append(DO[ident.action(t)])
    own = ident.box(t)
    for other in script.identities:
        if other is ident or not other.present(t) or other.action(t) < 0:
            continue
        if boxes_overlap(own, other.box(t)):
            positives.append(RECEIVE[other.action(t)])
    return sorted(set(positives))


def labels_for(script: SceneScript, ident: IdentityScript, t: int) -> ActionLabelVector:
    return ActionLabelVector.from_indices(label_indices(script, ident, t), NUM_CLASSES, POSE_CLASSES)


# -- rendering ----------------------------------------------------------------


@dataclass(frozen=True)
class Codebook:
    body: np.ndarray
    pose: np.ndarray  # (3, C)
    state: np.ndarray  # (2, C)
    action: np.ndarray  # (2, C)

    @classmethod
    def make(cls, c_feat: int, strength: float = 1.0, seed: int = CODEBOOK_SEED) -> "Codebook":
        rng = np.random.default_rng(seed)
        vecs = rng.normal(size=(1 + NUM_POSES + 2 + NUM_ACTIONS, c_feat))
        vecs *= strength / np.linalg.norm(vecs, axis=1, keepdims=True)
        return cls(vecs[0], vecs[1:4], vecs[4:6], vecs[6:8])

    def signature(self, ident: IdentityScript, t: int) -> np.ndarray:
        sig = self.body + self.pose[ident.pose(t)] + self.state[ident.state(t)]
        if ident.action(t) >= 0:
            sig = sig + self.action[ident.action(t)]
        return sig


def render_points(script: SceneScript, codebook: Codebook, t: int, xa: np.ndarray, ya: np.ndarray,
                  rng: Optional[np.random.Generator]) -> np.ndarray:
    """Feature vectors at the given absolute points, shape (C,) + xa.shape."""
    c = codebook.body.shape[0]
    out = np.zeros((c,) + xa.shape)
    for ident in script.identities:
        if not ident.present(t):
            continue
        cover = contains(ident.box(t), xa, ya).astype(np.float64)
        if cover.any():
            out += codebook.signature(ident, t).reshape((c,) + (1,) * xa.ndim) * cover
    if rng is not None and script.noise > 0:
        out += rng.normal(0.0, script.noise, size=out.shape)
    return out


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256(json.dumps(parts, default=str).encode()).digest()
    return int.from_bytes(digest[:8], "little")


class SceneFeatureProvider:
    """Crops RoI features from rendered scenes; RoI grid uses the geometric axes."""

    def __init__(self, scripts: dict, c_feat: int, k: int, strength: float = 1.0,
                 dtype=np.float32):
        self.scripts = scripts
        self.k = k
        self.codebook = Codebook.make(c_feat, strength)
        self.dtype = dtype

    def crop(self, video_id: str, clip_index: int, box: BoundingBox, roi_box: BoundingBox,
             rng: Optional[np.random.Generator] = None) -> np.ndarray:
        script = self.scripts[video_id]
        if rng is None:
            rng = np.random.default_rng(_stable_seed(script.seed, video_id, clip_index, roi_box.as_tuple()))
        xa, ya = roi_grid(roi_box, self.k, axis_swap=True)
        return render_points(script, self.codebook, clip_index, xa, ya, rng).astype(self.dtype)


# -- script sampling ------------------------------------------------------------


def _segments(rng, length, lo, hi, values, alternate=False):
    out, v = [], int(rng.integers(len(values)))
    while len(out) < length:
        out.extend([values[v]] * int(rng.integers(lo, hi + 1)))
        v = (v + 1) % len(values) if alternate else int(rng.integers(len(values)))
    return out[:length]


def _fit(start: float, size: float, extent: float) -> float:
    """Clamp an interval start so that [start, start + size] lies inside [0, extent] in floats."""
    start = float(np.clip(start, 0.0, extent - size))
    while start + size > extent:
        start = float(np.nextafter(start, -np.inf))
    return start


def sample_script(seed: int, video_id: str = "v0", num_clips: int = 40, num_identities=(2, 4),
                  frame_w: float = 224.0, frame_h: float = 112.0, size=(28.0, 36.0),
                  noise: float = 0.1, interaction_rate: float = 0.5,
                  partial_presence: float = 0.3) -> SceneScript:
    """Random but deterministic script; every scripted interaction makes the pair overlap."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(num_identities[0], num_identities[1] + 1))
    spacing = frame_w / n
    if spacing < size[1] * 1.5:
        raise InfeasibleScriptError("frame too narrow for the requested identities")
    sizes = rng.uniform(size[0], size[1], n)
    homes = [(spacing * (i + 0.5), rng.uniform(s / 2, frame_h - s / 2)) for i, s in enumerate(sizes)]
    first = np.zeros(n, dtype=int)
    last = np.full(n, num_clips - 1)
    for i in range(n):
        if rng.random() < partial_presence:
            if rng.random() < 0.5:
                first[i] = int(rng.integers(1, num_clips // 3))
            else:
                last[i] = int(rng.integers(2 * num_clips // 3, num_clips - 1))

    centers = np.zeros((n, num_clips, 2))
    for i in range(n):
        drift = np.cumsum(rng.uniform(-2, 2, size=(num_clips, 2)), axis=0)
        drift = np.clip(drift, -6, 6)
        centers[i] = np.array(homes[i]) + drift
    actions = -np.ones((n, num_clips), dtype=int)
    interactions = []

    t = int(rng.integers(0, 4))
    while t < num_clips - 2:
        length = int(rng.integers(3, 7))
        span = range(t, min(num_clips, t + length))
        present = [i for i in range(n) if all(first[i] <= c <= last[i] for c in span)]
        if len(present) >= 2 and rng.random() < interaction_rate:
            a, r = rng.choice(present, size=2, replace=False)
            k = int(rng.integers(NUM_ACTIONS))
            side = 1.0 if homes[r][0] > homes[a][0] else -1.0
            offset = 0.6 * (sizes[a] + sizes[r]) / 2
            dy = rng.uniform(-0.15, 0.15) * sizes[r]
            for c in span:
                centers[r, c] = centers[a, c] + np.array([side * offset, dy])
                actions[a, c] = k
            interactions.append((int(a), int(r), k, span[0], span[-1]))
        elif len(present) >= 1 and rng.random() < 0.5:
            a = int(rng.choice(present))
            k = int(rng.integers(NUM_ACTIONS))
            for c in span:
                actions[a, c] = k
        t = span[-1] + 1 + int(rng.integers(1, 5))

    identities = []
    for i in range(n):
        s = sizes[i]
        clips = range(first[i], last[i] + 1)
        boxes = []
        for c in clips:
            boxes.append((_fit(centers[i, c, 0] - s / 2, s, frame_w),
                          _fit(centers[i, c, 1] - s / 2, s, frame_h), float(s), float(s)))
        identities.append(IdentityScript(
            track_id=i,
            first_clip=int(first[i]),
            boxes=boxes,
            poses=_segments(rng, len(clips), 3, 8, list(range(NUM_POSES))),
            states=_segments(rng, len(clips), 2, 6, [0, 1], alternate=True),
            actions=[int(actions[i, c]) for c in clips],
        ))
    script = SceneScript(video_id, num_clips, frame_w, frame_h, identities,
                         interactions, noise, seed)
    # clamping into the frame may pull a receiver off its agent
    script.interactions = [x for x in interactions
                           if all(boxes_overlap(identities[x[0]].box(c), identities[x[1]].box(c))
                                  for c in range(x[3], x[4] + 1))]
    script.validate()
    return script


# -- scenes -------------------------------------------------------------------


@dataclass
class SceneData:
    """Ground-truth actors and simulated detections of one video."""

    video_id: str
    num_clips: int
    gt: dict  # clip -> list[ActorRecord]
    detections: dict  # clip -> list[Detection]


def generate_scene(script: SceneScript, c_feat: int = 32, k: int = 5, strength: float = 1.0,
                   miss_rate: float = 0.02, spurious_rate: float = 0.5,
                   provider: Optional[SceneFeatureProvider] = None) -> SceneData:
    script.validate()
    provider = provider or SceneFeatureProvider({script.video_id: script}, c_feat, k, strength)
    rng = np.random.default_rng(_stable_seed("scene", script.seed, script.video_id))
    gt, dets = {}, {}
    for t in range(script.num_clips):
        actors, clip_dets = [], []
        for ident in script.identities:
            if not ident.present(t):
                continue
            box = ident.box(t)
            fm = provider.crop(script.video_id, t, box, box, rng)
            actors.append(ActorRecord(t, box, ident.track_id, 1.0, fm, labels_for(script, ident, t)))
            if rng.random() >= miss_rate:
                s = rng.uniform(0.93, 1.07)
                cx, cy = box.center
                cx += rng.uniform(-0.04, 0.04) * box.w
                cy += rng.uniform(-0.04, 0.04) * box.h
                side = box.w * s
                clip_dets.append(Detection(script.video_id, t, BoundingBox(cx - side / 2, cy - side / 2, side, side),
                                           float(rng.uniform(0.82, 1.0)), ident.track_id))
        for j in range(int(rng.poisson(spurious_rate))):
            side = rng.uniform(20, 40)
            clip_dets.append(Detection(script.video_id, t,
                                       BoundingBox(rng.uniform(0, script.frame_w - side),
                                                   rng.uniform(0, script.frame_h - side), side, side),
                                       float(rng.uniform(0.05, 0.79)), 1000 + j))
        gt[t] = actors
        dets[t] = clip_dets
    return SceneData(script.video_id, script.num_clips, gt, dets)


@dataclass
class Benchmark:
    scripts: dict
    scenes: dict
    train_ids: list
    test_ids: list
    provider: SceneFeatureProvider
    c_feat: int
    k: int

    def train_videos(self) -> dict:
        return {v: self.scenes[v].gt for v in self.train_ids}


def make_benchmark(seed: int = 0, num_videos: int = 30, num_clips: int = 40, num_train: int = 20,
                   c_feat: int = 32, k: int = 5, noise: float = 0.1, strength: float = 1.0,
                   **script_kwargs) -> Benchmark:
    scripts = {}
    for i in range(num_videos):
        vid = f"v{i:03d}"
        scripts[vid] = sample_script(_stable_seed("video", seed, i) % (2**32), vid, num_clips,
                                     noise=noise, **script_kwargs)
    provider = SceneFeatureProvider(scripts, c_feat, k, strength)
    scenes = {v: generate_scene(s, c_feat, k, strength, provider=provider) for v, s in scripts.items()}
    ids = sorted(scripts)
    return Benchmark(scripts, scenes, ids[:num_train], ids[num_train:], provider, c_feat, k)
