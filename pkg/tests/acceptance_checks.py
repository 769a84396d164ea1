"""One function per acceptance criterion, each returning the measured quantities it is judged on.

The pytest wrappers live in test_acceptance.py; some unit-test modules reuse these directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from igmn.bench.ablation import base_config, run_ablation, summarize
from igmn.bench.evaluation import GroundTruth, class_ap, frame_map
from igmn.bench.synthetic import make_benchmark
from igmn.data_model import BoundingBox, PredictionRecord
from igmn.identity_graph import build_graph, downsample
from igmn.losses import relaxed_bce, standard_bce, total_loss, weighted_total
from igmn.memory_bank import MemoryActor, MemoryBank, MemoryEntry
from igmn.model import IGMN, KeyframeSample, forward
from igmn.training import TrainConfig, TrainItem, Trainer, make_optimizer, train_step, warm_up

from conftest import make_actor, random_tracklets, small_config
from gradcheck import dam_case, head_case, hgnn_case, loss_cases, relative_error
from oracles import downsample_by_rule, edges_by_rule, graph_as_keys, graph_nodes

ABLATION_SEEDS = (0, 1, 2)
# the frozen-memory ordering needs the longer schedule to separate from noise on this benchmark
ABLATION_EPOCHS = 24
GRADIENT_DRAWS = 20
OVERFIT_STEPS = 200
# the single-batch regime diverges for some initialisations at the default training rate
OVERFIT_LR = 0.01
REPORT_FIELDS = ("cls_fuse", "cls_sem", "cls_idt", "prior_sem", "prior_idt")


class double_default:
    """Context manager switching torch's default dtype to float64."""

    def __enter__(self):
        self.previous = torch.get_default_dtype()
        torch.set_default_dtype(torch.float64)

    def __exit__(self, *exc):
        torch.set_default_dtype(self.previous)


def _report_consistent(r, lambda_aux) -> bool:
    return r.total == weighted_total(*(getattr(r, f) for f in REPORT_FIELDS), lambda_aux)


# -- 1: loss identities -----------------------------------------------------------------

def loss_identity_violations(instances: int = 1000, seed: int = 0) -> int:
    """Instances where relaxed BCE with E = y differs from standard BCE, or a report's total
    differs from its weighted sum, including every report of a short training run."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(instances):
        n, c = int(rng.integers(1, 6)), int(rng.integers(1, 8))
        p = torch.tensor(rng.random((n, c)), dtype=torch.float64)
        y = rng.integers(0, 2, (n, c)).astype(float)
        mask = rng.integers(0, 2, c)
        bad += not torch.equal(relaxed_bce(p, y, y, mask), standard_bce(p, y, mask))
        lam = float(rng.random())
        bad += not _report_consistent(total_loss(dict(zip(REPORT_FIELDS, rng.random(5) * 10)), lam), lam)

    bench = make_benchmark(seed=0, num_videos=1, num_clips=8, num_train=1, c_feat=8, k=3)
    torch.manual_seed(0)
    model = IGMN(base_config(bench, ffn_hidden=8, head_hidden=16))
    trainer = Trainer(model, TrainConfig(epochs=10, batch_size=4), provider=bench.provider)
    bad += sum(not _report_consistent(r, model.cfg.lambda_aux)
               for r in trainer.fit(bench.train_videos()))
    return bad


# -- 2: gradients -------------------------------------------------------------------------

def gradient_errors(draws: int = GRADIENT_DRAWS) -> dict:
    """Worst relative gradient error per component over ``draws`` random draws."""
    worst: dict = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    with double_default():
        for d in range(draws):
            note("hgnn", relative_error(*hgnn_case(d)))
            note("dam", relative_error(*dam_case(d)))
            note("fusion_head", relative_error(*head_case(d)))
            for name, (fn, tensors) in loss_cases(d).items():
                note(name, relative_error(fn, tensors))
    return worst


# -- 3: graph oracles ---------------------------------------------------------------------

def graph_oracle_mismatches(configs: int = 1000, seed: int = 0) -> int:
    """Configurations where build_graph or downsample disagrees with the brute-force rules."""
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(configs):
        actors, bank, half_width, _ = random_tracklets(rng)
        win = bank.window(0, half_width)
        g = build_graph(actors, win)
        nodes = graph_nodes(actors, win)
        survivors, edges = downsample_by_rule(nodes, 0)
        bad += (graph_as_keys(g) != (set(nodes), *edges_by_rule(nodes))
                or graph_as_keys(downsample(g)) != (set(survivors), *edges))
    return bad


def seven_node_survivors() -> list:
    """Clip offsets left after one down-sampling of a single track spanning t-3..t+3."""
    bank = MemoryBank(8, 2)
    for t in (-3, -2, -1, 1, 2, 3):
        bank.write(MemoryEntry(t, (MemoryActor(0, BoundingBox(0, 0, 10, 10), 0.9, np.zeros(8)),)))
    g = downsample(build_graph([make_actor(0, 0)], bank.window(0, 3)))
    return sorted(n.clip_index for n in g.nodes)


# -- 4: equivariance and masking -----------------------------------------------------------

BOXES = [(0, 0, 10, 10), (6, 2, 10, 12), (30, 30, 8, 8), (3, 20, 10, 9), (15, 5, 12, 7)]


def _keyframe(rng, n):
    return [make_actor(0, i, BOXES[i], c=8, k=3, rng=rng) for i in range(n)]


def _bank(rng, n_max, per_clip=3):
    bank = MemoryBank(8, n_max)
    for t in (-2, -1, 1, 2):
        bank.write(MemoryEntry(t, tuple(MemoryActor(i, BoundingBox(i * 5, 0, 10, 10), 0.9 - 0.1 * i,
                                                    rng.normal(size=8)) for i in range(per_clip))))
    return bank


def permutation_error(trials: int = 20, seed: int = 0) -> float:
    """Largest deviation of forward outputs under actor permutation, in double precision."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    with double_default():
        torch.manual_seed(seed)
        model = IGMN(small_config()).double()
        for _ in range(trials):
            actors = _keyframe(rng, int(rng.integers(2, 6)))
            bank = _bank(rng, 3)
            base = forward(model, actors, bank)
            perm = rng.permutation(len(actors))
            out = forward(model, [actors[i] for i in perm], bank)
            for name in ("scores", "f_mem"):
                worst = max(worst, (getattr(out, name) - getattr(base, name)[perm]).abs().max().item())
    return worst


def masked_slot_changes(trials: int = 20, seed: int = 0) -> int:
    """Trials in which overwriting the masked memory slots changed any output bit."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    changed = 0
    for trial in range(trials):
        model = IGMN(small_config(use_dam=bool(trial % 2)))
        actors = _keyframe(rng, int(rng.integers(1, 5)))
        win = _bank(rng, 5, per_clip=int(rng.integers(1, 5))).window(0, 2)
        base = model([KeyframeSample("v", 0, actors, win)])
        masked = ~win.mask
        win.features[masked] = 1e4 * rng.normal(size=win.features[masked].shape)
        out = model([KeyframeSample("v", 0, actors, win)])
        changed += not (torch.equal(out.scores, base.scores) and torch.equal(out.f_mem, base.f_mem))
    return changed


# -- 5: evaluator ----------------------------------------------------------------------------

def evaluator_hand_cases() -> dict:
    box, far = BoundingBox(0, 0, 10, 10), BoundingBox(50, 50, 10, 10)
    gts = [GroundTruth("v", 0, box, (0,))]

    def pred(score, b, track):
        return PredictionRecord("v", 0, b, score, track, (score,))

    perfect_gts, perfect_preds = [], []
    for clip in range(4):
        for track, classes in enumerate([(0,), (1, 2), (0, 2)]):
            b = BoundingBox(track * 30.0, 0, 20, 20)
            perfect_gts.append(GroundTruth("v", clip, b, classes))
            perfect_preds.append(PredictionRecord("v", clip, b, 1.0, track,
                                                  tuple(float(c in classes) for c in range(3))))
    return {
        "correct_first": class_ap([pred(0.9, box, 0), pred(0.8, far, 1)], gts, 0),
        "swap": class_ap([pred(0.8, box, 0), pred(0.9, far, 1)], gts, 0),
        "perfect": frame_map(perfect_preds, perfect_gts, 0.5, range(3))[1],
    }


# -- 6: ablation ordering ------------------------------------------------------------------

ORDERINGS = {
    "a: igmn > hgnn > baseline": lambda m: m["igmn"] > m["hgnn"] > m["baseline"],
    "b: hgnn > hgnn_s": lambda m: m["hgnn"] > m["hgnn_s"],
    "c: igmn > igmn_no_aux": lambda m: m["igmn"] > m["igmn_no_aux"],
    "d: hgnn_frozen <= hgnn": lambda m: m["hgnn_frozen"] <= m["hgnn"],
}


def ablation(seeds=ABLATION_SEEDS, epochs: int = ABLATION_EPOCHS):
    """Run every variant for every seed; return results, mean mAP per variant and ordering verdicts."""
    results = run_ablation(seeds, tc=TrainConfig(epochs=epochs))
    means = {v: s[0] for v, s in summarize(results).items()}
    return results, means, {name: check(means) for name, check in ORDERINGS.items()}


# -- 7: overfit smoke -------------------------------------------------------------------------

def overfit_ratio(steps: int = OVERFIT_STEPS, seed: int = 0) -> float:
    """Final over initial cls_fuse after repeated steps on one fixed, un-augmented batch."""
    bench = make_benchmark(seed=seed, num_videos=1, num_clips=20, num_train=1)
    videos = bench.train_videos()
    vid = bench.train_ids[0]
    tc = TrainConfig(lr=OVERFIT_LR, augment=False)
    batch = [TrainItem(vid, t, actors) for t, actors in sorted(videos[vid].items()) if actors]
    batch = batch[:tc.batch_size]
    torch.manual_seed(seed)
    model = IGMN(base_config(bench))
    optimizer = make_optimizer(model, tc)
    banks: dict = {}
    warm_up(banks, videos, model.cfg)
    losses = [train_step(model, batch, banks, optimizer, tc=tc).cls_fuse for _ in range(steps)]
    return losses[-1] / losses[0]


@dataclass
class Outcome:
    criterion: str
    passed: bool
    detail: str
    seconds: float
    budget: float

    @property
    def ok(self) -> bool:
        return self.passed and self.seconds < self.budget

    def line(self) -> str:
        return (f"[{'PASS' if self.ok else 'FAIL'}] {self.criterion}: {self.detail} "
                f"({self.seconds:.1f}s of {self.budget:.0f}s budget)")
