"""Train/evaluate model variants on the synthetic benchmark."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
import torch

from ..data_model import ModelConfig
from ..inference import predict
from ..model import IGMN
from ..training import TrainConfig, Trainer
from .evaluation import frame_map, ground_truth_from_actors
from .synthetic import NUM_CLASSES, POSE_CLASSES, Benchmark, make_benchmark

log = logging.getLogger(__name__)

VARIANTS = {
    "igmn": {},
    "hgnn": {"use_dam": False},
    "baseline": {"use_dam": False, "use_hgnn": False, "use_memory": False},
    "hgnn_s": {"use_dam": False, "intra_actor": False, "downsample": False},
    "hgnn_frozen": {"use_dam": False, "freeze_memory": True},
    "igmn_no_aux": {"aux_cls": False, "aux_prior": False},
}


@dataclass
class RunResult:
    variant: str
    seed: int
    mean_ap: float
    per_class: dict
    seconds: float
    final_loss: float


def evaluate(model: IGMN, bench: Benchmark, video_ids: Optional[Sequence[str]] = None):
    video_ids = bench.test_ids if video_ids is None else video_ids
    preds, gts = [], []
    for vid in video_ids:
        scene = bench.scenes[vid]
        preds.extend(predict(model, vid, scene.detections, provider=bench.provider,
                             rng=np.random.default_rng(0)))
        gts.extend(ground_truth_from_actors(vid, scene.gt))
    return frame_map(preds, gts, 0.5, range(model.cfg.c_cls))


def base_config(bench: Benchmark, **overrides) -> ModelConfig:
    return ModelConfig(c_feat=bench.c_feat, k=bench.k, c_cls=NUM_CLASSES,
                       pose_class_indices=POSE_CLASSES, **overrides)


def run_variant(bench: Benchmark, variant: str, seed: int, tc: TrainConfig,
                model_overrides: Optional[dict] = None) -> RunResult:
    overrides = dict(VARIANTS[variant])
    overrides.update(model_overrides or {})
    cfg = base_config(bench, **overrides)
    torch.manual_seed(seed)
    model = IGMN(cfg)
    start = time.perf_counter()
    trainer = Trainer(model, replace(tc, seed=seed), provider=bench.provider)
    history = trainer.fit(bench.train_videos())
    per_class, mean_ap = evaluate(model, bench)
    seconds = time.perf_counter() - start
    log.info("%s seed %d: mAP %.4f (%.1fs)", variant, seed, mean_ap, seconds)
    return RunResult(variant, seed, mean_ap, per_class, seconds, history[-1].cls_fuse)


def run_ablation(seeds: Sequence[int] = (0, 1, 2), variants: Sequence[str] = tuple(VARIANTS),
                 tc: Optional[TrainConfig] = None, bench_kwargs: Optional[dict] = None,
                 model_overrides: Optional[dict] = None) -> list[RunResult]:
    tc = tc or TrainConfig()
    results = []
    for seed in seeds:
        bench = make_benchmark(seed=seed, **(bench_kwargs or {}))
        for v in variants:
            results.append(run_variant(bench, v, seed, tc, model_overrides))
    return results


def summarize(results: Sequence[RunResult]) -> dict:
    table: dict = {}
    for r in results:
        table.setdefault(r.variant, []).append(r.mean_ap)
    return {v: (float(np.mean(m)), float(np.std(m)), len(m)) for v, m in table.items()}


def format_table(results: Sequence[RunResult]) -> str:
    summary = summarize(results)
    seeds = sorted({r.seed for r in results})
    lines = ["| variant | " + " | ".join(f"seed {s}" for s in seeds) + " | mean mAP |",
             "|---|" + "---|" * len(seeds) + "---|"]
    for v, (mean, _, _) in summary.items():
        by_seed = {r.seed: r.mean_ap for r in results if r.variant == v}
        cells = " | ".join(f"{100 * by_seed[s]:.2f}" if s in by_seed else "-" for s in seeds)
        lines.append(f"| {v} | {cells} | {100 * mean:.2f} |")
    return "\n".join(lines)
