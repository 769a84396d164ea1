"""Command line entry point: ``igmn <command> [options]``.

A dataset directory written by ``generate`` holds ``dataset.json`` (scripts,
split and feature settings), the labelled ground-truth actors as
``gt_detections.jsonl`` / ``gt_tracks.jsonl`` / ``gt_features.bin`` and the
simulated detector output ``detections.jsonl``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from .bench.ablation import VARIANTS, format_table, run_ablation, summarize
from .bench.evaluation import frame_map, ground_truth_from_actors
from .bench.io import export_actors, ingest, read_detections, write_detections, write_predictions
from .bench.synthetic import (CLASS_NAMES, NUM_CLASSES, POSE_CLASSES, SceneFeatureProvider,
                              SceneScript, make_benchmark)
from .data_model import ModelConfig
from .identity_graph import build_graph, graph_pyramid
from .inference import predict
from .model import IGMN, KeyframeSample
from .training import TrainConfig, Trainer, load_checkpoint, save_checkpoint, warm_up

log = logging.getLogger("igmn")

DATASET_FILE = "dataset.json"


# -- configuration ---------------------------------------------------------------------

def load_config(path: Optional[str], seed: Optional[int] = None) -> tuple[dict, TrainConfig]:
    """Read ``{"model": {...}, "train": {...}}`` from JSON or YAML; ``seed`` overrides train.seed."""
    raw: dict = {}
    if path:
        text = Path(path).read_text()
        raw = yaml.safe_load(text) if Path(path).suffix in (".yaml", ".yml") else json.loads(text)
        unknown = set(raw) - {"model", "train"}
        if unknown:
            raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    tc = TrainConfig.from_dict(raw.get("train") or {})
    if seed is not None:
        tc.seed = seed
    return dict(raw.get("model") or {}), tc


def model_config(overrides: dict, c_feat: int, k: int) -> ModelConfig:
    base = {"c_feat": c_feat, "k": k, "c_cls": NUM_CLASSES, "pose_class_indices": POSE_CLASSES}
    return ModelConfig.from_dict({**base, **overrides})


# -- dataset directory ------------------------------------------------------------------

class Dataset:
    def __init__(self, directory):
        self.dir = Path(directory)
        meta = json.loads((self.dir / DATASET_FILE).read_text())
        self.c_feat, self.k = meta["c_feat"], meta["k"]
        self.train_ids, self.test_ids = meta["train_ids"], meta["test_ids"]
        scripts = {s["video_id"]: SceneScript.from_dict(s) for s in meta["scripts"]}
        self.provider = SceneFeatureProvider(scripts, self.c_feat, self.k, meta["strength"])
        self.gt, report = ingest(*(self.dir / f"gt_{n}" for n in ("detections.jsonl", "tracks.jsonl",
                                                                    "features.bin")),
                                 c_feat=self.c_feat, k=self.k, num_classes=NUM_CLASSES,
                                 pose_class_indices=POSE_CLASSES)
        if report.num_rejected:
            log.warning("ground truth: %d records rejected", report.num_rejected)

    def videos(self, ids: Sequence[str]) -> dict:
        return {v: self.gt.get(v, {}) for v in ids}

    def detections(self) -> dict:
        return read_detections(self.dir / "detections.jsonl")

    def keyframe(self, video_id: str, clip: int, cfg: ModelConfig) -> KeyframeSample:
        """Ground-truth actors of one clip, windowed by a bank warmed on the whole video."""
        clips = self.gt.get(video_id, {})
        if not clips.get(clip):
            raise ValueError(f"no actors at {video_id}:{clip}")
        banks: dict = {}
        warm_up(banks, {video_id: clips}, cfg)
        sample = KeyframeSample(video_id, clip, clips[clip])
        if cfg.use_memory:
            sample.window = banks[video_id].window(clip, cfg.half_window)
        return sample


def cmd_generate(args) -> int:
    bench = make_benchmark(seed=args.seed, num_videos=args.num_videos, num_clips=args.num_clips,
                           num_train=args.num_train, c_feat=args.c_feat, k=args.k,
                           noise=args.noise, strength=args.strength)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": args.seed, "c_feat": args.c_feat, "k": args.k, "strength": args.strength,
            "train_ids": bench.train_ids, "test_ids": bench.test_ids,
            "scripts": [bench.scripts[v].to_dict() for v in sorted(bench.scripts)]}
    (out / DATASET_FILE).write_text(json.dumps(meta))
    export_actors(out, "gt", {v: s.gt for v, s in bench.scenes.items()})
    write_detections(out / "detections.jsonl", (d for v in sorted(bench.scenes)
                                                for t in sorted(bench.scenes[v].detections)
                                                for d in bench.scenes[v].detections[t]))
    print(f"wrote {len(bench.scenes)} videos to {out}")
    return 0


def cmd_train(args) -> int:
    overrides, tc = load_config(args.config, args.seed)
    if args.epochs is not None:
        tc.epochs = args.epochs
    data = Dataset(args.data)
    cfg = model_config(overrides, data.c_feat, data.k)
    torch.manual_seed(tc.seed)
    model = IGMN(cfg)
    trainer = Trainer(model, tc, provider=data.provider, metrics_path=args.metrics)
    history = trainer.fit(data.videos(data.train_ids))
    save_checkpoint(args.out, model, trainer.optimizer, trainer.step, tc.seed, tc)
    print(f"trained {trainer.step} steps, final cls_fuse {history[-1].cls_fuse:.4f}; saved {args.out}")
    return 0


def ap_table(per_class: dict, mean: float) -> str:
    lines = ["| class | AP |", "|---|---|"]
    lines += [f"| {c} {CLASS_NAMES[c] if c < len(CLASS_NAMES) else ''} | {100 * ap:.2f} |"
              for c, ap in sorted(per_class.items())]
    lines.append(f"| mean | {100 * mean:.2f} |")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    data = Dataset(args.data)
    model, _ = load_checkpoint(args.checkpoint)
    dets = data.detections()
    preds, gts = [], []
    for vid in data.test_ids:
        preds.extend(predict(model, vid, dets.get(vid, {}), provider=data.provider,
                             rng=np.random.default_rng(args.seed)))
        gts.extend(ground_truth_from_actors(vid, data.gt.get(vid, {})))
    if args.predictions:
        write_predictions(args.predictions, preds)
    per_class, mean = frame_map(preds, gts, 0.5, range(model.cfg.c_cls))
    print(ap_table(per_class, mean))
    return 0


def _model_for(args, data: Dataset) -> IGMN:
    if args.checkpoint:
        return load_checkpoint(args.checkpoint)[0]
    overrides, tc = load_config(args.config, args.seed)
    torch.manual_seed(tc.seed)
    return IGMN(model_config(overrides, data.c_feat, data.k))


def _emit(payload, out: Optional[str]) -> None:
    text = json.dumps(payload, indent=1)
    if out:
        Path(out).write_text(text)
    else:
        print(text)


def cmd_inspect_graph(args) -> int:
    data = Dataset(args.data)
    overrides, _ = load_config(args.config, args.seed)
    cfg = model_config(overrides, data.c_feat, data.k)
    sample = data.keyframe(args.video, args.clip, cfg)
    g0 = build_graph(sample.actors, sample.window, center=args.clip)
    levels = graph_pyramid(g0, cfg.num_layers, cfg.downsample)
    _emit([{"layer": i, **g.to_dict()} for i, g in enumerate(levels)], args.out)
    return 0


def cmd_dump_attention(args) -> int:
    data = Dataset(args.data)
    model = _model_for(args, data)
    if not model.cfg.use_dam:
        raise SystemExit("model has no dual attention module")
    sample = data.keyframe(args.video, args.clip, model.cfg)
    model.eval()
    with torch.no_grad():
        dam = model([sample]).dam
    actors = []
    for i, a in enumerate(sample.actors):
        actors.append({"track": a.track_id, "box": list(a.box.as_tuple()),
                       "omega_sem": dam.omega_sem[i].tolist(), "omega_idt": dam.omega_idt[i].tolist(),
                       "omega_idt_combined": dam.omega_idt_combined[i].tolist()})
    _emit({"video": args.video, "clip": args.clip, "actors": actors}, args.out)
    return 0


def cmd_ablate(args) -> int:
    overrides, tc = load_config(args.config)
    if args.epochs is not None:
        tc.epochs = args.epochs
    bench_kwargs = {"num_videos": args.num_videos, "num_clips": args.num_clips,
                    "num_train": args.num_train}
    results = run_ablation(args.seeds, args.variants, tc, bench_kwargs, overrides)
    table = format_table(results)
    if args.out:
        Path(args.out).write_text(table + "\n")
    print(table)
    if args.json:
        Path(args.json).write_text(json.dumps(
            {"runs": [{"variant": r.variant, "seed": r.seed, "mean_ap": r.mean_ap,
                       "per_class": r.per_class, "seconds": r.seconds} for r in results],
             "summary": summarize(results)}, indent=1))
    return 0


# -- parser ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="igmn", description="Train, evaluate and inspect identity-aware graph memory networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help_text, seeded=True):
        p = sub.add_parser(name, help=help_text)
        if seeded:
            p.add_argument("--seed", type=int, default=0, help="seed for every random draw")
        p.set_defaults(fn=fn)
        return p

    p = command("generate", cmd_generate, "write a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--num-videos", type=int, default=30)
    p.add_argument("--num-clips", type=int, default=40)
    p.add_argument("--num-train", type=int, default=20)
    p.add_argument("--c-feat", type=int, default=32)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--strength", type=float, default=1.0)

    p = command("train", cmd_train, "train on a dataset's training videos")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="per-step metrics log (JSON lines)")

    p = command("eval", cmd_eval, "per-class frame AP on a dataset's test videos")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--predictions", help="also write the prediction records here")

    for name, fn, help_text in (("inspect-graph", cmd_inspect_graph, "dump a keyframe's graph per layer"),
                                ("dump-attention", cmd_dump_attention, "dump attention maps per actor")):
        p = command(name, fn, help_text)
        p.add_argument("--data", required=True)
        p.add_argument("--video", required=True)
        p.add_argument("--clip", type=int, required=True)
        p.add_argument("--config")
        p.add_argument("--out")
        if name == "dump-attention":
            p.add_argument("--checkpoint")

    p = command("ablate", cmd_ablate, "train and evaluate every ablation variant", seeded=False)
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--num-videos", type=int, default=30)
    p.add_argument("--num-clips", type=int, default=40)
    p.add_argument("--num-train", type=int, default=20)
    p.add_argument("--out", help="markdown table path")
    p.add_argument("--json", help="per-run results path")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"igmn {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
