"""Synthetic benchmark, file ingestion, frame-mAP evaluation and ablation runs."""
