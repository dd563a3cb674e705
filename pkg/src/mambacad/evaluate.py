"""Task-level evaluation: geometry for predictions and the per-task metric report."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from mambacad import codec, geometry
from mambacad.codec import QuantizedSequence
from mambacad.metrics import (
    MetricReport,
    _parallel_map,
    corpus_accuracy,
    generation_metrics,
    median_chamfer,
    uniqueness_novelty,
)
from mambacad.train import Prediction, check_tokens

TASKS = ("recon", "complete", "gen")


def point_cloud(pred: Prediction, n_points: int = 2000, seed: int = 0) -> np.ndarray | None:
    if not pred.valid:
        return None
    try:
        return geometry.sample_surface(geometry.build_scene(pred.sequence), n_points, seed)
    except geometry.GeometryError:
        return None


def try_export(pred: Prediction, res: int = 32, path: str | Path | None = None) -> bool:
    """Mesh-export success; writes an OBJ when ``path`` is given."""
    if not pred.valid:
        return False
    try:
        scene = geometry.build_scene(pred.sequence)
        if path is not None:
            return geometry.export_mesh(scene, path, res) > 0
        return len(geometry.extract_mesh(scene, res)[1]) > 0
    except geometry.GeometryError:
        return False


def run_report(
    task: str,
    outputs: Sequence[Prediction],
    truth: Sequence[QuantizedSequence] | None = None,
    train: Sequence[QuantizedSequence] | None = None,
    n_points: int = 2000,
    export_res: int = 32,
    workers: int | None = None,
) -> MetricReport:
    """Assemble the metrics that apply to ``task``.

    recon / complete: ``truth`` are the unmasked targets, aligned with ``outputs``.
    gen: ``truth`` is the reference set for COV/MMD/JSD and ``train`` the set
    used for novelty.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    rep = MetricReport(task=task, count=len(outputs))
    if not outputs:
        return rep
    valid = [p for p in outputs if p.valid]
    rep.ir = 1.0 - len(valid) / len(outputs)
    rep.al = float(np.mean([p.sequence.raw_length for p in valid])) if valid else None
    rep.export_ratio = float(np.mean(_parallel_map(lambda p: try_export(p, export_res), outputs, workers)))
    clouds = _parallel_map(lambda p: point_cloud(p, n_points), outputs, workers)

    if task in ("recon", "complete"):
        if truth is None or len(truth) != len(outputs):
            raise ValueError("reconstruction reports need one ground-truth sequence per output")
        rep.a_c, rep.a_p = corpus_accuracy(truth, [p.tokens for p in outputs])
        gt_preds = [check_tokens(q) for q in truth]
        gt_clouds = _parallel_map(lambda p: point_cloud(p, n_points), gt_preds, workers)
        pairs = [(a, b) for a, b in zip(clouds, gt_clouds) if a is not None and b is not None]
        rep.mcd = median_chamfer(pairs)
        long_idx = [i for i, q in enumerate(truth) if q.raw_length >= 60]
        if long_idx:
            rep.l60 = sum(outputs[i].valid for i in long_idx) / len(long_idx)
    else:
        gen_clouds = [c for c in clouds if c is not None]
        if truth:
            ref_preds = [check_tokens(q) for q in truth]
            ref_clouds = [c for c in _parallel_map(lambda p: point_cloud(p, n_points), ref_preds, workers) if c is not None]
            if gen_clouds and ref_clouds:
                rep.cov, rep.mmd, rep.jsd = generation_metrics(gen_clouds, ref_clouds)
        if valid:
            rep.unique, rep.novel = uniqueness_novelty([p.tokens for p in valid], train or [])
    return rep


def ground_truth_tokens(records) -> list[QuantizedSequence]:
    return [codec.quantize(codec.normalize(codec.parse_corpus_record(r)[1])) for r in records]
