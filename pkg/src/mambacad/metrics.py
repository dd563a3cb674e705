"""Evaluation: token accuracies, Chamfer/MCD, COV/MMD/JSD, uniqueness/novelty, reports."""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from mambacad.codec import SLOT_MASK, QuantizedSequence

ETA = 3
JSD_RES = 28


class UndefinedMetric(ValueError):
    pass


# --- token accuracies ---------------------------------------------------------

def _positions(gt: QuantizedSequence, mask_padding: bool) -> slice:
    return slice(0, gt.raw_length) if mask_padding else slice(None)


def command_accuracy(gt: QuantizedSequence, pred: QuantizedSequence, mask_padding: bool = False) -> float:
    """Fraction of positions whose command id matches (all 128 by default)."""
    sl = _positions(gt, mask_padding)
    hit = gt.command_ids[sl] == pred.command_ids[sl]
    if hit.size == 0:
        raise UndefinedMetric("no positions to compare")
    return float(hit.mean())


def parameter_counts(gt, pred, eta: int = ETA, mask_padding: bool = False) -> tuple[int, int]:
    """(slots within ``eta`` bins, used slots) over correctly predicted commands."""
    sl = _positions(gt, mask_padding)
    ids = gt.command_ids[sl]
    ok = ids == pred.command_ids[sl]
    used = SLOT_MASK[ids] & ok[:, None]
    close = np.abs(gt.param_bins[sl] - pred.param_bins[sl]) < eta
    return int((close & used).sum()), int(used.sum())


def parameter_accuracy(gt, pred, eta: int = ETA, mask_padding: bool = False) -> float:
    good, total = parameter_counts(gt, pred, eta, mask_padding)
    if total == 0:
        raise UndefinedMetric("no used parameter slots among correctly predicted commands")
    return good / total


def corpus_accuracy(gts: Sequence, preds: Sequence, eta: int = ETA, mask_padding: bool = False):
    """Pooled (A_c, A_p) over a set; A_p is None when no slot qualifies."""
    hits = positions = good = total = 0
    for g, p in zip(gts, preds, strict=True):
        sl = _positions(g, mask_padding)
        hits += int((g.command_ids[sl] == p.command_ids[sl]).sum())
        positions += len(g.command_ids[sl])
        a, b = parameter_counts(g, p, eta, mask_padding)
        good += a
        total += b
    a_c = hits / positions if positions else None
    return a_c, (good / total if total else None)


# --- point clouds -------------------------------------------------------------

def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def _nn_brute(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    out = np.empty(len(p))
    for i in range(0, len(p), 1024):
        out[i : i + 1024] = _sqdist(p[i : i + 1024, None, :], q[None, :, :]).min(1)
    return out


def chamfer_brute(p: np.ndarray, q: np.ndarray) -> float:
    """O(|p||q|) reference: mean_p min_q |p-q|^2 + mean_q min_p |p-q|^2."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("point clouds must be non-empty")
    return float(_nn_brute(p, q).mean() + _nn_brute(q, p).mean())


def _nn_tree(p: np.ndarray, q: np.ndarray, tree: cKDTree) -> np.ndarray:
    # candidates from the tree, distances recomputed with the reference formula
    k = min(4, len(q))
    _, idx = tree.query(p, k=k)
    idx = idx.reshape(len(p), k)
    return _sqdist(p[:, None, :], q[idx]).min(1)


def chamfer(p: np.ndarray, q: np.ndarray) -> float:
    """Same value as :func:`chamfer_brute`, via k-d tree neighbour candidates."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("point clouds must be non-empty")
    return float(_nn_tree(p, q, cKDTree(q)).mean() + _nn_tree(q, p, cKDTree(p)).mean())


def median_chamfer(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> float | None:
    cds = [chamfer(p, q) for p, q in pairs]
    return float(np.median(cds)) if cds else None


def chamfer_matrix(gen: Sequence[np.ndarray], ref: Sequence[np.ndarray], workers: int | None = None) -> np.ndarray:
    gen_trees = [cKDTree(g) for g in gen]
    ref_trees = [cKDTree(r) for r in ref]

    def row(i):
        g = np.asarray(gen[i], float)
        return [
            float(_nn_tree(g, np.asarray(r, float), rt).mean() + _nn_tree(np.asarray(r, float), g, gen_trees[i]).mean())
            for r, rt in zip(ref, ref_trees)
        ]

    with ThreadPoolExecutor(workers or pool_size()) as ex:
        return np.array(list(ex.map(row, range(len(gen)))), dtype=float).reshape(len(gen), len(ref))


def occupancy(clouds: Iterable[np.ndarray], res: int = JSD_RES) -> np.ndarray:
    """Voxel occupancy over [-1, 1]^3 summed over clouds (each cloud counts a voxel once)."""
    grid = np.zeros(res**3)
    for pts in clouds:
        idx = np.clip(np.floor((np.asarray(pts) + 1.0) / 2.0 * res).astype(np.int64), 0, res - 1)
        flat = np.unique((idx[:, 0] * res + idx[:, 1]) * res + idx[:, 2])
        grid[flat] += 1.0
    return grid


def jensen_shannon(p: np.ndarray, q: np.ndarray) -> float:
    """JSD of two histograms after normalization, natural log."""
    p = np.asarray(p, float) / np.sum(p)
    q = np.asarray(q, float) / np.sum(q)
    m = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * kl(p) + 0.5 * kl(q)


def generation_metrics(gen: Sequence[np.ndarray], ref: Sequence[np.ndarray], res: int = JSD_RES):
    """(COV, MMD, JSD) of generated point clouds against reference clouds."""
    if not gen or not ref:
        raise ValueError("generated and reference sets must be non-empty")
    cd = chamfer_matrix(gen, ref)
    cov = len(set(np.argmin(cd, axis=1).tolist())) / len(ref)
    mmd = float(cd.min(axis=0).mean())
    jsd = jensen_shannon(occupancy(gen, res), occupancy(ref, res))
    return cov, mmd, jsd


def uniqueness_novelty(gen: Sequence[QuantizedSequence], train: Iterable[QuantizedSequence]) -> tuple[float, float]:
    if not gen:
        raise ValueError("generated set is empty")
    keys = [q.key() for q in gen]
    counts: dict[bytes, int] = {}
    for k in keys:
        counts[k] = counts.get(k, 0) + 1
    seen = {q.key() for q in train}
    unique = sum(counts[k] == 1 for k in keys) / len(keys)
    novel = sum(k not in seen for k in keys) / len(keys)
    return unique, novel


# --- reports ------------------------------------------------------------------

def pool_size() -> int:
    env = os.environ.get("MCAD_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(8, os.cpu_count() or 1))


@dataclass
class MetricReport:
    task: str
    count: int = 0
    a_c: float | None = None
    a_p: float | None = None
    mcd: float | None = None
    ir: float | None = None
    al: float | None = None
    l60: float | None = None
    export_ratio: float | None = None
    cov: float | None = None
    mmd: float | None = None
    jsd: float | None = None
    unique: float | None = None
    novel: float | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        data = json.loads(text)
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in names})

    def display(self) -> dict[str, str]:
        """Values in table units: MCD x1e3; MMD, JSD, Unique, Novel x1e2; ratios in %."""
        scale = {"mcd": 1e3, "mmd": 1e2, "jsd": 1e2, "unique": 1e2, "novel": 1e2,
                 "a_c": 1e2, "a_p": 1e2, "ir": 1e2, "l60": 1e2, "export_ratio": 1e2, "cov": 1e2}
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("task", "count"):
                out[f.name] = str(v)
            elif v is None:
                out[f.name] = "-"
            else:
                out[f.name] = f"{v * scale.get(f.name, 1.0):.2f}"
        return out


def _parallel_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    with ThreadPoolExecutor(workers or pool_size()) as ex:
        return list(ex.map(fn, items))
