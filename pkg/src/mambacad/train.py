"""Autoencoder pre-training and reconstruction / completion inference."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from mambacad import checkpoint, codec, geometry
from mambacad.codec import CadSequence, QuantizedSequence
from mambacad.metrics import corpus_accuracy
from mambacad.model import MambaCAD, ModelConfig, build_model, logits_to_tokens, reconstruction_loss, to_batch


class DivergedLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 500
    clip_norm: float = 1.0
    batch_size: int = 32
    epochs: int = 10
    max_steps: int | None = None  # overrides epochs when set
    seed: int = 0
    # periodic training-set accuracy; 0 disables
    eval_every: int = 0
    target_ac: float | None = None
    target_ap: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepLog:
    step: int
    loss_cmd: float
    loss_param: float
    lr: float
    grad_norm: float

    @property
    def loss(self) -> float:
        return self.loss_cmd + self.loss_param


@dataclass
class History:
    steps: list[StepLog] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    evals: list[tuple[int, float, float | None]] = field(default_factory=list)
    stopped_early: bool = False

    @property
    def losses(self) -> list[float]:
        return [s.loss for s in self.steps]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss_cmd", "loss_param", "lr", "grad_norm"])
            for s in self.steps:
                w.writerow([s.step, f"{s.loss_cmd:.6f}", f"{s.loss_param:.6f}", f"{s.lr:.6g}", f"{s.grad_norm:.6f}"])


def tokenize(records: Sequence) -> list[QuantizedSequence]:
    """Corpus records -> normalized, quantized training tokens."""
    out = []
    for rec in records:
        _, seq = codec.parse_corpus_record(rec)
        out.append(codec.quantize(codec.normalize(seq)))
    return out


def warmup_lr(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, (step + 1) / cfg.warmup_steps)


@torch.no_grad()
def predict_tokens(model: MambaCAD, seqs: Sequence[QuantizedSequence], batch_size: int = 32) -> list[QuantizedSequence]:
    was_training = model.training
    model.eval()
    out = []
    for i in range(0, len(seqs), batch_size):
        ids, bins = to_batch(seqs[i : i + batch_size])
        cmd, par, _ = model(ids, bins)
        out.extend(logits_to_tokens(cmd, par))
    model.train(was_training)
    return out


def pretrain(
    seqs: Sequence[QuantizedSequence],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
) -> tuple[MambaCAD, History]:
    """Adam + linear warm-up + global-norm clipping on the summed cross-entropies."""
    if not seqs:
        raise ValueError("training corpus is empty")
    model = build_model(model_cfg, cfg.seed)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    gen = torch.Generator().manual_seed(cfg.seed)
    ids_all, bins_all = to_batch(seqs)
    n = len(seqs)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.max_steps if cfg.max_steps is not None else cfg.epochs * per_epoch
    hist = History()
    step, epoch_sum, epoch_count = 0, 0.0, 0
    order = torch.randperm(n, generator=gen)
    while step < total:
        k = step % per_epoch
        if k == 0 and step > 0:
            hist.epoch_loss.append(epoch_sum / epoch_count)
            epoch_sum, epoch_count = 0.0, 0
            order = torch.randperm(n, generator=gen)
        idx = order[k * cfg.batch_size : (k + 1) * cfg.batch_size]
        ids, bins = ids_all[idx], bins_all[idx]
        lr = warmup_lr(step, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        cmd, par, _ = model(ids, bins)
        loss, lc, lp = reconstruction_loss(cmd, par, ids, bins)
        if not torch.isfinite(loss):
            raise DivergedLoss(f"non-finite loss at step {step}: cmd={lc.item()} param={lp.item()} lr={lr:g}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm))
        if not math.isfinite(gnorm):
            raise DivergedLoss(f"non-finite gradient norm at step {step}")
        opt.step()
        hist.steps.append(StepLog(step, lc.item(), lp.item(), lr, gnorm))
        epoch_sum += loss.item()
        epoch_count += 1
        step += 1
        if cfg.eval_every and step % cfg.eval_every == 0:
            a_c, a_p = corpus_accuracy(seqs, predict_tokens(model, seqs))
            hist.evals.append((step, a_c, a_p))
            if (
                cfg.target_ac is not None
                and cfg.target_ap is not None
                and a_c >= cfg.target_ac
                and a_p is not None
                and a_p >= cfg.target_ap
            ):
                hist.stopped_early = True
                break
    if epoch_count:
        hist.epoch_loss.append(epoch_sum / epoch_count)
    if log_path is not None:
        hist.write_csv(log_path)
    model.eval()
    return model, hist


# --- checkpoints ----------------------------------------------------------------

def save_model(path: str | Path, model: MambaCAD, extra: dict | None = None) -> None:
    meta = {"model": model.cfg.to_dict(), **(extra or {})}
    checkpoint.save(path, model.state_dict(), meta)


def load_model(path: str | Path) -> tuple[MambaCAD, dict]:
    state, meta = checkpoint.load(path)
    model = MambaCAD(ModelConfig(**meta["model"]))
    ref = model.state_dict()
    model.load_state_dict({k: v.to(ref[k].dtype) for k, v in state.items()})
    model.eval()
    return model, meta


# --- inference ------------------------------------------------------------------

@dataclass
class Prediction:
    tokens: QuantizedSequence
    sequence: CadSequence | None
    valid: bool
    reason: str | None = None


def check_tokens(q: QuantizedSequence) -> Prediction:
    """Dequantize and execute; failures are recorded on the result, never raised."""
    try:
        seq = codec.dequantize(q)
    except codec.GrammarError as exc:
        return Prediction(q, None, False, f"grammar: {exc}")
    try:
        scene = geometry.build_scene(seq)
        if not geometry.has_interior(scene):
            raise geometry.EmptySolid()
    except geometry.GeometryError as exc:
        return Prediction(q, seq, False, f"geometry: {exc.reason}")
    return Prediction(q, seq, True)


def reconstruct(model: MambaCAD, seqs: Sequence[QuantizedSequence], batch_size: int = 32) -> list[Prediction]:
    return [check_tokens(q) for q in predict_tokens(model, seqs, batch_size)]


def complete(
    model: MambaCAD, seqs: Sequence[QuantizedSequence], ratio: float = 0.4, seed: int = 0, batch_size: int = 32
) -> list[Prediction]:
    """Reconstruct from inputs with ``floor(ratio * raw_length)`` positions zeroed (seed + index per sample)."""
    masked = [codec.mask_sequence(q, ratio, seed + i) for i, q in enumerate(seqs)]
    return reconstruct(model, masked, batch_size)
