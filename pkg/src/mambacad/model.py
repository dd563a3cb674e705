"""The sequence autoencoder: fusion embedding, SSM encoder, compress/scale blocks, heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from mambacad.codec import N_CLASSES, N_COMMANDS, N_SLOTS, QuantizedSequence
from mambacad.ssm import AttentionBlock, MambaBlock, ShapeMismatch


class IndexOutOfRange(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 256
    n_blocks: int = 4
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    seq_len: int = 128
    latent_channels: int = 64
    compress_hidden: int = 128
    block_type: str = "mamba"  # mamba | attention
    compress_type: str = "conv"  # conv | mlp
    bottleneck: bool = False
    bottleneck_dim: int = 256
    n_heads: int = 4
    scan: str = "parallel"

    def __post_init__(self):
        if self.block_type not in ("mamba", "attention"):
            raise ValueError(f"unknown block_type {self.block_type!r}")
        if self.compress_type not in ("conv", "mlp"):
            raise ValueError(f"unknown compress_type {self.compress_type!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_table(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    table = torch.zeros(length, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return table.float()


class FusionEmbedding(nn.Module):
    """``e_c(c) + W_a flatten(W_b onehot(p)) + pos`` per position."""

    def __init__(self, d_model: int, seq_len: int):
        super().__init__()
        self.command = nn.Embedding(N_COMMANDS, d_model)
        self.param_b = nn.Embedding(N_CLASSES, d_model)
        self.param_a = nn.Linear(N_SLOTS * d_model, d_model, bias=False)
        self.register_buffer("pos", sinusoidal_table(seq_len, d_model), persistent=False)

    def forward(self, ids: torch.Tensor, bins: torch.Tensor) -> torch.Tensor:
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= N_COMMANDS):
            raise IndexOutOfRange("command id outside [0, 6)")
        if bins.numel() and (int(bins.min()) < 0 or int(bins.max()) >= N_CLASSES):
            raise IndexOutOfRange("parameter bin outside [0, 257)")
        L = ids.shape[1]
        if L > self.pos.shape[0]:
            raise ShapeMismatch(f"sequence length {L} exceeds positional table {self.pos.shape[0]}")
        e_p = self.param_a(self.param_b(bins).flatten(-2))
        return self.command(ids) + e_p + self.pos[:L].to(e_p.dtype)


class _Pointwise(nn.Module):
    """Per-position linear layer acting on (batch, channels, L)."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.linear = nn.Linear(c_in, c_out)

    def forward(self, x):
        return self.linear(x.transpose(1, 2)).transpose(1, 2)


def _compress(cfg: ModelConfig) -> nn.Sequential:
    if cfg.compress_type == "conv":
        return nn.Sequential(
            nn.Conv1d(cfg.d_model, cfg.compress_hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv1d(cfg.compress_hidden, cfg.latent_channels, 3, padding=1),
        )
    return nn.Sequential(
        _Pointwise(cfg.d_model, cfg.compress_hidden), nn.SiLU(), _Pointwise(cfg.compress_hidden, cfg.latent_channels)
    )


def _scale(cfg: ModelConfig) -> nn.Sequential:
    if cfg.compress_type == "conv":
        first = nn.ConvTranspose1d(cfg.latent_channels, cfg.compress_hidden, 3, padding=1)
        second = nn.ConvTranspose1d(cfg.compress_hidden, cfg.d_model, 3, padding=1)
    else:
        first = _Pointwise(cfg.latent_channels, cfg.compress_hidden)
        second = _Pointwise(cfg.compress_hidden, cfg.d_model)
    return nn.Sequential(
        first, nn.BatchNorm1d(cfg.compress_hidden), nn.SiLU(), second, nn.BatchNorm1d(cfg.d_model), nn.SiLU()
    )


class MambaCAD(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.embedding = FusionEmbedding(cfg.d_model, cfg.seq_len)
        if cfg.block_type == "mamba":
            blocks = [MambaBlock(cfg.d_model, cfg.d_state, cfg.d_conv, cfg.expand, cfg.scan) for _ in range(cfg.n_blocks)]
        else:
            blocks = [AttentionBlock(cfg.d_model, cfg.n_heads) for _ in range(cfg.n_blocks)]
        self.blocks = nn.ModuleList(blocks)
        self.norm = nn.RMSNorm(cfg.d_model)
        self.compress = _compress(cfg)
        if cfg.bottleneck:
            flat = cfg.latent_channels * cfg.seq_len
            self.bottleneck = nn.Sequential(nn.Linear(flat, cfg.bottleneck_dim), nn.Linear(cfg.bottleneck_dim, flat))
        else:
            self.bottleneck = None
        self.scale = _scale(cfg)
        self.command_head = nn.Linear(cfg.d_model, N_COMMANDS)
        self.param_head = nn.Linear(cfg.d_model, N_SLOTS * N_CLASSES)

    @property
    def latent_shape(self) -> tuple[int, int]:
        return self.cfg.latent_channels, self.cfg.seq_len

    def embed(self, ids: torch.Tensor, bins: torch.Tensor) -> torch.Tensor:
        return self.embedding(ids, bins)

    def encode_embedded(self, e: torch.Tensor) -> torch.Tensor:
        if e.dim() != 3 or e.shape[1:] != (self.cfg.seq_len, self.cfg.d_model):
            raise ShapeMismatch(f"expected (batch, {self.cfg.seq_len}, {self.cfg.d_model}), got {tuple(e.shape)}")
        h = e
        for block in self.blocks:
            h = block(h)
        return self.compress(self.norm(h).transpose(1, 2))

    def encode(self, ids: torch.Tensor, bins: torch.Tensor) -> torch.Tensor:
        """Latent code of shape (batch, latent_channels, L)."""
        return self.encode_embedded(self.embed(ids, bins))

    def decode(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Command logits (batch, L, 6) and parameter logits (batch, L, 16, 257)."""
        if z.dim() != 3 or z.shape[1:] != self.latent_shape:
            raise ShapeMismatch(f"expected latent (batch, {self.latent_shape[0]}, {self.latent_shape[1]}), got {tuple(z.shape)}")
        if self.bottleneck is not None:
            z = self.bottleneck(z.flatten(1)).view_as(z)
        h = self.scale(z).transpose(1, 2)
        cmd = self.command_head(h)
        par = self.param_head(h).view(h.shape[0], h.shape[1], N_SLOTS, N_CLASSES)
        return cmd, par

    def forward(self, ids: torch.Tensor, bins: torch.Tensor):
        z = self.encode(ids, bins)
        cmd, par = self.decode(z)
        return cmd, par, z


def reconstruction_loss(cmd_logits, param_logits, ids, bins) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Mean command cross-entropy + mean parameter cross-entropy (1:1); returns (total, cmd, param)."""
    lc = F.cross_entropy(cmd_logits.reshape(-1, cmd_logits.shape[-1]), ids.reshape(-1))
    lp = F.cross_entropy(param_logits.reshape(-1, param_logits.shape[-1]), bins.reshape(-1))
    return lc + lp, lc, lp


def to_batch(seqs: Sequence[QuantizedSequence]) -> tuple[torch.Tensor, torch.Tensor]:
    ids = torch.from_numpy(np.stack([q.command_ids for q in seqs]).astype(np.int64))
    bins = torch.from_numpy(np.stack([q.param_bins for q in seqs]).astype(np.int64))
    return ids, bins


def logits_to_tokens(cmd: torch.Tensor, par: torch.Tensor) -> list[QuantizedSequence]:
    ids = cmd.argmax(-1).cpu().numpy()
    bins = par.argmax(-1).cpu().numpy()
    return [QuantizedSequence.from_arrays(i, b) for i, b in zip(ids, bins)]


def build_model(cfg: ModelConfig, seed: int = 0) -> MambaCAD:
    torch.manual_seed(seed)
    return MambaCAD(cfg)
