"""Latent WGAN-GP: a 1-D convolutional generator and critic over 64x128 latent codes."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
from torch import nn

from mambacad.codec import QuantizedSequence
from mambacad.model import MambaCAD, logits_to_tokens, to_batch
from mambacad.train import DivergedLoss, Prediction, check_tokens

NOISE_DIM = 64
LATENT_CHANNELS = 64
LATENT_LEN = 128


@dataclass
class GanConfig:
    steps: int = 5000  # generator updates
    batch_size: int = 64
    n_critic: int = 5
    lr: float = 1e-4
    betas: tuple[float, float] = (0.5, 0.9)
    gp_weight: float = 10.0
    dropout: float = 0.25
    critic_dropout: float = 0.0
    seed: int = 0
    log_every: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class Generator(nn.Module):
    """Noise (64,) -> 256x8 -> four (upsample x2, conv3, BN, dropout, LeakyReLU) blocks -> 64x128."""

    channels = (256, 128, 128, 64, 64)

    def __init__(self, noise_dim: int = NOISE_DIM, dropout: float = 0.25):
        super().__init__()
        self.noise_dim = noise_dim
        self.project = nn.Linear(noise_dim, self.channels[0] * 8)
        blocks = []
        for c_in, c_out in zip(self.channels[:-1], self.channels[1:]):
            blocks += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv1d(c_in, c_out, 3, padding=1),
                nn.BatchNorm1d(c_out),
                nn.Dropout(dropout),
                nn.LeakyReLU(0.2),
            ]
        self.blocks = nn.Sequential(*blocks)
        # latent codes are unbounded reals; a linear pointwise read-out maps onto them
        self.out = nn.Conv1d(self.channels[-1], LATENT_CHANNELS, 1)

    def forward(self, noise: torch.Tensor) -> torch.Tensor:
        h = self.project(noise).view(noise.shape[0], self.channels[0], 8)
        return self.out(self.blocks(h))


class Critic(nn.Module):
    """Four stride-2 conv blocks 64->64->128->128->256 (no normalization), then a scalar."""

    channels = (LATENT_CHANNELS, 64, 128, 128, 256)

    def __init__(self, dropout: float = 0.0):
        super().__init__()
        layers = []
        for c_in, c_out in zip(self.channels[:-1], self.channels[1:]):
            layers += [nn.Conv1d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            if dropout > 0:
                layers.append(nn.Dropout(dropout))
        self.features = nn.Sequential(*layers)
        self.score = nn.Linear(self.channels[-1] * (LATENT_LEN // 16), 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.score(self.features(z).flatten(1)).squeeze(-1)


def gradient_penalty(critic: nn.Module, real: torch.Tensor, fake: torch.Tensor, generator: torch.Generator | None = None, weight: float = 10.0) -> torch.Tensor:
    """``weight * mean((||grad D(x_hat)||_2 - 1)^2)`` on per-sample random interpolates."""
    if real.shape != fake.shape:
        raise ValueError("real and fake batches must have the same shape")
    eps = torch.rand((real.shape[0],) + (1,) * (real.dim() - 1), generator=generator, dtype=real.dtype)
    x_hat = (eps * real + (1.0 - eps) * fake).detach().requires_grad_(True)
    score = critic(x_hat)
    (grad,) = torch.autograd.grad(score.sum(), x_hat, create_graph=True, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x_hat)
    norm = torch.linalg.vector_norm(grad.flatten(1), dim=1)
    return weight * ((norm - 1.0) ** 2).mean()


@dataclass
class GanHistory:
    wasserstein: list[float] = field(default_factory=list)
    critic_loss: list[float] = field(default_factory=list)
    generator_loss: list[float] = field(default_factory=list)


def sample_noise(count: int, generator: torch.Generator, noise_dim: int = NOISE_DIM) -> torch.Tensor:
    return torch.randn(count, noise_dim, generator=generator)


def train_gan(codes: torch.Tensor, cfg: GanConfig) -> tuple[Generator, Critic, GanHistory]:
    """Alternate ``n_critic`` critic updates with one generator update."""
    if codes.dim() != 3 or codes.shape[1:] != (LATENT_CHANNELS, LATENT_LEN):
        raise ValueError(f"codes must be (n, {LATENT_CHANNELS}, {LATENT_LEN}), got {tuple(codes.shape)}")
    codes = codes.detach().float()
    torch.manual_seed(cfg.seed)
    gen, critic = Generator(dropout=cfg.dropout), Critic(cfg.critic_dropout)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr, betas=cfg.betas)
    opt_d = torch.optim.Adam(critic.parameters(), lr=cfg.lr, betas=cfg.betas)
    rng = torch.Generator().manual_seed(cfg.seed)
    hist = GanHistory()
    n = codes.shape[0]
    for step in range(cfg.steps):
        gen.train()
        critic.train()
        for _ in range(cfg.n_critic):
            real = codes[torch.randint(n, (cfg.batch_size,), generator=rng)]
            with torch.no_grad():
                fake = gen(sample_noise(cfg.batch_size, rng))
            gap = critic(real).mean() - critic(fake).mean()
            loss_d = -gap + gradient_penalty(critic, real, fake, rng, cfg.gp_weight)
            opt_d.zero_grad(set_to_none=True)
            loss_d.backward()
            opt_d.step()
        loss_g = -critic(gen(sample_noise(cfg.batch_size, rng))).mean()
        opt_g.zero_grad(set_to_none=True)
        loss_g.backward()
        opt_g.step()
        w, ld, lg = gap.item(), loss_d.item(), loss_g.item()
        if not (math.isfinite(w) and math.isfinite(ld) and math.isfinite(lg)):
            raise DivergedLoss(f"non-finite GAN loss at step {step}: critic={ld} generator={lg}")
        if step % cfg.log_every == 0:
            hist.wasserstein.append(w)
            hist.critic_loss.append(ld)
            hist.generator_loss.append(lg)
    gen.eval()
    critic.eval()
    return gen, critic, hist


@torch.no_grad()
def generate_latent(gen: Generator, noise: torch.Tensor) -> torch.Tensor:
    was = gen.training
    gen.eval()
    out = gen(noise)
    gen.train(was)
    return out


@torch.no_grad()
def encode_corpus(model: MambaCAD, seqs: Sequence[QuantizedSequence], batch_size: int = 32) -> torch.Tensor:
    """Latent codes from the frozen encoder."""
    model.eval()
    out = []
    for i in range(0, len(seqs), batch_size):
        ids, bins = to_batch(seqs[i : i + batch_size])
        out.append(model.encode(ids, bins))
    return torch.cat(out)


@torch.no_grad()
def sample_tokens(gen: Generator, model: MambaCAD, count: int, seed: int, batch_size: int = 64) -> list[QuantizedSequence]:
    rng = torch.Generator().manual_seed(seed)
    noise = sample_noise(count, rng, gen.noise_dim)
    model.eval()
    out = []
    for i in range(0, count, batch_size):
        cmd, par = model.decode(generate_latent(gen, noise[i : i + batch_size]))
        out.extend(logits_to_tokens(cmd, par))
    return out


def sample_sequences(gen: Generator, model: MambaCAD, count: int, seed: int = 0) -> list[Prediction]:
    """``count`` decoded samples with validity flags; invalid ones are kept and flagged."""
    return [check_tokens(q) for q in sample_tokens(gen, model, count, seed)]
