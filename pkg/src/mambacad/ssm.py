"""Selective state-space layers: ZOH discretization, linear scans, Mamba block."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

SERIES_THRESHOLD = 1e-4


class NonPositiveDelta(ValueError):
    pass


class ShapeMismatch(ValueError):
    pass


class _Zoh(torch.autograd.Function):
    """``x -> (exp(x), (exp(x) - 1) / x)`` with the removable singularity patched."""

    @staticmethod
    def forward(ctx, x):
        small = x.abs() < SERIES_THRESHOLD
        safe = torch.where(small, torch.ones_like(x), x)
        a = torch.exp(x)
        r = torch.where(small, 1.0 + x / 2.0 + x * x / 6.0, torch.expm1(safe) / safe)
        ctx.save_for_backward(x, a, r)
        return a, r

    @staticmethod
    def backward(ctx, g_a, g_r):
        x, a, r = ctx.saved_tensors
        small = x.abs() < SERIES_THRESHOLD
        safe = torch.where(small, torch.ones_like(x), x)
        dr = torch.where(small, 0.5 + x / 3.0, (a - r) / safe)
        grad = torch.zeros_like(x)
        if g_a is not None:
            grad = grad + g_a * a
        if g_r is not None:
            grad = grad + g_r * dr
        return grad


def zoh(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return _Zoh.apply(x)


def discretize(A: torch.Tensor, B: torch.Tensor, delta: torch.Tensor, check: bool = True):
    """Zero-order hold: ``A_bar = exp(dA)``, ``B_bar = (dA)^-1 (exp(dA) - 1) dB`` (elementwise).

    Below ``|dA| < 1e-4`` the ratio ``(exp(x) - 1) / x`` is replaced by its
    series ``1 + x/2 + x^2/6``.
    """
    if check and bool((delta <= 0).any()):
        raise NonPositiveDelta("timescale delta must be strictly positive")
    a_bar, ratio = zoh(delta * A)
    return a_bar, ratio * delta * B


def _sequential(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    h = torch.zeros_like(b[:, 0])
    out = []
    for t in range(b.shape[1]):
        h = a[:, t] * h + b[:, t]
        out.append(h)
    return torch.stack(out, dim=1)


def _prefix(a: torch.Tensor, b: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    # work-efficient recursion: combine neighbours, scan the half-length
    # sequence, then fill the even positions from the odd prefixes
    n = a.shape[1]
    if n == 1:
        return a, b
    a_even, a_odd = a[:, 0::2], a[:, 1::2]
    b_even, b_odd = b[:, 0::2], b[:, 1::2]
    a_pre, b_pre = _prefix(a_odd * a_even, a_odd * b_even + b_odd)
    a_fill = torch.cat([a_even[:, :1], a_even[:, 1:] * a_pre[:, :-1]], dim=1)
    b_fill = torch.cat([b_even[:, :1], a_even[:, 1:] * b_pre[:, :-1] + b_even[:, 1:]], dim=1)
    shape = (a.shape[0], n) + a.shape[2:]
    return (
        torch.stack([a_fill, a_pre], dim=2).reshape(shape),
        torch.stack([b_fill, b_pre], dim=2).reshape(shape),
    )


def _parallel(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    L = b.shape[1]
    n = 1 << max(L - 1, 0).bit_length()
    if n != L:
        pad = (0, 0) * (b.dim() - 2) + (0, n - L)
        a = F.pad(a, pad, value=1.0)
        b = F.pad(b, pad, value=0.0)
    return _prefix(a, b)[1][:, :L]


_SCANS = {"sequential": _sequential, "parallel": _parallel}


class _LinearScan(torch.autograd.Function):
    """Forward scan; the adjoint is the same recurrence run backwards in time:
    ``g[t] = dL/dh[t] + a[t+1] g[t+1]``, ``dL/da[t] = g[t] h[t-1]``, ``dL/db[t] = g[t]``."""

    @staticmethod
    def forward(ctx, a, b, method):
        scan = _SCANS[method]
        h = scan(a, b)
        ctx.scan = scan
        ctx.save_for_backward(a, h)
        return h

    @staticmethod
    @torch.autograd.function.once_differentiable
    def backward(ctx, g_h):
        a, h = ctx.saved_tensors
        a_next = torch.cat([a[:, 1:], torch.zeros_like(a[:, :1])], dim=1)
        g = ctx.scan(a_next.flip(1), g_h.flip(1)).flip(1)
        h_prev = torch.cat([torch.zeros_like(h[:, :1]), h[:, :-1]], dim=1)
        return g * h_prev, g, None


def linear_scan_sequential(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``h[t] = a[t] * h[t-1] + b[t]`` along dim 1 with ``h[-1] = 0``."""
    return _LinearScan.apply(a, b, "sequential")


def linear_scan_parallel(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Same recurrence as :func:`linear_scan_sequential` via the associative operator
    ``(a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2)``; O(L) work, O(log L) depth."""
    return _LinearScan.apply(a, b, "parallel")


def _inverse_softplus(y: torch.Tensor) -> torch.Tensor:
    return y + torch.log(-torch.expm1(-y))


class SelectiveSSM(nn.Module):
    """Diagonal SSM whose timescale, input and output maps depend on the input."""

    def __init__(self, d_inner: int, d_state: int = 16, dt_min: float = 1e-3, dt_max: float = 0.1):
        super().__init__()
        self.d_inner, self.d_state = d_inner, d_state
        self.A_log = nn.Parameter(torch.log(torch.arange(1, d_state + 1, dtype=torch.float32)).repeat(d_inner, 1))
        self.dt_proj = nn.Linear(d_inner, d_inner)
        self.B_proj = nn.Linear(d_inner, d_state, bias=False)
        self.C_proj = nn.Linear(d_inner, d_state, bias=False)
        with torch.no_grad():
            dt = torch.exp(torch.rand(d_inner) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min))
            self.dt_proj.bias.copy_(_inverse_softplus(dt))
            self.dt_proj.weight.mul_(0.1)

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)

    def selective(self, x: torch.Tensor):
        """Per-position ``(delta, B, C)`` for ``x`` of shape (batch, L, d_inner)."""
        delta = F.softplus(self.dt_proj(x)).clamp_min(1e-8)
        return delta, self.B_proj(x), self.C_proj(x)

    def discretized(self, x: torch.Tensor):
        delta, B, C = self.selective(x)
        a_bar, b_bar = discretize(self.A, B[:, :, None, :], delta[..., None], check=False)
        return a_bar, b_bar, C

    def forward(self, x: torch.Tensor, method: str = "parallel") -> torch.Tensor:
        if x.shape[-1] != self.d_inner:
            raise ShapeMismatch(f"expected {self.d_inner} channels, got {x.shape[-1]}")
        delta, B, C = self.selective(x)
        A = self.A
        dA = delta[..., None] * A
        # with A strictly negative, B_bar = (dA)^-1 (exp(dA) - 1) dB = expm1(dA) / A * B,
        # which has no removable singularity and needs no series branch
        a_bar = torch.exp(dA)
        u = (torch.expm1(dA) / A) * (x[..., None] * B[:, :, None, :])
        h = _LinearScan.apply(a_bar, u, method)
        return torch.einsum("bldn,bln->bld", h, C)


def scan_sequential(ssm: SelectiveSSM, x: torch.Tensor) -> torch.Tensor:
    return ssm(x, method="sequential")


def scan_parallel(ssm: SelectiveSSM, x: torch.Tensor) -> torch.Tensor:
    return ssm(x, method="parallel")


class MambaBlock(nn.Module):
    """Pre-norm residual block: ``x + out(SSM(SiLU(conv(u))) * SiLU(z))``."""

    def __init__(self, d_model: int, d_state: int = 16, d_conv: int = 4, expand: int = 2, scan: str = "parallel"):
        super().__init__()
        self.d_model = d_model
        self.d_inner = expand * d_model
        self.scan = scan
        self.norm = nn.RMSNorm(d_model)
        self.in_proj = nn.Linear(d_model, 2 * self.d_inner, bias=False)
        self.conv = nn.Conv1d(self.d_inner, self.d_inner, d_conv, groups=self.d_inner, padding=d_conv - 1)
        self.ssm = SelectiveSSM(self.d_inner, d_state)
        self.out_proj = nn.Linear(self.d_inner, d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[-1] != self.d_model:
            raise ShapeMismatch(f"expected (batch, L, {self.d_model}), got {tuple(x.shape)}")
        L = x.shape[1]
        u, z = self.in_proj(self.norm(x)).chunk(2, dim=-1)
        u = self.conv(u.transpose(1, 2))[..., :L].transpose(1, 2)
        y = self.ssm(F.silu(u), method=self.scan)
        return x + self.out_proj(y * F.silu(z))


class AttentionBlock(nn.Module):
    """Bidirectional pre-norm transformer block (ablation A)."""

    def __init__(self, d_model: int, n_heads: int = 4, ff_mult: int = 4):
        super().__init__()
        self.d_model = d_model
        self.norm1 = nn.RMSNorm(d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm2 = nn.RMSNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, ff_mult * d_model), nn.GELU(), nn.Linear(ff_mult * d_model, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 3 or x.shape[-1] != self.d_model:
            raise ShapeMismatch(f"expected (batch, L, {self.d_model}), got {tuple(x.shape)}")
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.ff(self.norm2(x))
