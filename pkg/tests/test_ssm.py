import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mambacad import ssm
from helpers import fd_check

torch.set_num_threads(1)
f64 = torch.float64


def test_discretize_scalar_example():
    a, b = ssm.discretize(torch.tensor(-1.0, dtype=f64), torch.tensor(1.0, dtype=f64), torch.tensor(0.1, dtype=f64))
    assert a.item() == pytest.approx(math.exp(-0.1), abs=1e-15)
    assert a.item() == pytest.approx(0.904837, abs=5e-7)
    assert b.item() == pytest.approx(-10 * (math.exp(-0.1) - 1) * 0.1, rel=1e-14)
    assert b.item() == pytest.approx(0.095163, abs=5e-7)


def test_discretize_small_limit():
    for d in (1e-6, 1e-8, 1e-12):
        _, b = ssm.discretize(torch.tensor(-1.0, dtype=f64), torch.tensor(2.0, dtype=f64), torch.tensor(d, dtype=f64))
        assert b.item() == pytest.approx(d * 2.0, rel=1e-5)


def test_discretize_series_branch_continuous():
    x = torch.tensor([-1.0001e-4, -0.9999e-4, 0.9999e-4, 1.0001e-4], dtype=f64)
    _, r = ssm.zoh(x)
    want = torch.expm1(x) / x
    assert torch.allclose(r, want, rtol=1e-12, atol=0)


def test_discretize_rejects_nonpositive_delta():
    with pytest.raises(ssm.NonPositiveDelta):
        ssm.discretize(torch.tensor(-1.0), torch.tensor(1.0), torch.tensor(0.0))
    with pytest.raises(ssm.NonPositiveDelta):
        ssm.discretize(torch.tensor(-1.0), torch.tensor(1.0), torch.tensor([0.1, -0.1]))


@pytest.mark.parametrize("scale", [1.0, 0.05, 1e-3])
def test_discretize_gradients(scale):
    # scale 1: regular branch; 0.05 with delta ~1e-3: |dA| ~ 5e-5, series branch;
    # 1e-3 with delta in the boundary neighbourhood straddles both
    gen = torch.Generator().manual_seed(0)
    A = (-torch.rand(6, generator=gen, dtype=f64) * scale - 1e-3 * scale).requires_grad_()
    B = torch.randn(6, generator=gen, dtype=f64).requires_grad_()
    delta = (torch.rand(6, generator=gen, dtype=f64) * 1e-3 + 5e-4 if scale < 1 else torch.rand(6, generator=gen, dtype=f64) + 0.1).requires_grad_()

    def fn():
        a, b = ssm.discretize(A, B, delta)
        return torch.stack([a, b])

    fd_check(fn, [A, B, delta], eps=1e-4)


def test_zoh_gradient_across_threshold():
    x = torch.tensor([-3e-4, -1.5e-4, -1e-4, -5e-5, 0.0, 5e-5, 1e-4, 2e-4], dtype=f64, requires_grad=True)
    fd_check(lambda: torch.stack(ssm.zoh(x)), [x], eps=1e-4)


def test_hand_recurrence():
    a = torch.full((1, 3, 1), 0.5, dtype=f64)
    b = torch.ones((1, 3, 1), dtype=f64)
    for scan in (ssm.linear_scan_sequential, ssm.linear_scan_parallel):
        h = scan(a, b)
        assert h.flatten().tolist() == [1.0, 1.5, 1.75]


def test_single_step_closed_form():
    torch.manual_seed(0)
    layer = ssm.SelectiveSSM(4, 3).double()
    x = torch.randn(2, 1, 4, dtype=f64)
    with torch.no_grad():
        a_bar, b_bar, C = layer.discretized(x)
        want = torch.einsum("bldn,bln->bld", b_bar * x[..., None], C)
        seq = layer(x, "sequential")
        par = layer(x, "parallel")
    assert torch.allclose(seq, want, rtol=1e-12, atol=1e-15)
    assert torch.equal(seq, par)


def test_zero_input_zero_output():
    layer = ssm.SelectiveSSM(8, 4)
    with torch.no_grad():
        y = layer(torch.zeros(1, 17, 8))
    assert torch.equal(y, torch.zeros_like(y))


def test_selective_parameters_valid():
    layer = ssm.SelectiveSSM(8, 16)
    assert (layer.A < 0).all()
    assert torch.allclose(layer.A[0], -torch.arange(1, 17, dtype=torch.float32))
    delta, _, _ = layer.selective(torch.randn(2, 5, 8) * 10)
    assert (delta > 0).all()
    base = torch.nn.functional.softplus(layer.dt_proj.bias)
    assert base.min() >= 1e-3 - 1e-7 and base.max() <= 0.1 + 1e-7


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 256), st.integers(1, 32), st.integers(1, 16), st.integers(0, 10**6))
def test_scan_equivalence_property(L, D, N, seed):
    torch.manual_seed(seed)
    layer = ssm.SelectiveSSM(D, N).double()
    x = torch.randn(2, L, D, dtype=f64)
    with torch.no_grad():
        s = ssm.scan_sequential(layer, x)
        p = ssm.scan_parallel(layer, x)
    assert ((p - s).abs() <= 1e-5 * s.abs()).all()


def test_scan_equivalence_float32_l128_d8():
    torch.manual_seed(1)
    layer = ssm.SelectiveSSM(8, 16)
    x = torch.randn(1, 128, 8)
    with torch.no_grad():
        s, p = layer(x, "sequential"), layer(x, "parallel")
    assert ((p - s).abs().max() / s.abs().max()).item() < 1e-5


@pytest.mark.parametrize("method", ["sequential", "parallel"])
def test_linear_scan_gradients(method):
    gen = torch.Generator().manual_seed(2)
    a = (torch.rand(2, 11, 3, generator=gen, dtype=f64) * 0.9).requires_grad_()
    b = torch.randn(2, 11, 3, generator=gen, dtype=f64).requires_grad_()
    fd_check(lambda: ssm._LinearScan.apply(a, b, method), [a, b])


def test_linear_scan_matches_matrix_calculus():
    # with fixed a the scan is h = M b for a lower-triangular M; dL/db = M^T w
    L = 7
    rng = np.random.default_rng(0)
    a = rng.uniform(0.1, 0.9, L)
    M = np.zeros((L, L))
    for t in range(L):
        for s in range(t + 1):
            M[t, s] = np.prod(a[s + 1 : t + 1])
    w = rng.normal(size=L)
    b = torch.tensor(rng.normal(size=L), dtype=f64, requires_grad=True)
    at = torch.tensor(a, dtype=f64)[None, :, None]
    for method in ("sequential", "parallel"):
        b.grad = None
        h = ssm._LinearScan.apply(at, b[None, :, None], method)
        assert np.allclose(h.detach().flatten().numpy(), M @ b.detach().numpy(), rtol=1e-13)
        (h.flatten() @ torch.tensor(w, dtype=f64)).backward()
        assert np.allclose(b.grad.numpy(), M.T @ w, rtol=1e-13)


def test_last_input_gradient_is_c_times_b_bar():
    # frozen selectivity, scalar channel: d(sum y)/dx(L) = C(L) * B_bar(L)
    L = 6
    gen = torch.Generator().manual_seed(3)
    a_bar = torch.rand(1, L, 1, generator=gen, dtype=f64)
    b_bar = torch.rand(1, L, 1, generator=gen, dtype=f64)
    C = torch.randn(1, L, 1, generator=gen, dtype=f64)
    x = torch.randn(1, L, 1, generator=gen, dtype=f64, requires_grad=True)
    y = C * ssm.linear_scan_parallel(a_bar, b_bar * x)
    y.sum().backward()
    assert x.grad[0, -1, 0].item() == pytest.approx((C[0, -1, 0] * b_bar[0, -1, 0]).item(), rel=1e-14)


def test_selective_ssm_gradients():
    torch.manual_seed(4)
    layer = ssm.SelectiveSSM(3, 2).double()
    x = torch.randn(1, 6, 3, dtype=f64, requires_grad=True)
    params = [x] + list(layer.parameters())
    for method in ("sequential", "parallel"):
        fd_check(lambda: layer(x, method), params, max_entries=12)


def test_constant_parameter_stability_bound():
    L = 400
    a_bar, b_bar = ssm.discretize(torch.tensor([-1.0, -3.0], dtype=f64), torch.tensor([0.7, -1.2], dtype=f64), torch.tensor(0.05, dtype=f64))
    x = torch.tensor(np.random.default_rng(0).uniform(-2, 2, L), dtype=f64)
    a = a_bar.expand(1, L, 2)
    b = b_bar * x[None, :, None]
    h = ssm.linear_scan_sequential(a.contiguous(), b)
    bound = b_bar.abs() * x.abs().max() / (1 - a_bar)
    assert (h.abs().max(1).values[0] <= bound + 1e-12).all()


def mk_block(d=4, n=3, scan="sequential", seed=0):
    torch.manual_seed(seed)
    return ssm.MambaBlock(d, n, scan=scan).double()


def test_block_causality_bitwise():
    for scan in ("sequential", "parallel"):
        block = mk_block(8, 4, scan)
        x = torch.randn(1, 20, 8, dtype=f64)
        x2 = x.clone()
        x2[0, 12] += 1.0
        with torch.no_grad():
            y, y2 = block(x), block(x2)
        assert torch.equal(y[:, :12], y2[:, :12])
        assert not torch.equal(y[:, 12:], y2[:, 12:])


def test_block_residual_identity():
    block = mk_block()
    with torch.no_grad():
        block.out_proj.weight.zero_()
    x = torch.randn(2, 9, 4, dtype=f64)
    assert torch.equal(block(x), x)
    assert torch.equal(block(torch.zeros_like(x)), torch.zeros_like(x))


def test_block_shapes():
    block = ssm.MambaBlock(16, 8)
    assert block.d_inner == 32
    assert block.in_proj.weight.shape == (64, 16)
    assert block.conv.kernel_size == (4,)
    assert block(torch.randn(3, 10, 16)).shape == (3, 10, 16)
    with pytest.raises(ssm.ShapeMismatch):
        block(torch.randn(3, 10, 15))
    with pytest.raises(ssm.ShapeMismatch):
        ssm.SelectiveSSM(4, 2)(torch.randn(1, 3, 5))


@pytest.mark.parametrize("scan", ["sequential", "parallel"])
def test_block_gradients(scan):
    block = mk_block(4, 3, scan, seed=5)
    x = torch.randn(2, 5, 4, dtype=f64, requires_grad=True)
    fd_check(lambda: block(x), [x] + list(block.parameters()), max_entries=10)


def test_attention_block_gradients():
    torch.manual_seed(6)
    block = ssm.AttentionBlock(8, 2).double()
    x = torch.randn(1, 5, 8, dtype=f64, requires_grad=True)
    fd_check(lambda: block(x), [x] + list(block.parameters()), max_entries=6)
