import math

import numpy as np
import pytest
import torch

from mambacad import codec
from mambacad.model import (
    IndexOutOfRange,
    MambaCAD,
    ModelConfig,
    build_model,
    logits_to_tokens,
    reconstruction_loss,
    sinusoidal_table,
    to_batch,
)
from mambacad.ssm import ShapeMismatch
from helpers import fd_check, random_sequence

torch.set_num_threads(1)
f64 = torch.float64

SMALL = dict(d_model=16, n_blocks=1, d_state=4, compress_hidden=8, latent_channels=4)
VARIANTS = {
    "mamba": {},
    "A": {"block_type": "attention", "n_heads": 2},
    "B": {"compress_type": "mlp"},
    "C": {"bottleneck": True, "bottleneck_dim": 6},
}


def tokens(n, seed=0):
    rng = np.random.default_rng(seed)
    return [codec.quantize(random_sequence(rng)) for _ in range(n)]


def test_embedding_shape_and_full_dims():
    model = MambaCAD()
    assert model.embedding.command.weight.shape == (6, 256)
    assert model.embedding.param_b.weight.shape == (257, 256)
    assert model.embedding.param_a.weight.shape == (256, 16 * 256)
    ids, bins = to_batch(tokens(2))
    assert model.embed(ids, bins).shape == (2, 128, 256)
    assert model.latent_shape == (64, 128)


def test_positional_table_fixed():
    model = build_model(ModelConfig(**SMALL, seq_len=128))
    names = [n for n, _ in model.named_parameters()]
    assert not any("pos" in n for n in names)
    table = sinusoidal_table(128, 16)
    assert torch.equal(model.embedding.pos, table)
    assert table[0, 0] == 0 and table[0, 1] == 1
    assert table[5, 2].item() == pytest.approx(math.sin(5 / 10000 ** (2 / 16)), rel=1e-6)


def test_embedding_equals_positional_when_zeroed():
    model = build_model(ModelConfig(**SMALL))
    with torch.no_grad():
        model.embedding.command.weight.zero_()
        model.embedding.param_a.weight.zero_()
    ids, bins = to_batch(tokens(3))
    assert torch.equal(model.embed(ids, bins), model.embedding.pos.expand(3, -1, -1))


def test_identical_tokens_differ_by_position_only():
    model = build_model(ModelConfig(**SMALL))
    q = tokens(1)[0]
    ids, bins = to_batch([q])
    e = model.embed(ids, bins)[0]
    # padding positions all carry (EOS, all-256)
    t1, t2 = q.raw_length + 3, q.raw_length + 10
    pos = model.embedding.pos
    assert torch.allclose(e[t1] - e[t2], pos[t1] - pos[t2], atol=1e-6)


def test_embedding_index_errors():
    model = build_model(ModelConfig(**SMALL))
    ids, bins = to_batch(tokens(1))
    with pytest.raises(IndexOutOfRange):
        model.embed(ids + 6, bins)
    with pytest.raises(IndexOutOfRange):
        model.embed(ids, bins + 1)


def test_embedding_linear_structure():
    # the parameter term is W_a applied to the flattened per-slot W_b columns
    model = build_model(ModelConfig(**SMALL)).double()
    ids, bins = to_batch(tokens(1))
    emb = model.embedding
    cols = emb.param_b.weight[bins[0]]  # (128, 16, d)
    want = emb.command.weight[ids[0]] + cols.reshape(128, -1) @ emb.param_a.weight.T + emb.pos.double()
    assert torch.allclose(model.embed(ids, bins)[0], want, atol=1e-12)


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_shapes_all_variants(variant):
    model = build_model(ModelConfig(**SMALL, **VARIANTS[variant]))
    ids, bins = to_batch(tokens(3, seed=1))
    cmd, par, z = model(ids, bins)
    assert z.shape == (3, 4, 128)
    assert cmd.shape == (3, 128, 6)
    assert par.shape == (3, 128, 16, 257)
    assert torch.isfinite(cmd).all() and torch.isfinite(par).all()
    with pytest.raises(ShapeMismatch):
        model.decode(torch.zeros(1, 5, 128))
    with pytest.raises(ShapeMismatch):
        model.encode_embedded(torch.zeros(1, 127, 16))


def test_full_scale_shapes():
    model = MambaCAD(ModelConfig(n_blocks=1))
    ids, bins = to_batch(tokens(1))
    cmd, par, z = model(ids, bins)
    assert z.shape == (1, 64, 128) and cmd.shape == (1, 128, 6) and par.shape == (1, 128, 16, 257)


def test_shape_fuzzer():
    model = build_model(ModelConfig(**SMALL)).eval()
    rng = np.random.default_rng(7)
    for _ in range(20):
        n = int(rng.integers(1, 5))
        ids = torch.from_numpy(rng.integers(0, 6, (n, 128)))
        bins = torch.from_numpy(rng.integers(0, 257, (n, 128, 16)))
        with torch.no_grad():
            cmd, par, z = model(ids, bins)
        assert torch.isfinite(par).all() and cmd.shape == (n, 128, 6)
        assert len(logits_to_tokens(cmd, par)) == n


def test_encode_deterministic():
    model = build_model(ModelConfig(**SMALL)).eval()
    ids, bins = to_batch(tokens(2))
    with torch.no_grad():
        assert torch.equal(model.encode(ids, bins), model.encode(ids, bins))


def test_encoder_receptive_field():
    # the causal encoder feeds two kernel-3 convolutions, which look two steps back
    model = build_model(ModelConfig(**SMALL)).double().eval()
    ids, bins = to_batch(tokens(1, seed=3))
    with torch.no_grad():
        e = model.embed(ids, bins)
        for t0 in (10, 40, 127):
            e2 = e.clone()
            e2[0, t0] += 0.5
            z, z2 = model.encode_embedded(e), model.encode_embedded(e2)
            assert torch.equal(z[..., : t0 - 2], z2[..., : t0 - 2])
            assert not torch.equal(z[..., t0 - 2], z2[..., t0 - 2])


def test_eval_batch_norm_independent_of_batch():
    model = build_model(ModelConfig(**SMALL))
    ids, bins = to_batch(tokens(4, seed=5))
    model.train()
    with torch.no_grad():
        model(ids, bins)  # move running statistics away from their init
    model.eval()
    z = torch.randn(3, 4, 128)
    with torch.no_grad():
        alone = model.decode(z[:1])[0]
        mixed = model.decode(z)[0][:1]
    assert torch.allclose(alone, mixed, atol=1e-6)


def test_loss_perfect_prediction():
    ids, bins = to_batch(tokens(2))
    cmd = torch.nn.functional.one_hot(ids, 6).double() * 1e6
    par = torch.nn.functional.one_hot(bins, 257).double() * 1e6
    total, lc, lp = reconstruction_loss(cmd, par, ids, bins)
    assert total.item() == pytest.approx(0.0, abs=1e-9)


def test_loss_uniform_logits():
    ids, bins = to_batch(tokens(2))
    total, lc, lp = reconstruction_loss(torch.zeros(2, 128, 6, dtype=f64), torch.zeros(2, 128, 16, 257, dtype=f64), ids, bins)
    assert lc.item() == pytest.approx(math.log(6), rel=1e-12)
    assert lp.item() == pytest.approx(math.log(257), rel=1e-12)
    assert total.item() == pytest.approx(math.log(6) + math.log(257), rel=1e-12)


def test_loss_position_sensitive():
    torch.manual_seed(0)
    q = tokens(1, seed=2)[0]
    ids, bins = to_batch([q])
    cmd, par = torch.randn(1, 128, 6), torch.randn(1, 128, 16, 257)
    base = reconstruction_loss(cmd, par, ids, bins)[0]
    t1, t2 = 1, q.raw_length + 1  # a real command and an EOS pad
    perm = list(range(128))
    perm[t1], perm[t2] = perm[t2], perm[t1]
    swapped = reconstruction_loss(cmd, par, ids[:, perm], bins[:, perm])[0]
    assert base.item() != swapped.item()


@pytest.mark.parametrize("variant", list(VARIANTS))
def test_tiny_autoencoder_gradients(variant):
    cfg = ModelConfig(seq_len=8, scan="sequential", **SMALL, **VARIANTS[variant])
    model = build_model(cfg, seed=1).double()
    model.train()
    rng = np.random.default_rng(0)
    ids = torch.from_numpy(rng.integers(0, 6, (2, 8)))
    bins = torch.from_numpy(rng.integers(0, 257, (2, 8, 16)))

    def fn():
        cmd, par, _ = model(ids, bins)
        return reconstruction_loss(cmd, par, ids, bins)[0]

    fd_check(fn, list(model.parameters()), max_entries=4)


def test_config_rejects_unknown_types():
    with pytest.raises(ValueError):
        ModelConfig(block_type="lstm")
    with pytest.raises(ValueError):
        ModelConfig(compress_type="pool")


def test_build_model_seeded():
    a = build_model(ModelConfig(**SMALL), seed=3).state_dict()
    b = build_model(ModelConfig(**SMALL), seed=3).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)
