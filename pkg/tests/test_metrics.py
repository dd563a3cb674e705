import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mambacad import codec, metrics
from mambacad.codec import CommandKind as K, QuantizedSequence
from mambacad.evaluate import run_report
from mambacad.train import Prediction, check_tokens
from helpers import random_sequence


def line_tokens(bins_xy=(100, 100), n_lines=3):
    ids = np.full(128, K.EOS)
    ids[0] = K.SOL
    ids[1 : 1 + n_lines] = K.LINE
    ids[1 + n_lines] = K.EXTRUDE
    bins = np.where(codec.SLOT_MASK[ids], 0, 256)
    bins[1 : 1 + n_lines, 0], bins[1 : 1 + n_lines, 1] = bins_xy
    return QuantizedSequence.from_arrays(ids, bins)


def test_command_accuracy_identity_and_eos():
    q = line_tokens()
    assert metrics.command_accuracy(q, q) == 1.0
    eos = QuantizedSequence.from_arrays(np.full(128, K.EOS), np.full((128, 16), 256))
    assert metrics.command_accuracy(eos, eos) == 1.0


def test_command_accuracy_96_of_128():
    gt = QuantizedSequence.from_arrays(np.full(128, K.EOS), np.full((128, 16), 256))
    ids = gt.command_ids.copy()
    ids[:32] = K.LINE
    pred = QuantizedSequence(ids, gt.param_bins, 0)
    assert metrics.command_accuracy(gt, pred) == 0.75


def test_command_accuracy_mask_padding_flag():
    gt = line_tokens()
    ids = gt.command_ids.copy()
    ids[100] = K.LINE
    pred = QuantizedSequence(ids, gt.param_bins, gt.raw_length)
    assert metrics.command_accuracy(gt, pred) == 127 / 128
    assert metrics.command_accuracy(gt, pred, mask_padding=True) == 1.0


def test_parameter_accuracy_off_by_two_counts():
    gt = line_tokens((100, 100), n_lines=1)
    bins = gt.param_bins.copy()
    bins[1, :2] = (102, 98)
    pred = QuantizedSequence(gt.command_ids, bins, gt.raw_length)
    assert metrics.parameter_accuracy(gt, pred) == 1.0


def test_parameter_accuracy_off_by_three_strict():
    gt = line_tokens((100, 100), n_lines=1)
    bins = gt.param_bins.copy()
    bins[1, 0] = 103
    pred = QuantizedSequence(gt.command_ids, bins, gt.raw_length)
    good, total = metrics.parameter_counts(gt, pred)
    assert total == 2 + 11  # one Line plus the Extrude
    assert good == total - 1
    assert metrics.parameter_accuracy(gt, pred) == (total - 1) / total
    assert metrics.parameter_accuracy(gt, pred, eta=4) == 1.0


def test_parameter_accuracy_ignores_wrong_commands():
    gt = line_tokens((100, 100), n_lines=2)
    ids = gt.command_ids.copy()
    bins = gt.param_bins.copy()
    ids[1] = K.ARC
    bins[1, :2] = 0
    pred = QuantizedSequence(ids, bins, gt.raw_length)
    assert metrics.parameter_counts(gt, pred) == (2 + 11, 2 + 11)


def test_parameter_accuracy_undefined():
    eos = QuantizedSequence.from_arrays(np.full(128, K.EOS), np.full((128, 16), 256))
    with pytest.raises(metrics.UndefinedMetric):
        metrics.parameter_accuracy(eos, eos)
    assert metrics.corpus_accuracy([eos], [eos]) == (1.0, None)


def test_accuracy_monotone_in_flips():
    rng = np.random.default_rng(0)
    gt = codec.quantize(random_sequence(rng))
    ids = gt.command_ids.copy()
    prev = 1.0
    for t in rng.permutation(128)[:40]:
        ids[t] = (ids[t] + 1) % 6
        acc = metrics.command_accuracy(gt, QuantizedSequence(ids.copy(), gt.param_bins, gt.raw_length))
        assert acc <= prev
        prev = acc


def test_chamfer_two_points():
    assert metrics.chamfer(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == 2.0
    assert metrics.chamfer_brute(np.zeros((1, 3)), np.array([[1.0, 0, 0]])) == 2.0


def test_chamfer_identical_zero():
    p = np.random.default_rng(0).normal(size=(50, 3))
    assert metrics.chamfer(p, p) == 0.0
    assert metrics.chamfer(p, p[::-1]) == 0.0


def test_chamfer_accelerated_equals_brute_exactly():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = rng.uniform(-1, 1, (int(rng.integers(1, 300)), 3))
        q = rng.uniform(-1, 1, (int(rng.integers(1, 300)), 3))
        assert metrics.chamfer(p, q) == metrics.chamfer_brute(p, q)


def test_chamfer_with_duplicates_and_lattice_ties():
    # many exactly tied neighbours on an integer lattice
    g = np.stack(np.meshgrid(*[np.arange(4.0)] * 3, indexing="ij"), -1).reshape(-1, 3)
    q = g + 0.5
    assert metrics.chamfer(g, q) == metrics.chamfer_brute(g, q)
    assert metrics.chamfer(np.repeat(g, 3, 0), q) == metrics.chamfer_brute(np.repeat(g, 3, 0), q)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6))
def test_chamfer_symmetric_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p, q = rng.normal(size=(20, 3)), rng.normal(size=(30, 3))
    a, b = metrics.chamfer(p, q), metrics.chamfer(q, p)
    assert a == pytest.approx(b, rel=1e-15) and a >= 0


def test_chamfer_matrix_matches_pairwise():
    rng = np.random.default_rng(2)
    gen = [rng.normal(size=(40, 3)) for _ in range(3)]
    ref = [rng.normal(size=(30, 3)) for _ in range(4)]
    m = metrics.chamfer_matrix(gen, ref, workers=2)
    for i, g in enumerate(gen):
        for j, r in enumerate(ref):
            assert m[i, j] == metrics.chamfer_brute(g, r)


def test_median_chamfer():
    z = np.zeros((1, 3))
    pairs = [(z, z + [1, 0, 0]), (z, z), (z, z + [2, 0, 0])]
    assert metrics.median_chamfer(pairs) == 2.0
    assert metrics.median_chamfer([]) is None


def test_generation_identical_sets():
    rng = np.random.default_rng(3)
    clouds = [rng.uniform(-1, 1, (64, 3)) for _ in range(5)]
    cov, mmd, jsd = metrics.generation_metrics(clouds, clouds)
    assert (cov, mmd, jsd) == (1.0, 0.0, 0.0)


def test_coverage_half():
    a = np.full((10, 3), -0.5)
    b = np.full((10, 3), 0.5)
    gen = [a + 0.01]
    cov, mmd, _ = metrics.generation_metrics(gen, [a, b])
    assert cov == 0.5
    want = np.mean([metrics.chamfer_brute(gen[0], a), metrics.chamfer_brute(gen[0], b)])
    assert mmd == want


def test_generation_metrics_against_brute_oracle():
    rng = np.random.default_rng(4)
    gen = [rng.uniform(-1, 1, (30, 3)) for _ in range(6)]
    ref = [rng.uniform(-1, 1, (30, 3)) for _ in range(5)]
    cd = np.array([[metrics.chamfer_brute(g, r) for r in ref] for g in gen])
    cov, mmd, _ = metrics.generation_metrics(gen, ref)
    assert cov == len(set(cd.argmin(1).tolist())) / len(ref)
    assert mmd == cd.min(0).mean()


def test_jsd_disjoint_is_ln2():
    a = [np.full((5, 3), -0.9)]
    b = [np.full((5, 3), 0.9)]
    assert metrics.jensen_shannon(metrics.occupancy(a), metrics.occupancy(b)) == pytest.approx(math.log(2), abs=1e-15)


def test_jsd_symmetric_and_bounded():
    rng = np.random.default_rng(5)
    a = [rng.uniform(-1, 1, (100, 3))]
    b = [rng.uniform(-1, 0.5, (100, 3))]
    pa, pb = metrics.occupancy(a), metrics.occupancy(b)
    j = metrics.jensen_shannon(pa, pb)
    assert j == pytest.approx(metrics.jensen_shannon(pb, pa), rel=1e-12)
    assert 0 <= j <= math.log(2)


def test_occupancy_grid():
    occ = metrics.occupancy([np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]])])
    assert occ.shape == (28**3,)
    assert occ[0] == 1 and occ[-1] == 1 and occ.sum() == 2


def test_uniqueness_novelty():
    rng = np.random.default_rng(6)
    gen = [codec.quantize(random_sequence(rng)) for _ in range(6)]
    assert metrics.uniqueness_novelty(gen, []) == (1.0, 1.0)
    assert metrics.uniqueness_novelty(gen + gen, [])[0] == 0.0
    assert metrics.uniqueness_novelty(gen, gen)[1] == 0.0
    assert metrics.uniqueness_novelty(gen, gen[:3])[1] == 0.5


def test_report_json_round_trip():
    rep = metrics.MetricReport("gen", 10, a_c=0.5, mcd=1e-3, cov=0.25, mmd=0.0123, jsd=0.04, unique=1.0, novel=0.9)
    assert metrics.MetricReport.from_json(rep.to_json()) == rep
    shown = rep.display()
    assert shown["mcd"] == "1.00" and shown["mmd"] == "1.23" and shown["ir"] == "-"


def _valid_truth(count, seed=0):
    from mambacad import corpus
    from mambacad.evaluate import ground_truth_tokens

    return ground_truth_tokens(corpus.synthesize(count, seed=seed))


def test_report_all_invalid():
    truth = _valid_truth(3)
    bad = [Prediction(q, None, False, "grammar") for q in truth]
    rep = run_report("recon", bad, truth, n_points=64, export_res=16)
    assert rep.ir == 1.0 and rep.al is None and rep.mcd is None and rep.export_ratio == 0.0


def test_report_perfect_reconstruction():
    truth = _valid_truth(4, seed=1)
    outs = [check_tokens(q) for q in truth]
    rep = run_report("recon", outs, truth, n_points=128, export_res=16)
    assert rep.a_c == 1.0 and rep.a_p == 1.0
    assert rep.ir == 0.0 and rep.mcd == 0.0 and rep.export_ratio == 1.0
    assert rep.al == np.mean([q.raw_length for q in truth])


def test_report_generation_fields():
    truth = _valid_truth(4, seed=2)
    outs = [check_tokens(q) for q in truth[:2]]
    rep = run_report("gen", outs, truth, train=truth[:1], n_points=128, export_res=16)
    for name in ("cov", "mmd", "jsd", "unique", "novel", "al", "export_ratio", "ir"):
        assert math.isfinite(getattr(rep, name))
    assert rep.novel == 0.5 and rep.unique == 1.0


def test_report_rejects_unknown_task():
    with pytest.raises(ValueError):
        run_report("bogus", [])
