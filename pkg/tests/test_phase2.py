import math

import numpy as np
import pytest

from sdq.data import DatasetSpec, gen_dataset
from sdq.gradcore import ContractError, NumericalAbort, Tape, Tensor, backward, grad_check
from sdq.models import build_model
from sdq.phase2 import (BinHistogram, FixedWeights, Phase2Config, Phase2Trainer, bin_assign,
                        bin_entropy, ebr_loss, ebr_terms, grid_levels, kd_loss,
                        normalize_weights, normalize_weights_np, summed_bin_variance)
from sdq.strategy import LayerAssignment, MpqStrategy, uniform_strategy
from sdq.training import FpConfig, fit_full_precision


def entropy_of(logits):
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    return float(-np.sum(p * np.log(p)) / len(p))


# ----------------------------------------------------------------- kd loss

def test_kd_self_is_teacher_entropy():
    z = np.random.default_rng(0).normal(size=(6, 4))
    assert float(kd_loss(z, Tensor(z)).data) == pytest.approx(entropy_of(z), rel=1e-12)


def test_kd_peaked_match_is_near_zero():
    z = np.full((3, 4), -20.0)
    z[np.arange(3), [0, 2, 1]] = 20.0
    assert float(kd_loss(z, Tensor(z)).data) < 1e-15


def test_kd_matches_two_loop_recomputation():
    rng = np.random.default_rng(1)
    t, s = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    total = 0.0
    for i in range(5):
        zt = sum(math.exp(v) for v in t[i])
        zs = sum(math.exp(v) for v in s[i])
        for c in range(4):
            total -= math.exp(t[i, c]) / zt * math.log(math.exp(s[i, c]) / zs)
    assert float(kd_loss(t, Tensor(s)).data) == pytest.approx(total / 5, abs=1e-12)


def test_kd_teacher_gets_no_gradient():
    rng = np.random.default_rng(2)
    t = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    s = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    with Tape():
        backward(kd_loss(t, s))
    assert not np.any(t.grad) and np.any(s.grad)


def test_kd_errors():
    with pytest.raises(NumericalAbort):
        kd_loss(np.array([[np.nan, 0.0]]), Tensor(np.zeros((1, 2))))
    with pytest.raises(ContractError):
        kd_loss(np.zeros((2, 3)), Tensor(np.zeros((2, 4))))


# ---------------------------------------------------------- normalization

def test_normalize_examples():
    np.testing.assert_array_equal(normalize_weights(np.array([1.0, -1.0]), 1).data, [1.0, -1.0])
    w = np.random.default_rng(3).normal(size=200)
    a = normalize_weights_np(w, 4)
    assert np.mean(np.abs(a)) == pytest.approx(8 / 15, rel=1e-13)
    np.testing.assert_allclose(normalize_weights_np(w * 7.5, 4), a, rtol=1e-13)
    np.testing.assert_allclose(normalize_weights(w, 4).data, a, rtol=1e-15)


def test_normalize_zero_unchanged():
    np.testing.assert_array_equal(normalize_weights(np.zeros(3), 2).data, np.zeros(3))
    np.testing.assert_array_equal(normalize_weights_np(np.zeros(3), 2), np.zeros(3))


def test_normalize_gradient():
    w = np.random.default_rng(4).normal(size=7)
    assert grad_check(lambda t: (normalize_weights(t, 3) ** 3).sum(), w) < 1e-7


# ------------------------------------------------------------------- bins

def test_bins_on_levels_have_zero_variance():
    h = bin_assign(np.repeat(grid_levels(3), 5), 3)
    assert np.all(h.variances < 1e-30) and np.all(h.counts == 5)
    assert isinstance(h, BinHistogram)


def test_bin_ties_go_up():
    # midpoint between -1/3 and 1/3 is 0
    h = bin_assign(np.array([0.0, -1 / 3 - 1 / 3]), 2)
    assert h.index.tolist() == [2, 1]


def test_uniform_weights_nearest_level_proportions():
    # nearest-level bins on [-1, 1] at b=2 have widths 1/3, 2/3, 2/3, 1/3
    v = np.random.default_rng(5).uniform(-1, 1, 100_000)
    h = bin_assign(v, 2)
    np.testing.assert_allclose(h.proportions, [1 / 6, 1 / 3, 1 / 3, 1 / 6], rtol=0.02)
    assert h.proportions.sum() == pytest.approx(1.0, abs=1e-15)


def test_single_weight_bin():
    h = bin_assign(np.array([0.3]), 2)
    assert h.counts.tolist() == [0, 0, 1, 0]
    assert float(ebr_terms(Tensor(np.array([0.3])), 2).data) == pytest.approx((0.3 - 1 / 3) ** 2)


def test_entropy_examples():
    for b in (1, 2, 3):
        assert bin_entropy(bin_assign(grid_levels(b), b)) == pytest.approx(b * math.log(2), abs=1e-15)
    assert bin_entropy(bin_assign(np.full(9, 1.0), 2)) == 0.0
    h = bin_assign(np.array([-1.0, -1 / 3]), 2)
    assert bin_entropy(h) == pytest.approx(math.log(2), abs=1e-15)


# -------------------------------------------------------------------- ebr

def test_ebr_zero_when_collapsed():
    assert float(ebr_terms(Tensor(np.repeat(grid_levels(2), 4)), 2).data) == 0.0


def test_ebr_boundary_counts():
    v, d = 1 / 3, 0.05
    two = float(ebr_terms(Tensor(np.array([v - d, v + d])), 2).data)
    three = float(ebr_terms(Tensor(np.array([v - d, v, v + d])), 2).data)
    assert two == pytest.approx(0.0, abs=1e-30)
    assert three == pytest.approx(2 * d * d / 3, rel=1e-12)
    loose = float(ebr_terms(Tensor(np.array([v - d, v + d])), 2, var_min_count=2).data)
    assert loose == pytest.approx(d * d, rel=1e-12)


def two_pass_ebr(values, b, min_count=3):
    L = (1 << b) - 1
    total = 0.0
    for k in range(L + 1):
        level = 2 * k / L - 1
        members = [x for x in values if min(max(math.floor((x + 1) / 2 * L + 0.5), 0), L) == k]
        if not members:
            continue
        m = sum(members) / len(members)
        total += (m - level) ** 2
        if len(members) >= min_count:
            total += sum((x - m) ** 2 for x in members) / len(members)
    return total


@pytest.mark.parametrize("b", [1, 2, 3, 5])
def test_ebr_matches_two_pass_recomputation(b):
    v = np.random.default_rng(b).uniform(-1, 1, 300)
    assert float(ebr_terms(Tensor(v), b).data) == pytest.approx(two_pass_ebr(v, b), abs=1e-10)


def test_ebr_gradient_with_fixed_membership():
    v = np.random.default_rng(6).uniform(-0.95, 0.95, 60)
    assert grad_check(lambda t: ebr_terms(t, 3), v, h=1e-7) < 1e-6


def test_ebr_loss_sums_groups():
    rng = np.random.default_rng(7)
    a, b = rng.uniform(-1, 1, 20), rng.uniform(-1, 1, 30)
    total = float(ebr_loss([(Tensor(a), 2), (Tensor(b), 4)]).data)
    assert total == pytest.approx(two_pass_ebr(a, 2) + two_pass_ebr(b, 4), abs=1e-12)
    assert float(ebr_loss([]).data) == 0.0
    assert summed_bin_variance([(a, 2)]) == pytest.approx(
        float(np.sum(bin_assign(a, 2).variances[bin_assign(a, 2).counts >= 3])))


# ------------------------------------------------------------- quantizer

def test_fixed_weights_records_groups_and_levels():
    m = build_model("mlp:2-8-8-4", 0)
    s = uniform_strategy(m.layer_meta(), 3, 4, m.pinned)
    q = FixedWeights(s)
    q.begin(1)
    w = q.weight(m.layers[1])
    assert len(np.unique(w.data)) <= 8
    assert q.groups[0][1] == 3 and q.groups[0][0].shape == m.layers[1].weight.shape


def test_fixed_weights_row_bits():
    m = build_model("mlp:2-4-4-4", 0)
    rows = (2, 3, 2, 3)
    layers = [LayerAssignment("fc0", 8, 8, True), LayerAssignment("fc1", 3, 16, row_bits=rows),
              LayerAssignment("fc2", 8, 16, True)]
    q = FixedWeights(MpqStrategy(tuple(layers), 4))
    q.begin(1)
    w = q.weight(m.layers[1]).data
    assert len(np.unique(w[[0, 2]])) <= 4 and len(np.unique(w[[1, 3]])) <= 8
    assert sorted(b for _, b in q.groups) == [2, 3]


def test_fixed_weights_missing_layer():
    m = build_model("mlp:2-4-4", 0)
    q = FixedWeights(MpqStrategy((LayerAssignment("fc0", 4, 8),), 4))
    with pytest.raises(ContractError):
        q.weight(m.layers[1])


# --------------------------------------------------------------- training

@pytest.fixture(scope="module")
def toy():
    (x, y), (xt, yt) = gen_dataset(DatasetSpec(samples=600, seed=3))
    teacher = build_model("mlp:2-16-16-4", 1)
    fit_full_precision(teacher, x, y, FpConfig(epochs=15))
    return x, teacher


def test_phase2_loss_decreases(toy):
    x, teacher = toy
    student = teacher.copy()
    s = uniform_strategy(student.layer_meta(), 2, 4, student.pinned)
    tr = Phase2Trainer(student, teacher, s, Phase2Config(lambda_e=5e-2))
    rng = np.random.default_rng(0)
    losses = [tr.step(x[rng.integers(0, len(x), 64)])["loss"] for _ in range(50)]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_phase2_lambda_zero_is_pure_distillation(toy):
    x, teacher = toy
    student = teacher.copy()
    s = uniform_strategy(student.layer_meta(), 2, 4, student.pinned)
    rec = Phase2Trainer(student, teacher, s, Phase2Config(lambda_e=0.0)).step(x[:32])
    assert rec["loss"] == rec["kd_loss"] and rec["ebr"] > 0


def test_phase2_updates_student_only(toy):
    x, teacher = toy
    before = [p.data.copy() for p in teacher.parameters()]
    student = teacher.copy()
    s = uniform_strategy(student.layer_meta(), 2, 4, student.pinned)
    Phase2Trainer(student, teacher, s, Phase2Config()).step(x[:32])
    assert all(np.array_equal(a, p.data) for a, p in zip(before, teacher.parameters()))
    assert not np.array_equal(before[2], student.parameters()[2].data)


def test_phase2_bit_identical_metrics(toy):
    x, teacher = toy

    def run():
        student = teacher.copy()
        s = uniform_strategy(student.layer_meta(), 3, 4, student.pinned)
        out = []
        Phase2Trainer(student, teacher, s, Phase2Config(epochs=2)).fit(x, shuffle_seed=4,
                                                                      on_epoch=out.append)
        return out

    assert run() == run()


def test_phase2_config_validation():
    for bad in (dict(lambda_e=-1.0), dict(epochs=0), dict(init="random")):
        with pytest.raises(ContractError):
            Phase2Config(**bad)
