import math

import numpy as np
import pytest

from sdq.gradcore import ContractError, Tape, Tensor, backward, tsum
from sdq.quantizers import quantize_weight
from sdq.stochastic import (BETA_EPS, DbpTable, GumbelConfig, gumbel_from_uniform, sample_gumbel,
                            soft_choice, soft_choice_value, stochastic_quantize)


def test_gumbel_inversion_at_one_over_e():
    assert gumbel_from_uniform(math.exp(-1)) == 0.0


def test_gumbel_moments():
    g = sample_gumbel(np.random.default_rng(0), 1_000_000)
    assert abs(g.mean() - np.euler_gamma) < 0.01
    assert g.var() == pytest.approx(math.pi ** 2 / 6, rel=0.02)


def test_soft_choice_near_one_is_almost_always_upper():
    rng = np.random.default_rng(1)
    c = soft_choice(Tensor(np.full(10_000, 1 - BETA_EPS)), 1.0, rng).data
    assert c.mean() >= 0.999


def test_soft_choice_half_is_fair():
    rng = np.random.default_rng(2)
    c = soft_choice(Tensor(np.full(100_000, 0.5)), 1.0, rng).data
    assert abs(c.mean() - 0.5) < 0.02
    assert set(np.unique(c)) <= {0.0, 1.0}


@pytest.mark.parametrize("tau", [0.5, 1.0, 2.0])
@pytest.mark.parametrize("beta", [0.1, 0.3, 0.7, 0.9])
def test_soft_choice_gradient_frozen_noise(tau, beta):
    g0, g1 = -0.4, 0.9
    b = Tensor(beta, requires_grad=True)
    with Tape():
        backward(soft_choice(b, tau, noise=(g0, g1)))
    h = 1e-6
    num = (soft_choice_value(beta + h, g0, g1, tau) - soft_choice_value(beta - h, g0, g1, tau)) / (2 * h)
    assert float(b.grad) == pytest.approx(num, rel=1e-4)


def test_soft_choice_soft_mode_returns_relaxation():
    c = soft_choice(Tensor(0.3), 0.7, noise=(0.2, -0.1), hard=False)
    assert float(c.data) == pytest.approx(soft_choice_value(0.3, 0.2, -0.1, 0.7), rel=1e-14)


def test_beta_clip_counts_and_passes_gradient():
    stats = {"beta_clamped": 0}
    b = Tensor(1.0, requires_grad=True)
    with Tape():
        backward(soft_choice(b, 1.0, noise=(0.0, 0.0), stats=stats))
    assert stats["beta_clamped"] == 1
    assert float(b.grad) > 0


def test_vector_beta_draws_independent_noise():
    c = soft_choice(Tensor(np.full(2000, 0.5)), 1.0, np.random.default_rng(3)).data
    assert 0.4 < c.mean() < 0.6


def test_gumbel_config_rejects_bad_tau():
    with pytest.raises(ContractError):
        GumbelConfig(tau=0.0)


def test_dbp_table_init():
    t = DbpTable(["a", "b"], (2, 4, 8))
    assert np.array_equal(t.beta.data, np.ones((2, 3)))
    assert t.bits("a") == 8 and t.lower_bits("b") == 4
    t.active_index[0] = 0
    assert t.lower_bits("a") is None
    with pytest.raises(ContractError):
        DbpTable(["a"], (4, 2))


def test_dbp_clamp():
    t = DbpTable(["a"], (2, 3))
    t.beta.data[:] = [-0.5, 1.5]
    t.clamp_()
    assert t.beta.data.tolist() == [[BETA_EPS, 1.0]]


def test_stochastic_quantize_at_init_is_upper_branch():
    rng = np.random.default_rng(4)
    w = rng.normal(size=20)
    t = DbpTable(["a"], (2, 4))
    hits = sum(
        np.array_equal(stochastic_quantize(w, "a", t, GumbelConfig(), rng).data,
                       quantize_weight(w, 4).data)
        for _ in range(2000))
    assert hits / 2000 >= 0.999


def test_stochastic_quantize_lowest_is_deterministic():
    w = np.random.default_rng(5).normal(size=10)
    t = DbpTable(["a"], (2, 4))
    t.active_index[0] = 0
    np.testing.assert_array_equal(
        stochastic_quantize(w, "a", t, GumbelConfig(), None).data, quantize_weight(w, 2).data)


@pytest.mark.parametrize("c", [0.0, 1.0])
def test_weight_gradient_independent_of_branch(c):
    rng = np.random.default_rng(6)
    wv = rng.normal(size=12)
    up = rng.normal(size=12)
    t = DbpTable(["a"], (2, 4))
    t.beta.data[0, 1] = 0.5
    w = Tensor(wv, requires_grad=True)
    with Tape():
        choice = soft_choice(t.active_beta(0), 1.0, noise=(5.0, 0.0) if c else (0.0, 5.0))
        assert float(choice.data) == c
        backward(tsum(stochastic_quantize(w, 0, t, GumbelConfig(), None, choice=choice) * up))
    ref = Tensor(wv, requires_grad=True)
    with Tape():
        backward(tsum(quantize_weight(ref, 4) * up))
    assert np.array_equal(w.grad, ref.grad)
