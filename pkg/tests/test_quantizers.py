import math

import numpy as np
import pytest

from sdq.gradcore import ContractError, Tape, Tensor, backward, tsum
from sdq.quantizers import (ClampQuantizer, expected_error_coeff, levels, normalized_weight,
                            quant_error_sq, quantize_activation, quantize_clamped, quantize_unit,
                            quantize_weight, quantize_weight_np)


def test_unit_half_rounds_away():
    assert quantize_unit(0.5, 2).data == pytest.approx(2 / 3, abs=0)


@pytest.mark.parametrize("b", range(1, 9))
def test_unit_endpoints_fixed(b):
    np.testing.assert_array_equal(quantize_unit(np.array([0.0, 1.0]), b).data, [0.0, 1.0])


def test_unit_ste_identity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.random(50), requires_grad=True)
    with Tape():
        backward(tsum(quantize_unit(x, 3)))
    assert np.array_equal(x.grad, np.ones(50))


def test_unit_range_contract():
    quantize_unit(np.array([-1e-13, 1 + 1e-13]), 2)
    with pytest.raises(ContractError):
        quantize_unit(np.array([1.01]), 2)
    with pytest.raises(ContractError):
        quantize_unit(np.array([0.5]), 0)


def test_weight_symmetric_pair_one_bit():
    for t in (0.1, 1.0, 7.0):
        np.testing.assert_array_equal(quantize_weight(np.array([t, -t]), 1).data, [1.0, -1.0])


def test_weight_zero_and_large_two_bit():
    out = quantize_weight(np.array([0.0, 50.0]), 2).data
    # 0 maps to 1/2 in the unit domain, which rounds (half away) to 2/3 -> 1/3
    assert out[0] == pytest.approx(1 / 3, abs=1e-15)
    assert out[1] == 1.0


def test_weight_matches_scalar_recomputation():
    rng = np.random.default_rng(1)
    w = rng.normal(size=64)
    out = quantize_weight(w, 3).data
    assert len(np.unique(out)) <= 8
    m = max(abs(math.tanh(v)) for v in w)
    for v, got in zip(w, out):
        u = math.tanh(v) / (2 * m) + 0.5
        k = math.floor(7 * u + 0.5)
        assert got == pytest.approx(2 * k / 7 - 1, abs=1e-15)


def test_weight_all_zero_gives_zero():
    np.testing.assert_array_equal(quantize_weight(np.zeros(4), 3).data, np.zeros(4))
    np.testing.assert_array_equal(quantize_weight_np(np.zeros(4), 3), np.zeros(4))


def test_weight_tape_and_numpy_versions_agree():
    rng = np.random.default_rng(2)
    w = rng.normal(size=(5, 6))
    for b in (1, 2, 5, None):
        np.testing.assert_array_equal(quantize_weight(w, b).data, quantize_weight_np(w, b))


def test_normalized_weight_range():
    w = np.random.default_rng(3).normal(size=100)
    v = normalized_weight(w).data
    assert np.max(np.abs(v)) == pytest.approx(1.0, abs=1e-15)


def test_activation_examples():
    assert quantize_activation(np.array([-0.3]), 3).data[0] == 0.0
    assert quantize_activation(np.array([0.5]), 2).data[0] == pytest.approx(2 / 3, abs=0)
    x = Tensor(np.array([1.2, 0.4]), requires_grad=True)
    with Tape():
        backward(tsum(quantize_activation(x, 4) * np.array([2.0, 3.0])))
    np.testing.assert_array_equal(x.grad, [0.0, 3.0])


def test_clamp_quantizer_fields():
    q = ClampQuantizer(2, 0.0, 3.0)
    assert (q.delta, q.n_levels, q.step) == (3.0, 4, 1.0)
    with pytest.raises(ContractError):
        ClampQuantizer(2, 1.0, 1.0)


def test_clamped_examples():
    q = ClampQuantizer(2, 0.0, 3.0)
    assert quantize_clamped(1.4, q) == 1.0
    q = ClampQuantizer(3, -0.37, 1.1)
    assert abs(quantize_clamped(-0.37, q) - (-0.37)) <= q.step / 2


def test_clamped_error_matches_step_squared_over_twelve():
    rng = np.random.default_rng(4)
    q = ClampQuantizer(4, -1.0, 1.0)
    w = rng.uniform(q.lower, q.upper, 1_000_000)
    mse = float(np.mean((quantize_clamped(w, q) - w) ** 2))
    assert mse == pytest.approx(q.step ** 2 / 12, rel=0.02)


def test_quant_error_sq():
    assert quant_error_sq([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert quant_error_sq([0.1, -0.1], [0.0, 0.0]) == pytest.approx(0.02, abs=1e-17)
    with pytest.raises(ContractError):
        quant_error_sq([1.0], [1.0, 2.0])


def test_quant_error_grows_as_bits_drop():
    rng = np.random.default_rng(5)
    layers = [rng.normal(0, 1 / math.sqrt(9 * c), (c, c, 3, 3)) for c in (16, 32, 64)]
    for w in layers:
        ref = quantize_weight_np(w, None)
        errs = [quant_error_sq(quantize_weight_np(w, b), ref) for b in range(8, 1, -1)]
        assert all(a < b for a, b in zip(errs, errs[1:]))


def test_expected_error_coeff_values():
    assert expected_error_coeff(1) == 1 / 12
    assert expected_error_coeff(2) == 1 / 108
    assert levels(4) == 15


@pytest.mark.parametrize("b", [2, 4, 8])
def test_expected_error_coeff_monte_carlo(b):
    rng = np.random.default_rng(b)
    q = ClampQuantizer(b, 0.0, 1.0)
    w = rng.random(1_000_000)
    ratio = float(np.mean((quantize_clamped(w, q) - w) ** 2)) / q.delta ** 2
    assert ratio == pytest.approx(expected_error_coeff(b), rel=0.02)
