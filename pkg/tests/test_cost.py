import pytest

from sdq.cost import (MB, LayerMeta, bitops, compression_gap, format_layer_table, hw_round,
                      model_size, parse_layer_table, resnet18_layers, total_bitops, wcr)
from sdq.gradcore import ContractError
from sdq.strategy import LayerAssignment, MpqStrategy, uniform_strategy


def strat(bits, params=100, act=4):
    return MpqStrategy(tuple(LayerAssignment(f"l{i}", b, params) for i, b in enumerate(bits)), act)


def test_bitops_direct():
    assert bitops(LayerMeta("c", "conv", 100, 4, 4, 2), 2, 2) == 1600


def test_bitops_linear_in_activation_bits():
    m = LayerMeta("c", "conv", 576, 8, 8, 1)
    assert bitops(m, 3, 8) == 2 * bitops(m, 3, 4)
    assert bitops(m, 2, 2) == bitops(m, 4, 4) / 4


def test_bitops_rejects_zero_bits():
    with pytest.raises(ContractError):
        bitops(LayerMeta("c", "conv", 1, 1, 1, 1), 0, 4)


def test_layer_meta_validation():
    with pytest.raises(ContractError):
        LayerMeta("x", "conv", 0, 1, 1, 1)
    with pytest.raises(ContractError):
        LayerMeta("x", "conv", 1, 1, 1, 0)


def test_resnet18_table():
    metas = resnet18_layers()
    assert sum(m.params for m in metas) == 11_678_912
    assert len(metas) == 21


def test_resnet18_bitops_constant():
    metas = resnet18_layers()
    s = uniform_strategy(metas, 4, 4, (metas[0].name, metas[-1].name))
    assert total_bitops(s, metas) / 1e9 == pytest.approx(34.7, rel=0.05)


def test_size_and_wcr():
    s = strat([4, 4, 2, 2])
    assert model_size(s) == 100 * 12 / 8
    assert wcr(strat([32, 32])) == 1.0
    assert 32 / 1.93 == pytest.approx(16.6, rel=0.005)


def test_resnet18_size_at_four_bits():
    metas = resnet18_layers()
    assert model_size(uniform_strategy(metas, 4, 4), metas) / MB == pytest.approx(5.8, rel=0.03)


def test_size_missing_layer():
    metas = [LayerMeta("a", "dense", 10, 1, 1, 1), LayerMeta("b", "dense", 10, 1, 1, 1)]
    with pytest.raises(ContractError):
        model_size(strat([4]), metas)
    with pytest.raises(ContractError):
        total_bitops(strat([4]), metas)


def test_size_linear_in_each_layer():
    a, b = model_size(strat([3, 5])), model_size(strat([4, 5]))
    assert b - a == 100 / 8


def test_hw_round_examples():
    supported = [2, 4, 8, 16]
    assert [l.bits for l in hw_round(strat([3, 4, 5, 9]), supported).layers] == [4, 4, 8, 16]
    same = strat([2, 4, 8])
    assert hw_round(same, supported) == same
    with pytest.raises(ContractError):
        hw_round(strat([17]), supported)
    with pytest.raises(ContractError):
        hw_round(same, [])


def test_hw_round_average_and_gap():
    s = strat([3] + [4] * 5 + [4, 4, 4, 4, 4, 4] + [3])  # mixed 3/4
    r = hw_round(s, [2, 4, 8, 16])
    gap = compression_gap(s, r)
    assert gap["rounded_avg_bits"] >= gap["theoretical_avg_bits"]
    assert gap["rounded_wcr"] <= gap["theoretical_wcr"]


def test_hw_round_row_bits():
    s = MpqStrategy((LayerAssignment("k", 3, 40, row_bits=(2, 3, 3, 1)),), 4)
    assert hw_round(s, [2, 4]).layers[0].row_bits == (2, 4, 4, 2)


def test_pinned_layers_use_eight_bit_activations():
    metas = [LayerMeta("a", "dense", 10, 1, 1, 1), LayerMeta("b", "dense", 10, 1, 1, 1)]
    s = MpqStrategy((LayerAssignment("a", 8, 10, True), LayerAssignment("b", 2, 10)), 4)
    assert total_bitops(s, metas) == 8 * 8 * 10 + 2 * 4 * 10
    assert total_bitops(s, metas, act_bits=2) == 8 * 8 * 10 + 2 * 2 * 10


def test_layer_table_round_trip():
    metas = resnet18_layers()
    assert parse_layer_table(format_layer_table(metas)) == metas


def test_layer_table_errors():
    with pytest.raises(ContractError, match="line 1"):
        parse_layer_table("a conv 1 2 3\n")
    with pytest.raises(ContractError, match="line 2"):
        parse_layer_table("# header\na conv x 1 1 1\n")
