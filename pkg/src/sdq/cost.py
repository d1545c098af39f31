"""BitOPs, model size and compression rate for mixed-precision strategies.

For a layer with ``params`` weights, input feature map ``in_w x in_h`` and
stride ``s``::

    bitops = b_w * b_a * params * in_w * in_h / s**2

``in_w * in_h / s**2`` is the output map area, so this is bit-weighted MACs.
Layer tables are plain text, one layer per line::

    # name kind params in_w in_h stride
    conv1 conv 9408 224 224 2
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from .gradcore import ContractError

MB = 1e6


@dataclass(frozen=True)
class LayerMeta:
    name: str
    kind: str
    params: int
    in_w: int
    in_h: int
    stride: int = 1

    def __post_init__(self):
        if self.params <= 0:
            raise ContractError(f"{self.name}: params must be positive")
        if self.stride < 1:
            raise ContractError(f"{self.name}: stride must be >= 1")


def bitops(meta: LayerMeta, b_w: float, b_a: float) -> float:
    if b_w < 1 or b_a < 1:
        raise ContractError("bitwidths must be >= 1")
    return b_w * b_a * meta.params * meta.in_w * meta.in_h / meta.stride ** 2


def total_bitops(strategy, metas, act_bits: int | None = None, pinned_act_bits: int = 8) -> float:
    """Sum of per-layer BitOPs.  Pinned layers run activations at
    ``pinned_act_bits``; the rest at ``act_bits`` (default: the strategy's)."""
    act_bits = strategy.activation_bits if act_bits is None else act_bits
    assign = strategy.by_name()
    total = 0.0
    for meta in metas:
        if meta.name not in assign:
            raise ContractError(f"strategy has no entry for layer {meta.name!r}")
        layer = assign[meta.name]
        b_a = pinned_act_bits if layer.pinned else act_bits
        total += bitops(meta, layer.mean_bits, b_a)
    return total


def model_size(strategy, metas=None) -> float:
    """Weight storage in bytes: sum(params * bits) / 8."""
    assign = strategy.by_name()
    if metas is None:
        return sum(l.params * l.mean_bits for l in strategy.layers) / 8.0
    size = 0.0
    for meta in metas:
        if meta.name not in assign:
            raise ContractError(f"strategy has no entry for layer {meta.name!r}")
        size += meta.params * assign[meta.name].mean_bits / 8.0
    return size


def wcr(strategy) -> float:
    return 32.0 / strategy.avg_weight_bits


def hw_round(strategy, supported):
    """Round each layer up to the smallest supported bitwidth."""
    supported = sorted(set(int(b) for b in supported))
    if not supported:
        raise ContractError("supported bitwidth set is empty")

    def up(b):
        for s in supported:
            if s >= b:
                return s
        raise ContractError(f"bitwidth {b} exceeds largest supported {supported[-1]}")

    layers = []
    for layer in strategy.layers:
        rows = tuple(up(b) for b in layer.row_bits) if layer.row_bits else None
        layers.append(replace(layer, bits=up(layer.bits), row_bits=rows))
    return replace(strategy, layers=tuple(layers))


def compression_gap(strategy, rounded) -> dict:
    return {
        "theoretical_avg_bits": strategy.avg_weight_bits,
        "rounded_avg_bits": rounded.avg_weight_bits,
        "theoretical_wcr": wcr(strategy),
        "rounded_wcr": wcr(rounded),
    }


def parse_layer_table(text: str) -> list[LayerMeta]:
    metas = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ContractError(f"layer table line {lineno}: expected 6 fields, got {len(parts)}")
        name, kind, *nums = parts
        try:
            params, in_w, in_h, stride = (int(v) for v in nums)
        except ValueError:
            raise ContractError(f"layer table line {lineno}: non-integer field") from None
        metas.append(LayerMeta(name, kind, params, in_w, in_h, stride))
    return metas


def format_layer_table(metas) -> str:
    lines = ["# name kind params in_w in_h stride"]
    lines += [f"{m.name} {m.kind} {m.params} {m.in_w} {m.in_h} {m.stride}" for m in metas]
    return "\n".join(lines) + "\n"


def resnet18_layers() -> list[LayerMeta]:
    """ImageNet ResNet18 (224x224 input), convolution and fc weights only."""
    metas = [LayerMeta("conv1", "conv", 7 * 7 * 3 * 64, 224, 224, 2)]
    size = 56  # after the stride-2 max pool
    c_in = 64
    for stage, c_out in enumerate((64, 128, 256, 512), start=1):
        for block in range(2):
            stride = 2 if (stage > 1 and block == 0) else 1
            name = f"layer{stage}.{block}"
            metas.append(LayerMeta(f"{name}.conv1", "conv", 9 * c_in * c_out, size, size, stride))
            out = size // stride
            metas.append(LayerMeta(f"{name}.conv2", "conv", 9 * c_out * c_out, out, out, 1))
            if stride != 1 or c_in != c_out:
                metas.append(LayerMeta(f"{name}.downsample", "conv", c_in * c_out, size, size,
                                       stride))
            size, c_in = out, c_out
    metas.append(LayerMeta("fc", "dense", 512 * 1000, 1, 1, 1))
    return metas
