"""Toy networks whose quantizable layers expose their weights to a quantizer.

A forward pass takes a *quantizer* object deciding what each layer's
effective weight is (``weight(layer)``) and at what bitwidth activations are
quantized (``act_bits``).  :class:`FullPrecision` uses the normalized real
weight ``tanh(w) / max|tanh(w)|`` and clip-only activations, so a
full-precision forward is the quantized forward with rounding bypassed.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .cost import LayerMeta
from .gradcore import ContractError, Tensor, conv2d, log_softmax, mean, reshape
from .quantizers import normalized_weight, quantize_activation


class ModelSpecError(ContractError):
    pass


class FullPrecision:
    act_bits = None

    def begin(self, batch_size: int):
        pass

    def weight(self, layer) -> Tensor:
        return normalized_weight(layer.weight)


@dataclass
class BranchMix:
    """Per-sample mix of two weight branches; the layer runs both."""
    choice: Tensor      # shape (batch,)
    upper: Tensor
    lower: Tensor


class Layer:
    kind = "layer"

    def __init__(self, name: str, block: int):
        self.name = name
        self.block = block
        self.weight: Tensor
        self.bias: Tensor

    @property
    def params(self) -> int:
        return self.weight.size

    @property
    def rows(self) -> int:
        return self.weight.shape[0]

    def _linear(self, x: Tensor, w: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, w) -> Tensor:
        if isinstance(w, BranchMix):
            hi = self._linear(x, w.upper)
            lo = self._linear(x, w.lower)
            c = reshape(w.choice, (-1,) + (1,) * (hi.ndim - 1))
            return c * hi + (1.0 - c) * lo
        return self._linear(x, w)


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, n_in, n_out, rng, block=0):
        super().__init__(name, block)
        self.n_in, self.n_out = n_in, n_out
        self.weight = Tensor(rng.normal(0.0, 1.0 / math.sqrt(n_in), (n_out, n_in)),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.bias")
        self.gain = 1.0 / math.sqrt(n_in)

    def _linear(self, x, w):
        return (x @ w.T) * self.gain + self.bias


class Conv(Layer):
    kind = "conv"

    def __init__(self, name, c_in, c_out, k, rng, stride=1, padding=None, block=0):
        super().__init__(name, block)
        fan_in = c_in * k * k
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (c_out, c_in, k, k)),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.bias")
        self.gain = 1.0 / math.sqrt(fan_in)

    def _linear(self, x, w):
        y = conv2d(x, w, self.stride, self.padding) * self.gain
        return y + reshape(self.bias, (1, -1, 1, 1))

    def out_hw(self, h, w):
        k = self.weight.shape[2]
        return ((h + 2 * self.padding - k) // self.stride + 1,
                (w + 2 * self.padding - k) // self.stride + 1)


class Model:
    """Base class: ordered quantizable layers, first and last pinned."""

    def __init__(self, spec: "ModelSpec"):
        self.spec = spec
        self.layers: list[Layer] = []
        self.pinned: set[str] = set()
        self.act_peak: dict[str, float] = {}

    def _finish(self):
        if self.layers:
            self.pinned = {self.layers[0].name, self.layers[-1].name}

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out += [layer.weight, layer.bias]
        return out

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def _track(self, name, t: Tensor):
        self.act_peak[name] = float(np.max(np.abs(t.data))) if t.size else 0.0

    def _act(self, h: Tensor, quant) -> Tensor:
        return quantize_activation(h, quant.act_bits)

    def forward(self, x, quant=None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, quant=None) -> Tensor:
        quant = quant or FullPrecision()
        x = x if isinstance(x, Tensor) else Tensor(x)
        quant.begin(x.shape[0])
        return self.forward(x, quant)

    def layer_meta(self) -> list[LayerMeta]:
        raise NotImplementedError

    def state(self) -> list[tuple[str, np.ndarray]]:
        return [(p.name, p.data) for p in self.parameters()]

    def load_state(self, items):
        params = {p.name: p for p in self.parameters()}
        for name, arr in items:
            if name not in params:
                raise ContractError(f"unknown parameter {name!r}")
            if params[name].shape != np.shape(arr):
                raise ContractError(f"shape mismatch for {name}: {np.shape(arr)} vs {params[name].shape}")
            params[name].data = np.array(arr, dtype=np.float64)

    def copy(self) -> "Model":
        clone = build_model(self.spec)
        clone.load_state([(n, a.copy()) for n, a in self.state()])
        return clone


class MLP(Model):
    def __init__(self, spec, rng):
        super().__init__(spec)
        sizes = spec.sizes
        for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
            self.layers.append(Dense(f"fc{i}", a, b, rng, block=i))
        self._finish()

    def forward(self, x, quant):
        h = x
        for layer in self.layers[:-1]:
            h = layer(h, quant.weight(layer))
            self._track(layer.name, h)
            h = self._act(h, quant)
        last = self.layers[-1]
        out = last(h, quant.weight(last))
        self._track(last.name, out)
        return out

    def layer_meta(self):
        return [LayerMeta(l.name, "dense", l.params, 1, 1, 1) for l in self.layers]


class ConstantStub(MLP):
    """MLP whose logits are identically zero, so the task loss is constant."""

    def forward(self, x, quant):
        return super().forward(x, quant) * 0.0


class ResNetToy(Model):
    """Channel-scaled ResNet: stem, stages of basic blocks, pooled classifier."""

    def __init__(self, spec, rng):
        super().__init__(spec)
        c_in, h, w = spec.in_shape
        widths = spec.widths
        self.stem = Conv("stem", c_in, widths[0], 3, rng, block=0)
        self.layers.append(self.stem)
        self.blocks = []
        c = widths[0]
        block_id = 1
        for s, width in enumerate(widths):
            for j in range(spec.blocks):
                stride = 2 if (s > 0 and j == 0) else 1
                name = f"s{s}b{j}"
                conv1 = Conv(f"{name}.conv1", c, width, 3, rng, stride=stride, block=block_id)
                conv2 = Conv(f"{name}.conv2", width, width, 3, rng, block=block_id)
                short = None
                if stride != 1 or c != width:
                    short = Conv(f"{name}.short", c, width, 1, rng, stride=stride, padding=0,
                                 block=block_id)
                self.blocks.append((conv1, conv2, short))
                self.layers += [l for l in (conv1, conv2, short) if l is not None]
                c = width
                block_id += 1
        self.fc = Dense("fc", c, spec.classes, rng, block=block_id)
        self.layers.append(self.fc)
        self._finish()

    def _apply(self, layer, h, quant):
        out = layer(h, quant.weight(layer))
        self._track(layer.name, out)
        return out

    def forward(self, x, quant):
        h = self._act(self._apply(self.stem, x, quant), quant)
        for conv1, conv2, short in self.blocks:
            y = self._act(self._apply(conv1, h, quant), quant)
            y = self._apply(conv2, y, quant)
            skip = h if short is None else self._apply(short, h, quant)
            h = self._act(y + skip, quant)
        pooled = mean(h, axis=(2, 3))
        return self._apply(self.fc, pooled, quant)

    def layer_meta(self):
        _, h, w = self.spec.in_shape
        metas = [LayerMeta("stem", "conv", self.stem.params, w, h, 1)]
        for conv1, conv2, short in self.blocks:
            h1, w1 = conv1.out_hw(h, w)
            metas.append(LayerMeta(conv1.name, "conv", conv1.params, w, h, conv1.stride))
            metas.append(LayerMeta(conv2.name, "conv", conv2.params, w1, h1, 1))
            if short is not None:
                metas.append(LayerMeta(short.name, "conv", short.params, w, h, short.stride))
            h, w = h1, w1
        metas.append(LayerMeta("fc", "dense", self.fc.params, 1, 1, 1))
        order = {l.name: i for i, l in enumerate(self.layers)}
        return sorted(metas, key=lambda m: order[m.name])


@dataclass(frozen=True)
class ModelSpec:
    """Parsed model description.

    String forms::

        mlp:2-32-32-32-4
        stub:2-16-16-4
        resnet:in=1x8x8,widths=4-8-16,blocks=1,classes=4
    """
    kind: str
    sizes: tuple = ()
    in_shape: tuple = ()
    widths: tuple = ()
    blocks: int = 1
    classes: int = 0
    seed: int = 0

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "ModelSpec":
        text = text.strip()
        kind, sep, body = text.partition(":")
        if not sep:
            raise ModelSpecError(f"model spec {text!r}: expected '<kind>:<body>'")
        if kind in ("mlp", "stub"):
            if not re.fullmatch(r"\d+(-\d+)+", body):
                raise ModelSpecError(f"model spec {text!r}: expected sizes like 2-32-4")
            sizes = tuple(int(s) for s in body.split("-"))
            if any(s < 1 for s in sizes):
                raise ModelSpecError(f"model spec {text!r}: sizes must be positive")
            return cls(kind, sizes=sizes, classes=sizes[-1], seed=seed)
        if kind == "resnet":
            fields = {}
            for part in body.split(","):
                key, eq, val = part.partition("=")
                if not eq:
                    raise ModelSpecError(f"model spec {text!r}: bad field {part!r}")
                fields[key.strip()] = val.strip()
            try:
                in_shape = tuple(int(v) for v in fields.pop("in").split("x"))
                widths = tuple(int(v) for v in fields.pop("widths").split("-"))
                blocks = int(fields.pop("blocks", "1"))
                classes = int(fields.pop("classes"))
            except (KeyError, ValueError) as exc:
                raise ModelSpecError(f"model spec {text!r}: {exc}") from None
            if fields:
                raise ModelSpecError(f"model spec {text!r}: unknown fields {sorted(fields)}")
            if len(in_shape) != 3:
                raise ModelSpecError(f"model spec {text!r}: input must be CxHxW")
            return cls("resnet", in_shape=in_shape, widths=widths, blocks=blocks,
                       classes=classes, seed=seed)
        raise ModelSpecError(f"model spec {text!r}: unknown kind {kind!r}")

    def __str__(self):
        if self.kind in ("mlp", "stub"):
            return f"{self.kind}:" + "-".join(map(str, self.sizes))
        shape = "x".join(map(str, self.in_shape))
        widths = "-".join(map(str, self.widths))
        return f"resnet:in={shape},widths={widths},blocks={self.blocks},classes={self.classes}"


def build_model(spec, seed: int | None = None) -> Model:
    """Deterministically construct a model; weights ~ N(0, 1/fan_in)."""
    if isinstance(spec, str):
        spec = ModelSpec.parse(spec, seed or 0)
    elif seed is not None:
        spec = ModelSpec(spec.kind, spec.sizes, spec.in_shape, spec.widths, spec.blocks,
                         spec.classes, seed)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "mlp":
        return MLP(spec, rng)
    if spec.kind == "stub":
        return ConstantStub(spec, rng)
    if spec.kind == "resnet":
        return ResNetToy(spec, rng)
    raise ModelSpecError(f"unknown model kind {spec.kind!r}")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    return -mean(picked)
