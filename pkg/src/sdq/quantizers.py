"""Uniform quantizers with straight-through gradients.

All rounding is half-away-from-zero.  Bitwidths of ``None`` or >= 32 mean
passthrough (no rounding), which is how full-precision forwards share code
with quantized ones.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .gradcore import ContractError, Tensor, _as_array, _lift, clamp, max_abs, quantize_grid, tanh

PASSTHROUGH_BITS = 32
_RANGE_TOL = 1e-12


def is_passthrough(b) -> bool:
    return b is None or b >= PASSTHROUGH_BITS


def _check_bits(b):
    if int(b) != b or b < 1:
        raise ContractError(f"bitwidth must be an integer >= 1, got {b!r}")


def levels(b: int) -> int:
    """Number of grid steps, 2^b - 1."""
    return (1 << int(b)) - 1


def quantize_unit(x, b: int) -> Tensor:
    """b-bit uniform quantizer on [0, 1] with identity backward."""
    _check_bits(b)
    x = _lift(x)
    lo, hi = float(x.data.min(initial=0.0)), float(x.data.max(initial=1.0))
    if lo < -_RANGE_TOL or hi > 1.0 + _RANGE_TOL:
        raise ContractError(f"quantize_unit input outside [0, 1]: range [{lo}, {hi}]")
    return quantize_grid(x, levels(b))


def unit_transform(w) -> Tensor:
    """Map weights into [0, 1] via tanh(w) / (2 max|tanh(w)|) + 1/2."""
    t = tanh(_lift(w))
    m = max_abs(t)
    return t / (m * 2.0) + 0.5


def quantize_weight(w, b) -> Tensor:
    """DoReFa weight quantizer into [-1, 1].

    An all-zero tensor quantizes to zeros.  ``b`` of ``None`` returns the
    unrounded normalized weight ``tanh(w) / max|tanh(w)|``.
    """
    w = _lift(w)
    if not np.any(w.data):
        return w * 0.0
    u = unit_transform(w)
    if is_passthrough(b):
        return u * 2.0 - 1.0
    return quantize_unit(u, b) * 2.0 - 1.0


def normalized_weight(w) -> Tensor:
    """The real-valued weight in the quantizer's [-1, 1] domain."""
    return quantize_weight(w, None)


def quantize_weight_np(w: np.ndarray, b) -> np.ndarray:
    """Value-only version of :func:`quantize_weight` (no tape)."""
    w = np.asarray(w, dtype=np.float64)
    t = np.tanh(w)
    m = np.abs(t).max() if t.size else 0.0
    if m == 0:
        return np.zeros_like(w)
    u = t / (m * 2.0) + 0.5
    if is_passthrough(b):
        return u * 2.0 - 1.0
    return K.quantize_grid(u, float(levels(b))) * 2.0 - 1.0


def quantize_activation(x, b) -> Tensor:
    """Clip to [0, 1] then quantize; the clip masks gradients outside."""
    y = clamp(_lift(x), 0.0, 1.0)
    if is_passthrough(b):
        return y
    return quantize_unit(y, b)


@dataclass(frozen=True)
class ClampQuantizer:
    bits: int
    lower: float
    upper: float

    def __post_init__(self):
        _check_bits(self.bits)
        if not self.lower < self.upper:
            raise ContractError(f"need lower < upper, got [{self.lower}, {self.upper}]")

    @property
    def delta(self) -> float:
        return self.upper - self.lower

    @property
    def n_levels(self) -> int:
        return 1 << self.bits

    @property
    def step(self) -> float:
        return self.delta / (self.n_levels - 1)


def quantize_clamped(w, q: ClampQuantizer) -> np.ndarray:
    """s * round(clamp(w, lower, upper) / s), grid anchored at zero."""
    w = np.clip(_as_array(w), q.lower, q.upper)
    return q.step * K.round_half_away(w / q.step)


def quant_error_sq(wq, wr) -> float:
    """Squared L2 norm of the quantization error."""
    a, b = _as_array(wq), _as_array(wr)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    d = a - b
    return float(np.sum(d * d))


def expected_error_coeff(b: int) -> float:
    """C(b) = 1 / (12 (2^b - 1)^2): E[err^2] / range^2 for uniform inputs."""
    _check_bits(b)
    return 1.0 / (12.0 * levels(b) ** 2)
