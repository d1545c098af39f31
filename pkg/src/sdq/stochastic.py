"""Differentiable bitwidth parameters and the stochastic bitwidth quantizer.

Each quantization unit (normally one layer) owns a row of DBPs, one per
candidate bitwidth, and an active index ``i``.  A forward pass quantizes
the unit at ``B[i]`` with probability ``beta[i]`` and at ``B[i-1]``
otherwise; the choice is a straight-through Gumbel-softmax sample, so the
forward value is a hard 0/1 and the gradient flows through the soft
relaxation to ``beta``.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .gradcore import ContractError, Tensor, _lift, clamp, getitem, log, sigmoid, straight_through
from .quantizers import quantize_weight

BETA_EPS = 1e-6


@dataclass(frozen=True)
class GumbelConfig:
    tau: float = 1.0
    seed: int = 0
    hard: bool = True          # False: pure soft relaxation (ablation)
    per_sample: bool = False   # one choice per batch row instead of per batch

    def __post_init__(self):
        if not self.tau > 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")


class DbpTable:
    """Per-unit DBP rows plus each unit's active candidate index."""

    def __init__(self, units, candidates, pinned=()):
        candidates = tuple(int(b) for b in candidates)
        if not candidates or any(b2 <= b1 for b1, b2 in zip(candidates, candidates[1:])):
            raise ContractError(f"candidates must be strictly increasing, got {candidates}")
        self.units = list(units)
        self.candidates = candidates
        self.pinned = set(pinned)
        self.beta = Tensor(np.ones((len(self.units), len(candidates))), requires_grad=True,
                           name="dbp")
        self.active_index = np.full(len(self.units), len(candidates) - 1, dtype=np.int64)
        self.stats: Counter = Counter()

    def index(self, unit) -> int:
        return self.units.index(unit) if not isinstance(unit, (int, np.integer)) else int(unit)

    def bits(self, unit) -> int:
        return self.candidates[self.active_index[self.index(unit)]]

    def lower_bits(self, unit) -> int | None:
        i = self.active_index[self.index(unit)]
        return self.candidates[i - 1] if i >= 1 else None

    def active_beta(self, unit) -> Tensor:
        g = self.index(unit)
        return getitem(self.beta, (g, int(self.active_index[g])))

    def beta_value(self, unit) -> float:
        g = self.index(unit)
        return float(self.beta.data[g, self.active_index[g]])

    def clamp_(self):
        np.clip(self.beta.data, BETA_EPS, 1.0, out=self.beta.data)

    def snapshot(self) -> dict:
        return {
            "bits": {str(u): self.bits(u) for u in self.units},
            "beta": {str(u): self.beta_value(u) for u in self.units},
        }


def gumbel_from_uniform(u):
    return -np.log(-np.log(u))


def _open_uniform(rng: np.random.Generator, size=None):
    u = rng.random(size)
    # random() draws from [0, 1); zero is the only excluded endpoint to fix
    while np.any(u == 0.0):
        u = np.where(u == 0.0, rng.random(size), u)
    return u


def sample_gumbel(rng: np.random.Generator, size=None):
    """Gumbel(0, 1) draw(s) by inversion of an open-interval uniform."""
    return gumbel_from_uniform(_open_uniform(rng, size))


def soft_choice_value(beta, g0, g1, tau: float):
    """Relaxed Bernoulli sample as a plain float/array (no tape)."""
    a0 = (np.log(beta) + g0) / tau
    a1 = (np.log1p(-np.asarray(beta)) + g1) / tau
    return 1.0 / (1.0 + np.exp(a1 - a0))


def soft_choice(beta, tau: float, rng: np.random.Generator | None = None, *, size=None,
                noise=None, hard: bool = True, stats: Counter | None = None) -> Tensor:
    """Straight-through Gumbel-softmax choice between upper and lower branch.

    The soft value is ``sigmoid(((log b + g0) - (log(1-b) + g1)) / tau)``,
    the forward value (``hard=True``) is ``soft >= 0.5``.  ``noise`` freezes
    the Gumbel pair ``(g0, g1)``.  ``beta`` outside ``(eps, 1 - eps)`` is
    clipped before the logs with a pass-through gradient; clips are counted
    in ``stats["beta_clamped"]``.
    """
    beta = _lift(beta)
    if noise is None:
        if size is None and beta.ndim:
            size = beta.shape
        g0 = sample_gumbel(rng, size)
        g1 = sample_gumbel(rng, size)
    else:
        g0, g1 = noise
    lo, hi = BETA_EPS, 1.0 - BETA_EPS
    if stats is not None and np.any((beta.data < lo) | (beta.data > hi)):
        stats["beta_clamped"] += 1
    b = clamp(beta, lo, hi, straight_through=True)
    logit = (log(b) + g0 - log(1.0 - b) - g1) * (1.0 / tau)
    soft = sigmoid(logit)
    if not hard:
        return soft
    return straight_through((soft.data >= 0.5).astype(np.float64), soft)


def stochastic_quantize(w, unit, dbp: DbpTable, cfg: GumbelConfig, rng: np.random.Generator,
                        choice: Tensor | None = None) -> Tensor:
    """Quantize ``w`` at the unit's active bitwidth or the one below it.

    At the lowest candidate the unit is deterministic.  ``choice`` lets a
    caller share one draw across several layers of the same unit.
    """
    w = _lift(w)
    lower = dbp.lower_bits(unit)
    upper = dbp.bits(unit)
    if lower is None:
        return quantize_weight(w, upper)
    if choice is None:
        choice = soft_choice(dbp.active_beta(unit), cfg.tau, rng, hard=cfg.hard, stats=dbp.stats)
    q_hi = quantize_weight(w, upper)
    q_lo = quantize_weight(w, lower)
    return choice * q_hi + (1.0 - choice) * q_lo
