"""Quantization-aware training at a fixed strategy with distillation and
entropy-aware bin regularization (EBR).

Bins live in the quantizer's [-1, 1] domain: a weight's real value is its
unrounded normalized value ``w_hat`` and its bin is the grid level it
rounds to.  EBR pulls each bin's mean onto its level and shrinks each bin's
variance, while the weight normalization spreads weights evenly over bins.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .data import batches
from .gradcore import (ContractError, NumericalAbort, Tape, Tensor, _as_array, _lift, backward,
                       getitem, l1_norm, log_softmax, no_grad, quantize_grid, reshape,
                       segment_sum, tsum)
from .optim import make_optimizer, scheduled_lr
from .quantizers import is_passthrough, levels, quantize_unit, unit_transform

DEFAULT_VAR_MIN_COUNT = 3


def _scale(b: int, n: int) -> float:
    return 2.0 ** (b - 1) / (2.0 ** b - 1) * n


def normalize_weights(w, b: int) -> Tensor:
    """(2^(b-1) / (2^b - 1)) * (n / ||w||_1) * w; the mean |output| is
    2^(b-1) / (2^b - 1).  All-zero input is returned unchanged."""
    w = _lift(w)
    if not np.any(w.data):
        return w
    return w * _scale(b, w.size) / l1_norm(w)


def normalize_weights_np(w: np.ndarray, b: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    norm = np.abs(w).sum()
    if norm == 0:
        return w
    return w * _scale(b, w.size) / norm


def kd_loss(teacher_logits, student_logits: Tensor) -> Tensor:
    """Mean over samples of the cross-entropy from teacher to student
    distributions; the teacher side is constant."""
    t = _as_array(teacher_logits)
    s = _lift(student_logits)
    if t.shape != s.shape:
        raise ContractError(f"logit shapes differ: {t.shape} vs {s.shape}")
    if np.isnan(t).any() or np.isnan(s.data).any():
        raise NumericalAbort("NaN logits in distillation loss")
    z = t - t.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return -tsum(log_softmax(s, axis=-1) * p) * (1.0 / t.shape[0])


# ------------------------------------------------------------------- bins

def grid_levels(b: int) -> np.ndarray:
    """The 2^b output levels of the b-bit weight quantizer, ascending."""
    L = levels(b)
    return np.arange(L + 1) * (2.0 / L) - 1.0


def bin_index(values, b: int) -> np.ndarray:
    """Nearest grid level per value; exact midpoints go to the higher level."""
    L = levels(b)
    u = (np.asarray(values, dtype=np.float64).ravel() + 1.0) * 0.5
    return np.clip(K.round_half_away(u * L), 0, L).astype(np.int64)


@dataclass
class BinHistogram:
    bits: int
    levels: np.ndarray
    counts: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    index: np.ndarray

    @property
    def proportions(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def bin_assign(values, b: int) -> BinHistogram:
    v = _as_array(values).ravel()
    idx = bin_index(v, b)
    nb = levels(b) + 1
    counts = np.bincount(idx, minlength=nb).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    means = K.segment_sum(v, idx, nb) / safe
    dev = v - means[idx]
    variances = K.segment_sum(dev * dev, idx, nb) / safe
    return BinHistogram(b, grid_levels(b), counts, means, variances, idx)


def bin_entropy(h: BinHistogram) -> float:
    """Shannon entropy (nats) of the bin occupancy, 0 log 0 = 0."""
    p = h.proportions
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def ebr_terms(values: Tensor, b: int, var_min_count: int = DEFAULT_VAR_MIN_COUNT) -> Tensor:
    """EBR for one weight group: per occupied bin (mean - level)^2, plus the
    bin variance for bins with at least ``var_min_count`` members."""
    values = _lift(values)
    flat = reshape(values, (-1,))
    idx = bin_index(flat.data, b)
    nb = levels(b) + 1
    counts = np.bincount(idx, minlength=nb).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    occupied = (counts > 0).astype(np.float64)
    var_mask = (counts >= var_min_count).astype(np.float64)
    means = segment_sum(flat, idx, nb) * (1.0 / safe)
    gap = means - grid_levels(b)
    mse = tsum(gap * gap * occupied)
    dev = flat - getitem(means, idx)
    var = segment_sum(dev * dev, idx, nb) * (1.0 / safe)
    return mse + tsum(var * var_mask)


def ebr_loss(groups, var_min_count: int = DEFAULT_VAR_MIN_COUNT) -> Tensor:
    """Sum of :func:`ebr_terms` over ``(values, bits)`` pairs."""
    total = None
    for values, b in groups:
        term = ebr_terms(values, b, var_min_count)
        total = term if total is None else total + term
    return Tensor(0.0) if total is None else total


def summed_bin_variance(groups, var_min_count: int = DEFAULT_VAR_MIN_COUNT) -> float:
    total = 0.0
    for values, b in groups:
        h = bin_assign(values, b)
        total += float(np.sum(h.variances[h.counts >= var_min_count]))
    return total


# -------------------------------------------------------------- quantizer

class FixedWeights:
    """Deterministic quantizer at a fixed strategy.

    Records each layer's real values (``w_hat``) and bitwidth for EBR in
    ``groups`` during a forward pass.
    """

    def __init__(self, strategy, normalize: bool = True):
        self.strategy = strategy
        self.assign = strategy.by_name()
        self.act_bits = strategy.activation_bits
        self.normalize = normalize
        self.groups: list[tuple[Tensor, int]] = []

    def begin(self, batch_size: int):
        self.groups = []

    def weight(self, layer):
        a = self.assign.get(layer.name)
        if a is None:
            raise ContractError(f"strategy has no entry for layer {layer.name!r}")
        w = layer.weight
        if a.row_bits is None:
            return self._uniform(w, a.bits)
        return self._rows(w, np.array(a.row_bits))

    def _uniform(self, w, b):
        if is_passthrough(b):
            return unit_transform(w) * 2.0 - 1.0
        if not np.any(w.data):
            return w * 0.0
        if self.normalize:
            w = normalize_weights(w, b)
        u = unit_transform(w)
        self.groups.append((u * 2.0 - 1.0, b))
        return quantize_unit(u, b) * 2.0 - 1.0

    def _rows(self, w, row_bits):
        if not np.any(w.data):
            return w * 0.0
        if self.normalize:
            w = normalize_weights(w, int(row_bits.max()))
        u = unit_transform(w)
        real = u * 2.0 - 1.0
        shape = (-1,) + (1,) * (w.ndim - 1)
        out = None
        for b in sorted(set(row_bits.tolist())):
            rows = np.flatnonzero(row_bits == b)
            self.groups.append((getitem(real, rows), int(b)))
            mask = Tensor((row_bits == b).astype(np.float64).reshape(shape))
            term = (quantize_grid(u, levels(b)) * 2.0 - 1.0) * mask
            out = term if out is None else out + term
        return out


# ---------------------------------------------------------------- training

@dataclass(frozen=True)
class Phase2Config:
    epochs: int = 30
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 0.003
    lr_schedule: str = "cosine"
    milestones: tuple = ()
    weight_decay: float = 0.0
    lambda_e: float = 5e-2
    var_min_count: int = DEFAULT_VAR_MIN_COUNT
    normalize_weights: bool = True
    init: str = "teacher"

    def __post_init__(self):
        if self.lambda_e < 0:
            raise ContractError("lambda_e must be >= 0")
        if self.epochs < 1:
            raise ContractError("phase2 epochs must be >= 1")
        if self.init not in ("teacher", "phase1"):
            raise ContractError(f"phase2 init must be 'teacher' or 'phase1', got {self.init!r}")


def accuracy(model, x, y, quant=None, batch_size: int = 512) -> float:
    correct = 0
    with no_grad():
        for start in range(0, len(y), batch_size):
            logits = model(x[start:start + batch_size], quant)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y[start:start + batch_size]))
    return correct / len(y)


class Phase2Trainer:
    def __init__(self, student, teacher, strategy, cfg: Phase2Config):
        self.student = student
        self.teacher = teacher
        self.cfg = cfg
        self.quant = FixedWeights(strategy, cfg.normalize_weights)
        self.opt = make_optimizer(cfg.optimizer, student.parameters(), cfg.lr, cfg.weight_decay)
        self.epoch = 0

    def step(self, x, y=None) -> dict:
        """One step of KD + lambda_e * EBR; labels are not used."""
        with no_grad():
            t_logits = self.teacher(x).data
        with Tape():
            s_logits = self.student(Tensor(x), self.quant)
            kd = kd_loss(t_logits, s_logits)
            ebr = ebr_loss(self.quant.groups, self.cfg.var_min_count)
            loss = kd + ebr * self.cfg.lambda_e
            if not np.isfinite(loss.data):
                peak = max(self.student.act_peak, key=self.student.act_peak.get)
                raise NumericalAbort(
                    f"non-finite phase-2 loss; largest activation in layer {peak} "
                    f"({self.student.act_peak[peak]:.6g})")
            backward(loss)
        self.opt.step()
        self.opt.zero_grad()
        return {"kd_loss": float(kd.data), "ebr": float(ebr.data), "loss": float(loss.data)}

    def bin_variance(self) -> float:
        with no_grad():
            self.quant.begin(0)
            for layer in self.student.layers:
                self.quant.weight(layer)
        return summed_bin_variance(self.quant.groups, self.cfg.var_min_count)

    def run_epoch(self, x, y, shuffle_rng) -> dict:
        cfg = self.cfg
        self.opt.lr = scheduled_lr(cfg.lr, cfg.lr_schedule, self.epoch, cfg.epochs, cfg.milestones)
        sums = {"kd_loss": 0.0, "ebr": 0.0, "loss": 0.0}
        nb = 0
        for idx in batches(len(x), cfg.batch_size, shuffle_rng):
            rec = self.step(x[idx])
            for k in sums:
                sums[k] += rec[k]
            nb += 1
        self.epoch += 1
        record = {"phase": "phase2", "epoch": self.epoch, "lr": self.opt.lr}
        record.update({k: v / nb for k, v in sums.items()})
        record["bin_variance"] = self.bin_variance()
        return record

    def fit(self, x, y=None, shuffle_seed: int = 0, on_epoch=None):
        shuffle_rng = np.random.default_rng(shuffle_seed)
        for _ in range(self.cfg.epochs):
            record = self.run_epoch(x, y, shuffle_rng)
            if on_epoch is not None:
                on_epoch(record)
        return self.student
