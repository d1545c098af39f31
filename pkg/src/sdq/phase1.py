"""Strategy generation: joint training of weights and DBPs, then bitwidth decay.

Each step minimizes ``task + lambda_q * qer``.  Weights see only the task
loss (the regularizer is evaluated on detached weights); DBPs see both.
After every epoch (or step, if configured) any unit whose active DBP fell
below the threshold moves one candidate down.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import batches
from .gradcore import (ContractError, NumericalAbort, Tape, Tensor, backward, getitem, reshape, tsum)
from .models import BranchMix, Model, cross_entropy
from .optim import make_optimizer, scheduled_lr
from .phase2 import normalize_weights, normalize_weights_np
from .quantizers import levels, quantize_weight, quantize_weight_np
from .stochastic import DbpTable, GumbelConfig, soft_choice, stochastic_quantize
from .strategy import LayerAssignment, MpqStrategy

GRANULARITIES = ("net", "block", "layer", "kernel")


@dataclass(frozen=True)
class Phase1Config:
    epochs: int = 30
    batch_size: int = 64
    optimizer: str = "sgd"
    lr: float = 0.05
    beta_lr: float = 0.0          # 0 means "same as lr"
    lr_schedule: str = "constant"
    milestones: tuple = ()
    weight_decay: float = 0.0
    lambda_q: float = 1e-3
    beta_threshold: float = 1e-4
    candidates: tuple = (2, 3, 4, 5, 6, 7, 8)
    pinned_bits: int = 8
    activation_bits: int = 4
    decay_cadence: str = "epoch"
    normalize_weights: bool = False

    def __post_init__(self):
        if not 0 < self.beta_threshold < 1:
            raise ContractError("beta_threshold must lie in (0, 1)")
        if self.epochs < 1:
            raise ContractError("phase1 epochs must be >= 1")
        if self.lambda_q < 0:
            raise ContractError("lambda_q must be >= 0")
        if self.decay_cadence not in ("epoch", "step"):
            raise ContractError(f"decay_cadence must be 'epoch' or 'step', got {self.decay_cadence!r}")


@dataclass(frozen=True)
class Unit:
    """A group of weights sharing one DBP row: (layer name, row or None) pairs."""
    name: str
    members: tuple


def build_units(model: Model, granularity: str = "layer") -> list[Unit]:
    free = [l for l in model.layers if l.name not in model.pinned]
    if granularity == "layer":
        return [Unit(l.name, ((l.name, None),)) for l in free]
    if granularity == "net":
        return [Unit("net", tuple((l.name, None) for l in free))] if free else []
    if granularity == "block":
        groups: dict[int, list] = {}
        for l in free:
            groups.setdefault(l.block, []).append((l.name, None))
        return [Unit(f"block{b}", tuple(m)) for b, m in groups.items()]
    if granularity == "kernel":
        return [Unit(f"{l.name}[{r}]", ((l.name, r),)) for l in free for r in range(l.rows)]
    raise ContractError(f"unknown granularity {granularity!r}; expected one of {GRANULARITIES}")


class StochasticWeights:
    """Quantizer used during strategy generation."""

    def __init__(self, model, dbp: DbpTable, units, gumbel: GumbelConfig, rng,
                 pinned_bits: int, act_bits: int, normalize: bool = False):
        self.model = model
        self.dbp = dbp
        self.gumbel = gumbel
        self.rng = rng
        self.pinned_bits = pinned_bits
        self.act_bits = act_bits
        self.normalize = normalize
        self.kernel = any(row is not None for u in units for _, row in u.members)
        if self.kernel and gumbel.per_sample:
            raise ContractError("per-sample choices are not supported at kernel granularity")
        self.layer_units: dict[str, list[int]] = {}
        for g, unit in enumerate(units):
            for name, _ in unit.members:
                self.layer_units.setdefault(name, []).append(g)
        self._choices: dict[int, Tensor] = {}
        self._n = 0

    def begin(self, batch_size: int):
        self._choices = {}
        self._n = batch_size

    def _choice(self, g: int) -> Tensor:
        if g not in self._choices:
            size = (self._n,) if self.gumbel.per_sample else None
            self._choices[g] = soft_choice(self.dbp.active_beta(g), self.gumbel.tau, self.rng,
                                           size=size, hard=self.gumbel.hard,
                                           stats=self.dbp.stats)
        return self._choices[g]

    def weight(self, layer):
        w = layer.weight
        if layer.name in self.model.pinned:
            return quantize_weight(w, self.pinned_bits)
        gs = self.layer_units[layer.name]
        if self.kernel:
            return self._kernel_weight(w, np.array(gs))
        g = gs[0]
        upper, lower = self.dbp.bits(g), self.dbp.lower_bits(g)
        if self.normalize:
            w = normalize_weights(w, upper)
        if lower is None:
            return quantize_weight(w, upper)
        if self.gumbel.per_sample:
            return BranchMix(self._choice(g), quantize_weight(w, upper), quantize_weight(w, lower))
        return stochastic_quantize(w, g, self.dbp, self.gumbel, self.rng, choice=self._choice(g))

    def _kernel_weight(self, w, ids):
        cands = np.array(self.dbp.candidates)
        act = self.dbp.active_index[ids].copy()
        upper = cands[act]
        lower = np.where(act > 0, cands[np.maximum(act - 1, 0)], 0)
        det = act == 0
        if self.normalize:
            w = normalize_weights(w, int(upper.max()))
        betas = getitem(self.dbp.beta, (ids, act))
        c = soft_choice(betas, self.gumbel.tau, self.rng, hard=self.gumbel.hard,
                        stats=self.dbp.stats)
        shape = (-1,) + (1,) * (w.ndim - 1)
        out = None
        for b in sorted(set(upper.tolist()) | set(lower[~det].tolist())):
            hi = ((upper == b) & ~det).astype(np.float64)
            lo = ((lower == b) & ~det).astype(np.float64)
            fixed = ((upper == b) & det).astype(np.float64)
            coef = c * hi + (1.0 - c) * lo + fixed
            term = reshape(coef, shape) * quantize_weight(w, int(b))
            out = term if out is None else out + term
        return out


def qer_loss(dbp: DbpTable, model: Model, units, normalize: bool = False) -> Tensor:
    """Sum over units of beta * (2^b - 1)^2 * ||Q_b(w) - w_hat||^2.

    ``w_hat`` is the unrounded normalized weight, the value Q_b rounds.
    Weights enter as constants, so only the DBPs receive gradient.
    """
    coeffs = np.zeros(len(units))
    cache: dict = {}
    for g, unit in enumerate(units):
        b = dbp.bits(g)
        err = 0.0
        for name, row in unit.members:
            key = (name, b)
            if key not in cache:
                w = model.layer(name).weight.data
                if normalize:
                    w = normalize_weights_np(w, b)
                d = quantize_weight_np(w, b) - quantize_weight_np(w, None)
                cache[key] = d * d
            sq = cache[key]
            err += float(sq.sum()) if row is None else float(sq[row].sum())
        coeffs[g] = levels(b) ** 2 * err
    if not units:
        return Tensor(0.0)
    betas = getitem(dbp.beta, (np.arange(len(units)), dbp.active_index.copy()))
    return tsum(betas * coeffs)


def decay_bitwidths(dbp: DbpTable, beta_threshold: float) -> list[tuple]:
    """Move every unit with active DBP strictly below the threshold one
    candidate down; units at the lowest candidate or pinned stay put."""
    changes = []
    for g, unit in enumerate(dbp.units):
        i = int(dbp.active_index[g])
        if unit in dbp.pinned or i == 0:
            continue
        if dbp.beta.data[g, i] < beta_threshold:
            dbp.active_index[g] = i - 1
            changes.append((unit, dbp.candidates[i], dbp.candidates[i - 1]))
    return changes


def extract_strategy(dbp: DbpTable, model: Model, units, pinned_bits: int,
                     activation_bits: int) -> MpqStrategy:
    per_layer: dict[str, dict] = {}
    for g, unit in enumerate(units):
        for name, row in unit.members:
            per_layer.setdefault(name, {})[row] = dbp.bits(g)
    layers = []
    for layer in model.layers:
        if layer.name in model.pinned:
            layers.append(LayerAssignment(layer.name, pinned_bits, layer.params, True))
            continue
        rows = per_layer[layer.name]
        if None in rows:
            layers.append(LayerAssignment(layer.name, rows[None], layer.params))
        else:
            row_bits = tuple(rows[r] for r in range(layer.rows))
            if len(set(row_bits)) == 1:
                layers.append(LayerAssignment(layer.name, row_bits[0], layer.params))
            else:
                layers.append(LayerAssignment(layer.name, max(row_bits), layer.params,
                                              row_bits=row_bits))
    return MpqStrategy(tuple(layers), activation_bits, str(model.spec), tuple(dbp.candidates))


def _grad_norm(tensors) -> float:
    return float(np.sqrt(sum(float(np.sum(t.grad * t.grad)) for t in tensors)))


class Phase1Trainer:
    def __init__(self, model: Model, cfg: Phase1Config, gumbel: GumbelConfig | None = None,
                 granularity: str = "layer", seed: int = 0):
        self.model = model
        self.cfg = cfg
        self.gumbel = gumbel or GumbelConfig(seed=seed)
        self.units = build_units(model, granularity)
        self.dbp = DbpTable([u.name for u in self.units], cfg.candidates)
        self.rng = np.random.default_rng(self.gumbel.seed)
        self.quant = StochasticWeights(model, self.dbp, self.units, self.gumbel, self.rng,
                                       cfg.pinned_bits, cfg.activation_bits,
                                       cfg.normalize_weights)
        self.opt_w = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr, cfg.weight_decay)
        self.opt_b = make_optimizer(cfg.optimizer, [self.dbp.beta], cfg.beta_lr or cfg.lr)
        self.epoch = 0
        self.trajectory: list[dict] = []

    def step(self, x, y) -> dict:
        """One optimizer step on a minibatch; returns loss terms and grad norms."""
        with Tape():
            logits = self.model(Tensor(x), self.quant)
            task = cross_entropy(logits, y)
            qer = qer_loss(self.dbp, self.model, self.units, self.cfg.normalize_weights)
            loss = task + qer * self.cfg.lambda_q
            if not np.isfinite(loss.data):
                peak = max(self.model.act_peak, key=self.model.act_peak.get)
                raise NumericalAbort(
                    f"non-finite phase-1 loss; largest activation in layer {peak} "
                    f"({self.model.act_peak[peak]:.6g})")
            backward(loss)
        correct = int(np.sum(np.argmax(logits.data, axis=1) == y))
        record = {
            "task_loss": float(task.data),
            "qer": float(qer.data),
            "loss": float(loss.data),
            "grad_norm_w": _grad_norm(self.opt_w.params),
            "grad_norm_beta": _grad_norm([self.dbp.beta]),
            "correct": correct,
        }
        self.opt_w.step()
        self.opt_b.step()
        self.dbp.clamp_()
        self.opt_w.zero_grad()
        self.opt_b.zero_grad()
        if self.cfg.decay_cadence == "step":
            record["decays"] = decay_bitwidths(self.dbp, self.cfg.beta_threshold)
        return record

    def layer_bits(self) -> dict:
        strat = self.strategy()
        return {l.name: (l.bits if l.row_bits is None else l.mean_bits) for l in strat.layers}

    def run_epoch(self, x, y, shuffle_rng) -> dict:
        cfg = self.cfg
        lr = scheduled_lr(cfg.lr, cfg.lr_schedule, self.epoch, cfg.epochs, cfg.milestones)
        self.opt_w.lr = lr
        self.opt_b.lr = (cfg.beta_lr or cfg.lr) * lr / cfg.lr
        sums = {"task_loss": 0.0, "qer": 0.0, "loss": 0.0, "grad_norm_w": 0.0,
                "grad_norm_beta": 0.0}
        correct = 0
        decays = []
        nb = 0
        for idx in batches(len(y), cfg.batch_size, shuffle_rng):
            rec = self.step(x[idx], y[idx])
            for k in sums:
                sums[k] += rec[k]
            correct += rec["correct"]
            decays += rec.get("decays", [])
            nb += 1
        if cfg.decay_cadence == "epoch":
            decays += decay_bitwidths(self.dbp, cfg.beta_threshold)
        self.epoch += 1
        strat = self.strategy()
        record = {"phase": "phase1", "epoch": self.epoch, "lr": lr}
        record.update({k: v / nb for k, v in sums.items()})
        record["train_acc"] = correct / len(y)
        record["bits"] = self.layer_bits()
        record["beta"] = {u.name: self.dbp.beta_value(g) for g, u in enumerate(self.units)}
        record["decays"] = [list(d) for d in decays]
        record["avg_weight_bits"] = strat.avg_weight_bits
        record["beta_clamped"] = self.dbp.stats["beta_clamped"]
        self.trajectory.append(dict(record["bits"]))
        return record

    def fit(self, x, y, shuffle_seed: int = 0, on_epoch=None) -> MpqStrategy:
        shuffle_rng = np.random.default_rng(shuffle_seed)
        for _ in range(self.cfg.epochs):
            record = self.run_epoch(x, y, shuffle_rng)
            if on_epoch is not None:
                on_epoch(record)
        return self.strategy()

    def strategy(self) -> MpqStrategy:
        return extract_strategy(self.dbp, self.model, self.units, self.cfg.pinned_bits,
                                self.cfg.activation_bits)
