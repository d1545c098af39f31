"""Full-precision training, used for the teacher and the accuracy baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import batches
from .gradcore import ContractError, NumericalAbort, Tape, Tensor, backward
from .models import FullPrecision, Model, cross_entropy
from .optim import make_optimizer, scheduled_lr


@dataclass(frozen=True)
class FpConfig:
    epochs: int = 60
    batch_size: int = 64
    optimizer: str = "adam"
    lr: float = 0.01
    lr_schedule: str = "cosine"
    milestones: tuple = ()
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("fp epochs must be >= 1")


def fit_full_precision(model: Model, x, y, cfg: FpConfig, shuffle_seed: int = 0, on_epoch=None):
    opt = make_optimizer(cfg.optimizer, model.parameters(), cfg.lr, cfg.weight_decay)
    rng = np.random.default_rng(shuffle_seed)
    quant = FullPrecision()
    for epoch in range(cfg.epochs):
        opt.lr = scheduled_lr(cfg.lr, cfg.lr_schedule, epoch, cfg.epochs, cfg.milestones)
        total, correct, nb = 0.0, 0, 0
        for idx in batches(len(y), cfg.batch_size, rng):
            with Tape():
                logits = model(Tensor(x[idx]), quant)
                loss = cross_entropy(logits, y[idx])
                if not np.isfinite(loss.data):
                    raise NumericalAbort(f"non-finite full-precision loss at epoch {epoch + 1}")
                backward(loss)
            opt.step()
            opt.zero_grad()
            total += float(loss.data)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y[idx]))
            nb += 1
        if on_epoch is not None:
            on_epoch({"phase": "fp", "epoch": epoch + 1, "lr": opt.lr, "loss": total / nb,
                      "train_acc": correct / len(y)})
    return model
