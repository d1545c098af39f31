"""End-to-end runs: teacher, strategy generation, post-training, evaluation.

A run directory holds everything needed to re-derive its numbers::

    config.ini           the resolved configuration
    teacher.ckpt         full-precision model
    metrics_fp.jsonl     per-epoch teacher metrics
    metrics_phase1.jsonl per-epoch strategy-generation metrics
    phase1.ckpt          weights at the end of strategy generation
    strategy.txt         the mixed-precision strategy
    metrics_phase2.jsonl per-epoch post-training metrics
    model.ckpt           final quantized-trained weights
"""
from __future__ import annotations

import os
from dataclasses import dataclass

from . import config as config_mod
from .config import RunConfig
from .data import gen_dataset
from .io import MetricsLog, load_checkpoint, save_checkpoint
from .models import build_model
from .phase1 import Phase1Trainer
from .phase2 import FixedWeights, Phase2Trainer, accuracy
from .stochastic import GumbelConfig
from .strategy import MpqStrategy
from .training import fit_full_precision


@dataclass
class RunResult:
    fp_accuracy: float | None = None
    accuracy: float | None = None
    strategy: MpqStrategy | None = None
    output_dir: str = ""


def _path(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.run.output_dir, name)


def _model(cfg: RunConfig):
    return build_model(cfg.run.model, cfg.run.seed)


def load_model(cfg: RunConfig, path):
    model = _model(cfg)
    arrays, _ = load_checkpoint(path)
    model.load_state(arrays)
    return model


def run_generate(cfg: RunConfig) -> RunResult:
    """Train the teacher, then generate and save the strategy."""
    os.makedirs(cfg.run.output_dir, exist_ok=True)
    config_mod.save(cfg, _path(cfg, "config.ini"))
    (x, y), (xt, yt) = gen_dataset(cfg.data)
    seed = cfg.run.seed

    teacher = _model(cfg)
    fit_full_precision(teacher, x, y, cfg.fp, shuffle_seed=seed,
                       on_epoch=MetricsLog(_path(cfg, "metrics_fp.jsonl")))
    save_checkpoint(_path(cfg, "teacher.ckpt"), teacher, {"model": cfg.run.model})
    fp_acc = accuracy(teacher, xt, yt)

    model = teacher.copy()
    gumbel = GumbelConfig(cfg.gumbel.tau, seed, cfg.gumbel.hard, cfg.gumbel.per_sample)
    trainer = Phase1Trainer(model, cfg.phase1, gumbel, cfg.run.granularity, seed)
    strategy = trainer.fit(x, y, shuffle_seed=seed,
                           on_epoch=MetricsLog(_path(cfg, "metrics_phase1.jsonl")))
    strategy.save(_path(cfg, "strategy.txt"))
    save_checkpoint(_path(cfg, "phase1.ckpt"), model, {"model": cfg.run.model})
    return RunResult(fp_accuracy=fp_acc, strategy=strategy, output_dir=cfg.run.output_dir)


def run_train(cfg: RunConfig, strategy_path=None, teacher_path=None) -> RunResult:
    """Post-train at a fixed strategy by distilling from the teacher."""
    os.makedirs(cfg.run.output_dir, exist_ok=True)
    strategy = MpqStrategy.load(strategy_path or _path(cfg, "strategy.txt"))
    teacher = load_model(cfg, teacher_path or _path(cfg, "teacher.ckpt"))
    if cfg.phase2.init == "phase1":
        student = load_model(cfg, _path(cfg, "phase1.ckpt"))
    else:
        student = teacher.copy()
    (x, _), (xt, yt) = gen_dataset(cfg.data)
    trainer = Phase2Trainer(student, teacher, strategy, cfg.phase2)
    trainer.fit(x, shuffle_seed=cfg.run.seed,
                on_epoch=MetricsLog(_path(cfg, "metrics_phase2.jsonl")))
    save_checkpoint(_path(cfg, "model.ckpt"), student, {"model": cfg.run.model})
    return RunResult(accuracy=accuracy(student, xt, yt,
                                       FixedWeights(strategy, cfg.phase2.normalize_weights)),
                     strategy=strategy, output_dir=cfg.run.output_dir)


def run_eval(cfg: RunConfig, checkpoint, strategy_path=None) -> float:
    """Test accuracy of a checkpoint, quantized if a strategy is given."""
    model = load_model(cfg, checkpoint)
    (_, _), (xt, yt) = gen_dataset(cfg.data)
    quant = None
    if strategy_path:
        quant = FixedWeights(MpqStrategy.load(strategy_path), cfg.phase2.normalize_weights)
    return accuracy(model, xt, yt, quant)


def run_all(cfg: RunConfig) -> RunResult:
    gen = run_generate(cfg)
    post = run_train(cfg)
    post.fp_accuracy = gen.fp_accuracy
    return post
