"""Seeded synthetic datasets standing in for image benchmarks."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .gradcore import ContractError

GENERATORS = ("blobs", "ring", "mixture", "bars")


@dataclass(frozen=True)
class DatasetSpec:
    generator: str = "mixture"
    samples: int = 2000
    classes: int = 4
    noise: float = 0.5
    seed: int = 7
    test_fraction: float = 0.25

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ContractError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")
        if self.samples < 2:
            raise ContractError("need at least two samples")
        if not 0 < self.test_fraction < 1:
            raise ContractError("test_fraction must lie in (0, 1)")


def _blobs(rng, n, spec):
    y = rng.integers(0, 2, n)
    centers = np.array([[-2.0, 0.0], [2.0, 0.0]])
    return centers[y] + rng.normal(0, spec.noise, (n, 2)), y


def _ring(rng, n, spec):
    y = rng.integers(0, 2, n)
    radius = np.where(y == 0, 1.0, 3.0) + rng.normal(0, spec.noise, n)
    angle = rng.uniform(0, 2 * np.pi, n)
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1), y


def _mixture(rng, n, spec):
    k = spec.classes
    y = rng.integers(0, k, n)
    angles = 2 * np.pi * np.arange(k) / k
    centers = 3.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return centers[y] + rng.normal(0, spec.noise, (n, 2)), y


def _bars(rng, n, spec):
    """1x8x8 images: horizontal, vertical, diagonal or anti-diagonal stroke."""
    k = min(spec.classes, 4)
    y = rng.integers(0, k, n)
    pos = rng.integers(1, 7, n)
    img = rng.normal(0, spec.noise, (n, 1, 8, 8))
    idx = np.arange(8)
    for i in range(n):
        if y[i] == 0:
            img[i, 0, pos[i], :] += 1.0
        elif y[i] == 1:
            img[i, 0, :, pos[i]] += 1.0
        elif y[i] == 2:
            img[i, 0, idx, idx] += 1.0
        else:
            img[i, 0, idx, 7 - idx] += 1.0
    return img, y


def gen_dataset(spec: DatasetSpec):
    """Returns ``((x_train, y_train), (x_test, y_test))``; bit-identical per seed."""
    rng = np.random.default_rng(spec.seed)
    make = {"blobs": _blobs, "ring": _ring, "mixture": _mixture, "bars": _bars}[spec.generator]
    x, y = make(rng, spec.samples, spec)
    n_test = max(1, int(round(spec.samples * spec.test_fraction)))
    return (x[n_test:], y[n_test:]), (x[:n_test], y[:n_test])


def to_csv(x, y) -> str:
    """Feature columns (flattened) then the integer label."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    flat = np.asarray(x).reshape(len(y), -1)
    writer.writerow([f"x{i}" for i in range(flat.shape[1])] + ["label"])
    for row, label in zip(flat, y):
        writer.writerow([repr(float(v)) for v in row] + [int(label)])
    return buf.getvalue()


def from_csv(text: str, shape=None):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][-1] != "label":
        raise ContractError("dataset CSV must have a header ending in 'label'")
    body = rows[1:]
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    if shape is not None:
        x = x.reshape((len(y),) + tuple(shape))
    return x, y


def batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
