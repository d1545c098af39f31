"""CSV exports: bitwidth trajectories and weight/bin histograms."""
from __future__ import annotations

import csv
import io

import numpy as np

from .gradcore import no_grad
from .phase2 import FixedWeights, bin_assign


def bits_trajectory_csv(records) -> str:
    """One row per phase-1 epoch, one column per layer (``epoch,<layers...>``)."""
    records = [r for r in records if r.get("phase") == "phase1"]
    names = list(records[0]["bits"]) if records else []
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["epoch"] + names)
    for r in records:
        out.writerow([r["epoch"]] + [r["bits"][n] for n in names])
    return buf.getvalue()


def layer_groups(model, strategy, normalize: bool = True):
    """``(layer, bits, real values)`` for each quantized layer group."""
    quant = FixedWeights(strategy, normalize)
    out = []
    with no_grad():
        quant.begin(0)
        for layer in model.layers:
            before = len(quant.groups)
            quant.weight(layer)
            for values, b in quant.groups[before:]:
                out.append((layer.name, b, values.data.ravel()))
    return out


def bin_histogram_csv(groups) -> str:
    """``layer,bits,level,count,proportion,mean,variance`` per bin."""
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["layer", "bits", "level", "count", "proportion", "mean", "variance"])
    for name, b, values in groups:
        h = bin_assign(values, b)
        for i, level in enumerate(h.levels):
            out.writerow([name, b, repr(float(level)), int(h.counts[i]),
                          repr(float(h.proportions[i])), repr(float(h.means[i])),
                          repr(float(h.variances[i]))])
    return buf.getvalue()


def weight_histogram_csv(groups, bins: int = 64) -> str:
    """``layer,left,right,count`` over equal-width bins of [-1, 1]."""
    edges = np.linspace(-1.0, 1.0, bins + 1)
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["layer", "left", "right", "count"])
    for name, _, values in groups:
        counts, _ = np.histogram(values, edges)
        for i, c in enumerate(counts):
            out.writerow([name, repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
    return buf.getvalue()
