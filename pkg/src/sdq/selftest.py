"""Quick oracle suites behind ``sdq selftest``.

Each suite is a module-level function returning ``(passed, detail)``; the
suites share no state, so they can run in separate worker processes.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import _kernels as K
from .cost import resnet18_layers, total_bitops
from .gradcore import Tape, Tensor, backward, grad_check, tsum
from .phase2 import bin_assign, bin_entropy, ebr_terms
from .quantizers import expected_error_coeff, quantize_unit
from .stochastic import soft_choice, soft_choice_value
from .strategy import uniform_strategy


def suite_ste():
    rng = np.random.default_rng(0)
    for b in range(1, 9):
        x = Tensor(rng.random((16, 16)), requires_grad=True)
        up = rng.normal(size=x.shape)
        with Tape():
            backward(tsum(quantize_unit(x, b) * up))
        if not np.array_equal(x.grad, up):
            return False, f"STE gradient differs from bypass at b={b}"
    return True, "b=1..8 bitwise"


def suite_error_coeff():
    rng = np.random.default_rng(1)
    u = rng.random(200_000)
    worst = 0.0
    for b in (2, 4, 8):
        L = (1 << b) - 1
        err = K.quantize_grid(u, float(L)) - u
        ratio = float(np.mean(err * err)) / expected_error_coeff(b)
        worst = max(worst, abs(ratio - 1.0))
    return worst < 0.05, f"max rel dev {worst:.4f}"


def suite_gumbel_grad():
    worst = 0.0
    for tau in (0.5, 1.0, 2.0):
        for beta in (0.1, 0.5, 0.9):
            g0, g1 = 0.3, -0.2
            b = Tensor(beta, requires_grad=True)
            with Tape():
                backward(soft_choice(b, tau, noise=(g0, g1), hard=False))
            h = 1e-6
            num = (soft_choice_value(beta + h, g0, g1, tau)
                   - soft_choice_value(beta - h, g0, g1, tau)) / (2 * h)
            worst = max(worst, abs(float(b.grad) - num) / abs(num))
    return worst < 1e-4, f"max rel err {worst:.2e}"


def suite_bernoulli():
    rng = np.random.default_rng(2)
    n = 20_000
    for beta in (0.1, 0.5, 0.9):
        c = soft_choice(Tensor(np.full(n, beta)), 1.0, rng).data
        sigma = math.sqrt(beta * (1 - beta) / n)
        if abs(c.mean() - beta) > 3 * sigma:
            return False, f"beta={beta}: frequency {c.mean():.4f}"
    return True, "within 3 sigma"


def suite_entropy():
    for b in (1, 2, 3, 4):
        L = (1 << b) - 1
        h = bin_assign(np.arange(L + 1) * (2.0 / L) - 1.0, b)
        if not math.isclose(bin_entropy(h), b * math.log(2), rel_tol=0, abs_tol=1e-12):
            return False, f"uniform entropy wrong at b={b}"
    return True, "uniform -> b ln 2"


def suite_ebr_grad():
    rng = np.random.default_rng(3)
    w = rng.uniform(-0.9, 0.9, 40)
    err = grad_check(lambda t: ebr_terms(t, 2), w, h=1e-6)
    return err < 1e-6, f"max rel err {err:.2e}"


def suite_cost():
    metas = resnet18_layers()
    pinned = (metas[0].name, metas[-1].name)
    s = uniform_strategy(metas, 4, 4, pinned)
    g = total_bitops(s, metas) / 1e9
    return abs(g / 34.7 - 1) < 0.05, f"ResNet18 4/4 BitOPs {g:.3f} G"


SUITES = {
    "ste": suite_ste,
    "error_coeff": suite_error_coeff,
    "gumbel_grad": suite_gumbel_grad,
    "bernoulli": suite_bernoulli,
    "entropy": suite_entropy,
    "ebr_grad": suite_ebr_grad,
    "cost": suite_cost,
}


def _run(name):
    try:
        ok, detail = SUITES[name]()
        ok = bool(ok)
    except Exception as exc:  # a crashing suite is a failing suite
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return name, ok, detail


def run_suites(names=None, jobs: int = 1):
    names = list(names or SUITES)
    if jobs <= 1:
        return [_run(n) for n in names]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run, names))
