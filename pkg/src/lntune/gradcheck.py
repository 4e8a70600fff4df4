"""Finite-difference verification of the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .autodiff import Graph, Tensor

LossBuilder = Callable[[Graph, Mapping[str, Tensor]], Tensor]

MAX_SAMPLED_ELEMENTS = 64


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    checked: dict[str, int]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def evaluate(builder: LossBuilder, params: Mapping[str, np.ndarray],
             with_grad: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    g = Graph()
    leaves = {name: g.param(name, value, requires_grad=with_grad) for name, value in params.items()}
    loss = builder(g, leaves)
    grads = g.backward(loss) if with_grad else {}
    return loss.item(), grads


def _shifted(base, name, index, delta):
    probe = dict(base)
    arr = base[name].copy()
    arr.flat[index] += delta
    probe[name] = arr
    return probe


# central-difference stencils: (offset in steps, weight); divide by the step
STENCILS = {
    2: ((1, 0.5), (-1, -0.5)),
    4: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12)),
}


def grad_check(builder: LossBuilder, params: Mapping[str, np.ndarray], step: float = 1e-5,
               tolerance: float = 1e-4, seed: int = 0, max_elements: int = MAX_SAMPLED_ELEMENTS,
               order: int = 2) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``order`` picks the second- or fourth-order stencil; the latter allows a
    larger step, which keeps rounding noise small on near-zero gradients.
    Tensors larger than ``max_elements`` are checked on a seeded uniform
    sample of their flat indices.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if order not in STENCILS:
        raise ValueError(f"order must be one of {sorted(STENCILS)}")
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    _, analytic = evaluate(builder, base)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    checked: dict[str, int] = {}
    for name in base:
        size = base[name].size
        if size > max_elements:
            idx = np.sort(rng.choice(size, size=max_elements, replace=False))
        else:
            idx = np.arange(size)
        worst = 0.0
        for i in idx:
            numeric = sum(w * evaluate(builder, _shifted(base, name, i, k * step), False)[0]
                          for k, w in STENCILS[order]) / step
            err = float(relative_error(analytic[name].flat[i], numeric))
            worst = max(worst, err)
        errors[name] = worst
        checked[name] = int(idx.size)
    return GradCheckReport(errors, checked, tolerance)
