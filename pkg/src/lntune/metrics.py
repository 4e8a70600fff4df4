"""Parameter drift, vector distances, GLUE metrics and the Kruskal-Wallis test."""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .selectors import COMPONENTS, parse_layer_path

METRIC_KINDS = ("accuracy", "f1", "matthews", "spearman", "matched_mismatched_accuracy")

# GLUE task family -> metric
GLUE_METRICS = {
    "QNLI": "accuracy",
    "SST-2": "accuracy",
    "MNLI": "matched_mismatched_accuracy",
    "CoLA": "matthews",
    "MRPC": "f1",
    "STS-B": "spearman",
    "RTE": "accuracy",
    "QQP": "f1",
}


class UndefinedMetric(ValueError):
    """The metric has no value for these inputs (e.g. constant ranks)."""


def _pair(v1, v2) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(v1, dtype=np.float64).reshape(-1)
    b = np.asarray(v2, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


def distances(v1, v2, tol: float = 0.0) -> tuple[int, float]:
    """``(L0, L1)``: count of differing elements and sum of absolute differences.

    An element differs when ``|v1_i - v2_i| > tol``; the default compares
    stored values exactly.
    """
    a, b = _pair(v1, v2)
    diff = np.abs(a - b)
    return int(np.count_nonzero(diff > tol)), float(np.sum(diff))


def change_D(pre, fine) -> float:
    """Mean absolute per-element change, L1 distance over vector length."""
    a, b = _pair(pre, fine)
    if a.size == 0:
        raise ValueError("change_D needs at least one element")
    return distances(a, b)[1] / a.size


def drift_heatmap(pre: Mapping[str, np.ndarray], fine: Mapping[str, np.ndarray]) -> dict[tuple[int, str], float]:
    """D per (layer, component) over the concatenated weight and bias elements."""
    if set(pre) != set(fine):
        diff = sorted(set(pre) ^ set(fine))
        raise ValueError(f"parameter trees differ in paths: {diff}")
    for p in pre:
        if np.shape(pre[p]) != np.shape(fine[p]):
            raise ValueError(f"shape mismatch at {p}: {np.shape(pre[p])} vs {np.shape(fine[p])}")
    cells: dict[tuple[int, str], list[str]] = {}
    for p in sorted(pre):
        parsed = parse_layer_path(p)
        if parsed:
            cells.setdefault((parsed[0], parsed[1]), []).append(p)
    table = {}
    layers = sorted({layer for layer, _ in cells})
    for layer in layers:
        for comp in COMPONENTS:
            paths = cells.get((layer, comp))
            if not paths:
                continue
            a = np.concatenate([np.ravel(pre[p]) for p in paths])
            b = np.concatenate([np.ravel(fine[p]) for p in paths])
            table[(layer, comp)] = change_D(a, b)
    return table


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


def drift_csv(table: Mapping[tuple[int, str], float]) -> str:
    order = {c: i for i, c in enumerate(COMPONENTS)}
    lines = ["layer,component,D"]
    for layer, comp in sorted(table, key=lambda k: (k[0], order[k[1]])):
        lines.append(f"{layer},{comp},{fmt(table[(layer, comp)])}")
    return "\n".join(lines) + "\n"


# -- GLUE metrics -------------------------------------------------------------

def _confusion(pred, labels, positive=1):
    p = np.asarray(pred) == positive
    y = np.asarray(labels) == positive
    tp = int(np.sum(p & y))
    tn = int(np.sum(~p & ~y))
    fp = int(np.sum(p & ~y))
    fn = int(np.sum(~p & y))
    return tp, tn, fp, fn


def accuracy(pred, labels) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def f1(pred, labels, positive=1) -> float:
    tp, _, fp, fn = _confusion(pred, labels, positive)
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def matthews(pred, labels, positive=1) -> float:
    tp, tn, fp, fn = _confusion(pred, labels, positive)
    denom = math.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / denom


def spearman(x, y) -> float:
    """Pearson correlation of average ranks."""
    rx = rankdata(np.asarray(x, dtype=np.float64))
    ry = rankdata(np.asarray(y, dtype=np.float64))
    dx, dy = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(np.sum(dx * dx)) * float(np.sum(dy * dy)))
    if denom == 0:
        raise UndefinedMetric("spearman correlation is undefined for constant ranks")
    return float(np.sum(dx * dy)) / denom


def evaluate_metric(kind: str, predictions, labels, partitions=None):
    """Score predictions; ``matched_mismatched_accuracy`` returns a pair and
    needs ``partitions`` (0 = matched, 1 = mismatched)."""
    pred, lab = np.asarray(predictions), np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {lab.shape}")
    if pred.size == 0:
        raise ValueError("cannot evaluate a metric on empty inputs")
    if kind == "accuracy":
        return accuracy(pred, lab)
    if kind == "f1":
        return f1(pred, lab)
    if kind == "matthews":
        return matthews(pred, lab)
    if kind == "spearman":
        return spearman(pred, lab)
    if kind == "matched_mismatched_accuracy":
        if partitions is None:
            raise ValueError("matched/mismatched accuracy needs partition labels")
        parts = np.asarray(partitions)
        out = []
        for part in (0, 1):
            sel = parts == part
            if not sel.any():
                raise ValueError(f"partition {part} is empty")
            out.append(accuracy(pred[sel], lab[sel]))
        return tuple(out)
    raise ValueError(f"unknown metric kind {kind!r}")


def selection_score(value) -> float:
    """Scalar used for model selection (mean of a matched/mismatched pair)."""
    if isinstance(value, tuple):
        return float(np.mean(value))
    return float(value)


# -- Kruskal-Wallis -----------------------------------------------------------

_GAMMA_EPS = 1e-16
_GAMMA_ITMAX = 10_000


def _gamma_series(a: float, x: float) -> float:
    # lower regularized P(a, x), converges for x < a + 1
    term = total = 1.0 / a
    ap = a
    for _ in range(_GAMMA_ITMAX):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _GAMMA_EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_continued_fraction(a: float, x: float) -> float:
    # upper regularized Q(a, x) by modified Lentz, for x >= a + 1
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, _GAMMA_ITMAX):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _GAMMA_EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_upper_regularized(a: float, x: float) -> float:
    """Q(a, x) = Gamma(a, x) / Gamma(a)."""
    if a <= 0:
        raise ValueError("shape a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_continued_fraction(a, x)


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution."""
    if x <= 0:
        return 1.0
    return gamma_upper_regularized(df / 2.0, x / 2.0)


def kruskal_wallis(groups: Sequence[Sequence[float]]) -> tuple[float, float]:
    """H statistic (tie-corrected) and its chi-square p-value."""
    if len(groups) < 2:
        raise ValueError("Kruskal-Wallis needs at least two groups")
    arrays = [np.asarray(g, dtype=np.float64).reshape(-1) for g in groups]
    if any(a.size == 0 for a in arrays):
        raise ValueError("every group must be non-empty")
    pooled = np.concatenate(arrays)
    n = pooled.size
    ranks = rankdata(pooled)
    _, counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - float(np.sum(counts.astype(np.float64) ** 3 - counts)) / (n ** 3 - n)
    if correction <= 0:
        return 0.0, 1.0
    h = 0.0
    start = 0
    mid = (n + 1) / 2.0
    for a in arrays:
        r = ranks[start:start + a.size]
        start += a.size
        h += a.size * (float(np.mean(r)) - mid) ** 2
    h *= 12.0 / (n * (n + 1))
    h /= correction
    return h, chi2_sf(h, len(arrays) - 1)
