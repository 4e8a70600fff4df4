"""Empirical Fisher information, component ranking and Fisher-guided masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import containers
from .autodiff import Graph, Tensor
from .data import Dataset
from .metrics import fmt
from .model import ModelConfig, bind, encode, task_loss
from .selectors import COMPONENTS, Selector, parse_layer_path, resolve_selector, shapes_of, sort_key

SampleLoss = Callable[[Graph, Mapping[str, Tensor], int], Tensor]

MASK_MODES = ("task", "global", "cv", "random", "full-component")


class FisherError(ValueError):
    pass


@dataclass
class FisherMap:
    values: dict[str, np.ndarray]
    task: str
    n_samples: int
    seed: int | None = None
    warnings: list[str] = field(default_factory=list)

    def total(self) -> float:
        return math.fsum(float(np.sum(v)) for v in self.values.values())

    def save(self, path) -> None:
        meta = {"task": self.task, "n_samples": self.n_samples, "seed": self.seed,
                "warnings": list(self.warnings)}
        containers.write(path, "fisher", meta, self.values)

    @classmethod
    def load(cls, path) -> "FisherMap":
        header, tensors = containers.read(path, "fisher")
        meta = header["meta"]
        return cls(tensors, meta["task"], meta["n_samples"], meta.get("seed"), list(meta.get("warnings", [])))


def empirical_fisher(params: Mapping[str, np.ndarray], sample_nll: SampleLoss, n_total: int,
                     scope: str | Selector = "all", max_samples: int | None = None,
                     task: str = "", seed: int | None = None) -> FisherMap:
    """Mean over samples of the squared per-sample gradient of ``log p``.

    ``sample_nll(graph, leaves, j)`` returns the negative log-likelihood of
    the true label of sample ``j``.  The first ``max_samples`` samples are
    used in order, one at a time; a request beyond ``n_total`` is clamped and
    noted in the map's warnings.
    """
    if n_total == 0:
        raise FisherError("cannot estimate Fisher information on an empty dataset")
    warnings = []
    n = n_total if max_samples is None else int(max_samples)
    if n < 1:
        raise FisherError("max_samples must be positive")
    if n > n_total:
        warnings.append(f"max_samples {n} exceeds dataset size {n_total}; clamped")
        n = n_total
    paths = resolve_selector(params, scope).paths()
    acc = {p: np.zeros(np.shape(params[p])) for p in paths}
    for j in range(n):
        graph = Graph()
        grads = graph.backward(sample_nll(graph, bind(graph, params, paths), j))
        for p in paths:
            acc[p] += grads[p] * grads[p]
    values = {p: acc[p] / n for p in paths}
    return FisherMap(values, task, n, seed, warnings)


def estimate_fisher(params: Mapping[str, np.ndarray], config: ModelConfig, dataset: Dataset,
                    scope: str | Selector = "all", max_samples: int | None = None,
                    seed: int | None = None) -> FisherMap:
    """Empirical Fisher of the encoder on ``dataset`` (true labels).

    Classification uses the log-softmax likelihood; regression a unit-variance
    Gaussian, so the negative log-likelihood is half the squared error.
    """

    def nll(graph, leaves, j):
        logits = encode(graph, leaves, config, dataset.input_ids[j:j + 1], dataset.type_ids[j:j + 1],
                        dataset.attention_mask[j:j + 1])
        loss = task_loss(logits, dataset.labels[j:j + 1], config)
        return ad.scale(loss, 0.5) if config.regression else loss

    return empirical_fisher(params, nll, len(dataset), scope, max_samples, dataset.task.name, seed)


# -- component summaries ------------------------------------------------------

@dataclass
class ComponentSummary:
    task: str
    mean: dict[str, float]
    normalized: dict[str, float]


def summarize_components(fisher: FisherMap) -> ComponentSummary:
    """Mean Fisher value per encoder component, pooled over all layers."""
    sums = {c: 0.0 for c in COMPONENTS}
    counts = {c: 0 for c in COMPONENTS}
    layers = {c: set() for c in COMPONENTS}
    for p, v in fisher.values.items():
        parsed = parse_layer_path(p)
        if parsed is None:
            continue
        layer, comp, _ = parsed
        sums[comp] += math.fsum(np.ravel(v).tolist())
        counts[comp] += int(np.size(v))
        layers[comp].add(layer)
    missing = [c for c in COMPONENTS if counts[c] == 0]
    if missing:
        raise FisherError(f"Fisher map for {fisher.task!r} lacks components: {missing}")
    reference = layers[COMPONENTS[0]]
    uneven = [c for c in COMPONENTS if layers[c] != reference]
    if uneven:
        raise FisherError(f"components {uneven} do not cover the same layers")
    mean = {c: sums[c] / counts[c] for c in COMPONENTS}
    total = math.fsum(mean.values())
    normalized = {c: (mean[c] / total if total > 0 else 0.0) for c in COMPONENTS}
    return ComponentSummary(fisher.task, mean, normalized)


def rank_components(summaries: Sequence[ComponentSummary]) -> list[tuple[str, float]]:
    """Components by summed normalized information, descending; ties by name."""
    totals = {c: math.fsum(s.normalized[c] for s in summaries) for c in COMPONENTS}
    return sorted(totals.items(), key=lambda kv: (-kv[1], kv[0]))


# -- masks ------------------------------------------------------------------

def selected_count(fraction: float, n: int) -> int:
    """round-half-up(fraction * n), with 0 -> none and 1 -> all."""
    if not 0.0 <= fraction <= 1.0:
        raise FisherError(f"fraction must lie in [0, 1], got {fraction}")
    if fraction == 1.0:
        return n
    if fraction == 0.0:
        return 0
    x = fraction * n
    k = math.floor(x)
    if x - k >= 0.5:
        k += 1
    return min(k, n)


@dataclass
class MaskSpec:
    """Per-element trainability; paths not in ``masks`` are entirely frozen."""

    masks: dict[str, np.ndarray]
    mode: str
    fraction: float = 1.0
    sources: tuple[str, ...] = ()
    seed: int | None = None
    excluded: str | None = None

    def count(self) -> int:
        return int(sum(int(np.count_nonzero(m)) for m in self.masks.values()))

    def trainable_paths(self) -> list[str]:
        return [p for p, m in self.masks.items() if m.any()]

    def dense(self, path: str, shape) -> np.ndarray:
        m = self.masks.get(path)
        return np.zeros(shape, dtype=bool) if m is None else m

    def union(self, other: "MaskSpec") -> "MaskSpec":
        masks = {p: m.copy() for p, m in self.masks.items()}
        for p, m in other.masks.items():
            masks[p] = masks[p] | m if p in masks else m.copy()
        order = sorted(masks, key=sort_key)
        return MaskSpec({p: masks[p] for p in order}, self.mode, self.fraction, self.sources,
                        self.seed, self.excluded)

    def file_meta(self) -> dict:
        # a cv mask is by definition the global mask over the remaining tasks
        mode = "global" if self.mode == "cv" else self.mode
        return {"mode": mode, "fraction": self.fraction, "sources": list(self.sources), "seed": self.seed}

    def to_bytes(self) -> bytes:
        return containers.dumps("mask", self.file_meta(), self.masks, encoding="bits")

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MaskSpec":
        header, tensors = containers.read(path, "mask")
        meta = header["meta"]
        return cls(tensors, meta["mode"], meta["fraction"], tuple(meta["sources"]), meta.get("seed"))


def mask_from_elements(tree: Mapping[str, object], selector: str | Selector, mode: str,
                       seed: int | None = None) -> MaskSpec:
    elems = resolve_selector(tree, selector)
    shapes = shapes_of(tree)
    masks = {p: elems.mask(p, shapes[p]) for p in elems.paths()}
    return MaskSpec(masks, mode, 1.0, (), seed)


def _candidates(fishers: Sequence[FisherMap], candidates: str | Selector | None) -> list[str]:
    first = fishers[0].values
    if candidates is None:
        paths = sorted(first, key=sort_key)
    else:
        paths = resolve_selector(first, candidates).paths()
    # only the candidate paths must agree; task heads legitimately differ
    for fm in fishers[1:]:
        for p in paths:
            if p not in fm.values:
                raise FisherError(f"Fisher map {fm.task!r} lacks candidate path {p}")
            if fm.values[p].shape != first[p].shape:
                raise FisherError(f"shape mismatch at {p} between {fishers[0].task!r} and {fm.task!r}")
    if not paths or sum(first[p].size for p in paths) == 0:
        raise FisherError("empty candidate set")
    return paths


def _flat(fm: FisherMap, paths: Sequence[str]) -> np.ndarray:
    return np.concatenate([np.ravel(fm.values[p]) for p in paths])


def global_scores(fishers: Sequence[FisherMap], paths: Sequence[str]) -> np.ndarray:
    """Element-wise sum over tasks of each task's Fisher divided by its total.

    A task whose total is zero contributes nothing.
    """
    out = np.zeros(sum(fishers[0].values[p].size for p in paths))
    for fm in fishers:
        v = _flat(fm, paths)
        total = math.fsum(v.tolist())
        if total > 0:
            out = out + v / total
    return out


def build_mask(mode: str, fishers: Sequence[FisherMap], fraction: float,
               target_task: str | None = None, candidates: str | Selector | None = None) -> MaskSpec:
    """Select the top ``round(fraction * n)`` candidate elements by Fisher score.

    ``task`` ranks by one task's map (``target_task``, or the only map given);
    ``global`` by the sum of per-task normalized maps; ``cv`` is ``global``
    over every task except ``target_task``.  Ties go to the lower element id
    (path order, then flat index).
    """
    if not fishers:
        raise FisherError("no Fisher maps given")
    names = [fm.task for fm in fishers]
    if len(set(names)) != len(names):
        raise FisherError(f"duplicate task names among Fisher maps: {names}")
    paths = _candidates(fishers, candidates)
    excluded = None
    if mode == "task":
        if target_task is None:
            if len(fishers) != 1:
                raise FisherError("task mode with several maps needs target_task")
            chosen = fishers[0]
        else:
            if target_task not in names:
                raise FisherError(f"task {target_task!r} not among {names}")
            chosen = fishers[names.index(target_task)]
        scores = _flat(chosen, paths)
        sources: tuple[str, ...] = (chosen.task,)
    elif mode in ("global", "cv"):
        pool = list(fishers)
        if mode == "cv":
            if len(fishers) < 2:
                raise FisherError("cv mode needs at least two tasks")
            if target_task not in names:
                raise FisherError(f"cv target task {target_task!r} not among {names}")
            pool = [fm for fm in fishers if fm.task != target_task]
            excluded = target_task
        scores = global_scores(pool, paths)
        sources = tuple(fm.task for fm in pool)
    else:
        raise FisherError(f"unknown mask mode {mode!r}")
    n = scores.size
    k = selected_count(fraction, n)
    order = np.argsort(-scores, kind="stable")
    flat = np.zeros(n, dtype=bool)
    flat[order[:k]] = True
    masks, start = {}, 0
    for p in paths:
        shape = fishers[0].values[p].shape
        size = fishers[0].values[p].size
        masks[p] = flat[start:start + size].reshape(shape)
        start += size
    return MaskSpec(masks, mode, float(fraction), sources, None, excluded)


# -- heat maps --------------------------------------------------------------

def layer_heatmap(fisher: FisherMap | Mapping[str, np.ndarray],
                  component: str = "output.LayerNorm") -> dict[int, tuple[float, float]]:
    """Per layer, the summed Fisher value of the LayerNorm weight and of its bias."""
    values = fisher.values if isinstance(fisher, FisherMap) else fisher
    cells: dict[int, dict[str, float]] = {}
    for p, v in values.items():
        parsed = parse_layer_path(p)
        if parsed and parsed[1] == component:
            cells.setdefault(parsed[0], {})[parsed[2]] = math.fsum(np.ravel(v).tolist())
    if not cells:
        raise FisherError(f"Fisher map has no {component} paths")
    layers = sorted(cells)
    missing = [i for i in range(layers[-1] + 1) if i not in cells or len(cells[i]) != 2]
    if missing:
        raise FisherError(f"{component} missing for layers {missing}")
    return {i: (cells[i]["weight"], cells[i]["bias"]) for i in layers}


def global_fisher(fishers: Sequence[FisherMap], paths: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Normalized-and-summed Fisher values reshaped back onto their paths."""
    paths = list(paths) if paths is not None else _candidates(fishers, None)
    flat = global_scores(fishers, paths)
    out, start = {}, 0
    for p in paths:
        ref = fishers[0].values[p]
        out[p] = flat[start:start + ref.size].reshape(ref.shape)
        start += ref.size
    return out


def heatmap_csv(table: Mapping[int, tuple[float, float]]) -> str:
    lines = ["layer,weight_sum,bias_sum"]
    for layer in sorted(table):
        w, b = table[layer]
        lines.append(f"{layer},{fmt(w)},{fmt(b)}")
    return "\n".join(lines) + "\n"


def ranking_csv(ranking: Sequence[tuple[str, float]]) -> str:
    lines = ["rank,component,score"]
    for i, (comp, score) in enumerate(ranking, start=1):
        lines.append(f"{i},{comp},{fmt(score)}")
    return "\n".join(lines) + "\n"
