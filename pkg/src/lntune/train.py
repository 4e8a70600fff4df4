"""Masked fine-tuning with a learning-rate grid and best-epoch selection."""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Graph
from .data import Dataset
from .fisher import FisherMap, MaskSpec, build_mask, mask_from_elements
from .metrics import UndefinedMetric, evaluate_metric, fmt, selection_score
from .model import ModelConfig, ParamTree, bind, copy_tree, encode, predict, task_loss
from .selectors import count_params, shapes_of

STRATEGIES = ("full", "bitfit", "layernorm", "random", "mask")
FULL_GRID = (1e-5, 2e-5, 3e-5, 5e-5)
PEFT_GRID = (1e-4, 4e-4, 7e-4, 1e-3)

PLAN_SELECTORS = {
    "full": "all",
    "bitfit": "bias-all+head",
    "layernorm": "output.LayerNorm+head",
}


class TrainingError(RuntimeError):
    pass


def default_grid(strategy: str) -> tuple[float, ...]:
    return FULL_GRID if strategy == "full" else PEFT_GRID


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "layernorm"
    lr_grid: tuple[float, ...] = ()
    max_epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    metric: str = "accuracy"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.lr_grid:
            object.__setattr__(self, "lr_grid", default_grid(self.strategy))
        object.__setattr__(self, "lr_grid", tuple(float(x) for x in self.lr_grid))
        if any(not lr > 0 for lr in self.lr_grid):
            raise ValueError("learning rates must be positive")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be positive")


@dataclass
class RunReport:
    strategy: str
    metric: str
    seed: int
    lr: float | None
    epoch: int | None
    table: dict[float, list[float]]
    failed: dict[float, str]
    trainable_count: int
    frozen_checksum_before: str
    frozen_checksum_after: str
    wall_seconds: float = 0.0
    best_params: ParamTree | None = field(default=None, repr=False)

    @property
    def best_metric(self) -> float:
        return self.table[self.lr][self.epoch - 1]

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "strategy": self.strategy,
            "metric": self.metric,
            "seed": self.seed,
            "chosen_lr": self.lr,
            "chosen_epoch": self.epoch,
            "best_metric": None if self.lr is None else _json_float(self.best_metric),
            "table": {repr(lr): [_json_float(v) for v in vals] for lr, vals in self.table.items()},
            "failed": {repr(lr): msg for lr, msg in self.failed.items()},
            "trainable_count": self.trainable_count,
            "frozen_checksum_before": self.frozen_checksum_before,
            "frozen_checksum_after": self.frozen_checksum_after,
        }
        if include_timing:
            d["wall_seconds"] = self.wall_seconds
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True) + "\n"

    def metrics_csv(self) -> str:
        lines = ["lr,epoch,metric"]
        for lr, vals in self.table.items():
            for epoch, v in enumerate(vals, start=1):
                lines.append(f"{fmt(lr)},{epoch},{'nan' if math.isnan(v) else fmt(v)}")
        return "\n".join(lines) + "\n"


def _json_float(v: float):
    return None if math.isnan(v) else v


# -- freeze plans ---------------------------------------------------------------

def make_freeze_plan(strategy: str, tree: Mapping[str, object], fraction: float | None = None,
                     fishers: Sequence[FisherMap] | None = None, mode: str = "task",
                     target_task: str | None = None, seed: int = 0,
                     candidates: str = "output.LayerNorm") -> MaskSpec:
    """Trainable-element mask for a strategy; the task head is always trainable."""
    if strategy in PLAN_SELECTORS:
        return mask_from_elements(tree, PLAN_SELECTORS[strategy], strategy)
    if strategy == "random":
        k = count_params(tree, "output.LayerNorm")
        return mask_from_elements(tree, f"random({k},{seed})+head", "random", seed)
    if strategy == "mask":
        if fishers is None or fraction is None:
            raise ValueError("mask strategy needs Fisher maps and a fraction")
        base = build_mask(mode, fishers, fraction, target_task, candidates)
        head = mask_from_elements(tree, "head", "mask")
        return base.union(head)
    raise ValueError(f"unknown strategy {strategy!r}")


def frozen_checksum(params: Mapping[str, np.ndarray], plan: MaskSpec) -> str:
    """SHA-256 over every frozen element, in path order."""
    h = hashlib.sha256()
    for p in sorted(params):
        v = np.ascontiguousarray(params[p], dtype="<f8")
        frozen = ~plan.dense(p, v.shape)
        h.update(p.encode())
        h.update(v[frozen].tobytes())
    return h.hexdigest()


# -- optimizer ----------------------------------------------------------------

class MaskedAdamW:
    """Adam with decoupled weight decay, stepping only the masked elements.

    Frozen elements are never read into optimizer state nor written.
    """

    def __init__(self, params: ParamTree, plan: MaskSpec, lr: float, cfg: TrainConfig):
        self.params = params
        self.lr = lr
        self.cfg = cfg
        self.masks = {p: plan.dense(p, params[p].shape) for p in plan.trainable_paths()}
        self.m = {p: np.zeros(int(m.sum())) for p, m in self.masks.items()}
        self.v = {p: np.zeros(int(m.sum())) for p, m in self.masks.items()}
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, mask in self.masks.items():
            g = grads[p][mask]
            self.m[p] = c.beta1 * self.m[p] + (1.0 - c.beta1) * g
            self.v[p] = c.beta2 * self.v[p] + (1.0 - c.beta2) * g * g
            w = self.params[p][mask]
            update = (self.m[p] / bc1) / (np.sqrt(self.v[p] / bc2) + c.adam_eps) + c.weight_decay * w
            self.params[p][mask] = w - self.lr * update


# -- training -----------------------------------------------------------------

def evaluate(params: Mapping[str, np.ndarray], config: ModelConfig, data: Dataset, metric: str,
             batch_size: int = 256) -> float:
    preds = []
    for batch in data.batches(batch_size):
        preds.append(predict(params, config, batch.input_ids, batch.type_ids, batch.attention_mask))
    try:
        return selection_score(evaluate_metric(metric, np.concatenate(preds), data.labels, data.partitions))
    except UndefinedMetric:
        return math.nan


@dataclass
class _Cell:
    lr: float
    metrics: list[float]
    best_epoch: int | None
    best_params: ParamTree | None
    error: str | None = None


def _train_cell(params, config, cfg: TrainConfig, plan: MaskSpec, train: Dataset,
                validation: Dataset, lr: float) -> _Cell:
    work = copy_tree(params)
    opt = MaskedAdamW(work, plan, lr, cfg)
    trainable = list(opt.masks)
    metrics: list[float] = []
    best, best_epoch, best_params = -math.inf, None, None
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, cfg.max_epochs + 1):
            for batch in train.batches(cfg.batch_size, seed=hash_seed(cfg.seed, epoch)):
                try:
                    graph = Graph()
                    leaves = bind(graph, work, trainable)
                    logits = encode(graph, leaves, config, batch.input_ids, batch.type_ids, batch.attention_mask)
                    loss = task_loss(logits, batch.labels, config)
                except ValueError as exc:
                    return _Cell(lr, metrics, best_epoch, best_params, f"diverged at epoch {epoch}: {exc}")
                if not math.isfinite(loss.item()):
                    return _Cell(lr, metrics, best_epoch, best_params, f"non-finite loss at epoch {epoch}")
                opt.step(graph.backward(loss))
            if not all(np.all(np.isfinite(work[p])) for p in trainable):
                return _Cell(lr, metrics, best_epoch, best_params, f"non-finite parameters at epoch {epoch}")
            score = evaluate(work, config, validation, cfg.metric)
            metrics.append(score)
            if score > best:
                best, best_epoch, best_params = score, epoch, copy_tree(work)
    return _Cell(lr, metrics, best_epoch, best_params)


def hash_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def grid_search(params: Mapping[str, np.ndarray], config: ModelConfig, cfg: TrainConfig,
                plan: MaskSpec, train: Dataset, validation: Dataset, threads: int = 1) -> RunReport:
    """Train one cell per learning rate; pick the best (lr, epoch) on validation.

    Ties go to the smaller learning rate, then the earlier epoch.  Cells whose
    loss diverges are recorded in ``failed``.
    """
    if len(train) == 0 or len(validation) == 0:
        raise TrainingError("training and validation data must be non-empty")
    shapes = shapes_of(params)
    for p, m in plan.masks.items():
        if p not in shapes or tuple(m.shape) != shapes[p]:
            raise TrainingError(f"freeze mask at {p!r} does not match the parameter tree")
    start = time.perf_counter()
    before = frozen_checksum(params, plan)
    lrs = list(cfg.lr_grid)
    if threads > 1 and len(lrs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(lambda lr: _train_cell(params, config, cfg, plan, train, validation, lr), lrs))
    else:
        cells = [_train_cell(params, config, cfg, plan, train, validation, lr) for lr in lrs]
    table = {c.lr: c.metrics for c in cells}
    failed = {c.lr: c.error for c in cells if c.error}
    best_key, chosen = None, None
    for c in sorted(cells, key=lambda c: c.lr):
        if c.error or c.best_epoch is None:
            continue
        key = c.metrics[c.best_epoch - 1]
        if best_key is None or key > best_key:
            best_key, chosen = key, c
    if chosen is None:
        raise TrainingError(f"every grid cell failed: {failed}")
    after_params = chosen.best_params
    report = RunReport(
        strategy=cfg.strategy, metric=cfg.metric, seed=cfg.seed,
        lr=chosen.lr, epoch=chosen.best_epoch, table=table, failed=failed,
        trainable_count=plan.count(),
        frozen_checksum_before=before,
        frozen_checksum_after=frozen_checksum(after_params, plan),
        best_params=after_params,
    )
    report.wall_seconds = time.perf_counter() - start
    return report


def train_run(params: Mapping[str, np.ndarray], config: ModelConfig, cfg: TrainConfig, plan: MaskSpec,
              train: Dataset, validation: Dataset, lr: float | None = None) -> RunReport:
    """A single-learning-rate run (the first grid entry unless ``lr`` is given)."""
    lr = cfg.lr_grid[0] if lr is None else lr
    single = TrainConfig(**{**asdict(cfg), "lr_grid": (lr,)})
    return grid_search(params, config, single, plan, train, validation)
