"""Task specifications, TSV ingestion and seeded synthetic GLUE-like tasks."""

from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD, CLS, SEP, UNK = 0, 1, 2, 3

# Fixed toy vocabulary; word i has token id i.
TOY_VOCAB: tuple[str, ...] = (
    "[PAD]", "[CLS]", "[SEP]", "[UNK]",
    "good", "great", "fine", "happy", "nice", "bright",
    "bad", "awful", "poor", "sad", "nasty", "dull",
    "cat", "dog", "bird", "fish", "horse", "cow", "sheep", "goat",
    "car", "bus", "train", "plane", "boat", "truck", "bike", "ship",
)
WORD_IDS = {w: i for i, w in enumerate(TOY_VOCAB)}
POSITIVE = tuple(range(4, 10))
NEGATIVE = tuple(range(10, 16))
ANIMALS = tuple(range(16, 24))
VEHICLES = tuple(range(24, 32))

KINDS = ("single", "pairclass", "pairreg")
METRICS = ("accuracy", "f1", "matthews", "spearman", "matched_mismatched_accuracy")
DEFAULT_METRIC = {"single": "accuracy", "pairclass": "f1", "pairreg": "spearman"}


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str
    metric: str
    labels: tuple[str, ...] = ("0", "1")
    value_range: tuple[float, float] = (0.0, 5.0)
    train: str | None = None
    validation: str | None = None
    test: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DatasetError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.metric not in METRICS:
            raise DatasetError(f"unknown metric {self.metric!r}")
        if (self.kind == "pairreg") != (self.metric == "spearman"):
            raise DatasetError(f"metric {self.metric!r} does not fit task kind {self.kind!r}")

    @property
    def regression(self) -> bool:
        return self.kind == "pairreg"

    @property
    def pair(self) -> bool:
        return self.kind != "single"

    @property
    def num_labels(self) -> int:
        return 1 if self.regression else len(self.labels)


def make_task(name: str, kind: str, metric: str | None = None, **kw) -> TaskSpec:
    return TaskSpec(name=name, kind=kind, metric=metric or DEFAULT_METRIC[kind], **kw)


@dataclass
class Dataset:
    """Encoded samples in file order; labels are class indices or floats."""

    task: TaskSpec
    input_ids: np.ndarray
    type_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray
    partitions: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        parts = None if self.partitions is None else self.partitions[index]
        return Dataset(self.task, self.input_ids[index], self.type_ids[index],
                       self.attention_mask[index], self.labels[index], parts, dict(self.meta))

    def batches(self, batch_size: int, seed: int | None = None) -> Iterator["Dataset"]:
        """Consecutive batches; shuffled by ``seed`` when given."""
        order = np.arange(len(self))
        if seed is not None:
            order = np.random.default_rng(seed).permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start:start + batch_size])


def encode_pair(first: Sequence[int], second: Sequence[int] | None, length: int):
    ids = [CLS, *first, SEP]
    types = [0] * len(ids)
    if second is not None:
        ids += [*second, SEP]
        types += [1] * (len(second) + 1)
    if len(ids) > length:
        raise DatasetError(f"sequence of {len(ids)} tokens exceeds length {length}")
    pad = length - len(ids)
    return ids + [PAD] * pad, types + [0] * pad, [1] * (length - pad) + [0] * pad


def _assemble(task: TaskSpec, rows, labels, length=None, partitions=None, meta=None) -> Dataset:
    if not rows:
        raise DatasetError("dataset is empty")
    if length is None:
        length = max(len(a) + (len(b) + 1 if b is not None else 0) + 2 for a, b in rows)
    enc = [encode_pair(a, b, length) for a, b in rows]
    dtype = np.float64 if task.regression else np.int64
    return Dataset(task,
                   np.array([e[0] for e in enc], dtype=np.int64),
                   np.array([e[1] for e in enc], dtype=np.int64),
                   np.array([e[2] for e in enc], dtype=np.float64),
                   np.array(labels, dtype=dtype),
                   None if partitions is None else np.array(partitions, dtype=np.int64),
                   meta or {})


# -- TSV ---------------------------------------------------------------------

def _tokens(text: str, column: str, line: int, token_mode: bool) -> list[int]:
    parts = text.split()
    if token_mode:
        try:
            return [int(t) for t in parts]
        except ValueError:
            raise DatasetError(f"line {line}: column {column!r} must hold integer token ids") from None
    return [WORD_IDS.get(w.lower(), UNK) for w in parts]


def load_tsv(path: str | Path, task: TaskSpec, length: int | None = None) -> Dataset:
    """Read a tab-separated file with a header row.

    Text columns are ``sentence1`` and optional ``sentence2`` (mapped through
    the toy vocabulary); ``tokens`` / ``tokens2`` carry integer ids instead.
    ``label`` is required; an optional ``partition`` column (0 matched, 1
    mismatched) feeds the matched/mismatched metric.
    """
    text = Path(path).read_text(encoding="utf-8")
    reader = csv.reader(io.StringIO(text), delimiter="\t", quoting=csv.QUOTE_NONE)
    try:
        header = next(reader)
    except StopIteration:
        raise DatasetError(f"{path}: empty file") from None
    col = {name: i for i, name in enumerate(header)}
    token_mode = "tokens" in col
    first_col = "tokens" if token_mode else "sentence1"
    second_col = "tokens2" if token_mode else "sentence2"
    if first_col not in col or "label" not in col:
        raise DatasetError(f"{path}: header needs {first_col!r} and 'label' columns, got {header}")
    if task.pair and second_col not in col:
        raise DatasetError(f"{path}: pair task {task.name!r} needs a {second_col!r} column")
    rows, labels, parts = [], [], []
    for line, fields in enumerate(reader, start=2):
        if not fields:
            continue
        if len(fields) != len(header):
            raise DatasetError(f"{path}: line {line}: expected {len(header)} fields, got {len(fields)}")
        a = _tokens(fields[col[first_col]], first_col, line, token_mode)
        b = _tokens(fields[col[second_col]], second_col, line, token_mode) if task.pair else None
        rows.append((a, b))
        labels.append(_parse_label(task, fields[col["label"]], line, path))
        if "partition" in col:
            parts.append(int(fields[col["partition"]]))
    return _assemble(task, rows, labels, length, parts if "partition" in col else None,
                     {"source": str(path)})


def _parse_label(task: TaskSpec, raw: str, line: int, path) -> float | int:
    raw = raw.strip()
    if task.regression:
        try:
            value = float(raw)
        except ValueError:
            raise DatasetError(f"{path}: line {line}: label {raw!r} is not a number") from None
        lo, hi = task.value_range
        if not (lo <= value <= hi):
            raise DatasetError(f"{path}: line {line}: label {value} outside range [{lo}, {hi}]")
        return value
    if raw not in task.labels:
        raise DatasetError(f"{path}: line {line}: label {raw!r} not in label set {list(task.labels)}")
    return task.labels.index(raw)


def write_tsv(path: str | Path, data: Dataset) -> None:
    """Write a dataset in token-id mode (round-trips through :func:`load_tsv`)."""
    lines = ["tokens\ttokens2\tlabel" if data.task.pair else "tokens\tlabel"]
    for i in range(len(data)):
        ids, types, mask = data.input_ids[i], data.type_ids[i], data.attention_mask[i] > 0
        seg1 = [int(t) for t, ty, m in zip(ids, types, mask) if m and ty == 0 and t not in (CLS, SEP)]
        seg2 = [int(t) for t, ty, m in zip(ids, types, mask) if m and ty == 1 and t != SEP]
        label = repr(float(data.labels[i])) if data.task.regression else data.task.labels[int(data.labels[i])]
        row = [" ".join(map(str, seg1))] + ([" ".join(map(str, seg2))] if data.task.pair else []) + [label]
        lines.append("\t".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- synthetic tasks ---------------------------------------------------------

SYNTH_RE = re.compile(r"^synth://(single|pairclass|pairreg)/(-?\d+)/(\d+)$")
SYNTH_LENGTH = 16


def _sentiment_sentence(rng: np.random.Generator, label: int) -> list[int]:
    major, minor = (POSITIVE, NEGATIVE) if label == 1 else (NEGATIVE, POSITIVE)
    n_major = int(rng.integers(2, 4))
    n_minor = int(rng.integers(0, n_major))
    n_filler = int(rng.integers(2, 5))
    words = (list(rng.choice(major, n_major)) + list(rng.choice(minor, n_minor))
             + list(rng.choice(ANIMALS + VEHICLES, n_filler)))
    return [int(w) for w in rng.permutation(words)]


def _topic_sentence(rng: np.random.Generator, share: float, n: int) -> list[int]:
    """``n`` nouns, each an animal with probability ``share`` else a vehicle."""
    return [int(rng.choice(ANIMALS)) if rng.random() < share else int(rng.choice(VEHICLES)) for _ in range(n)]


def _majority_animal(words: Sequence[int]) -> bool:
    return 2 * sum(w in ANIMALS for w in words) > len(words)


def synth_task(kind: str, name: str | None = None) -> TaskSpec:
    return make_task(name or f"synth-{kind}", kind)


def synthesize(kind: str, seed: int, n: int, task: TaskSpec | None = None) -> Dataset:
    """Seeded desk-scale analogs of the three GLUE task families.

    * ``single``: sentiment; label 1 when positive words outnumber negative ones.
    * ``pairclass``: topic agreement; label 1 when the majority topic (animals
      vs vehicles) of both sentences is the same.
    * ``pairreg``: topic similarity in [0, 5] from the animal shares of both
      sentences.
    """
    if kind not in KINDS:
        raise DatasetError(f"unknown synthetic kind {kind!r}")
    if n < 1:
        raise DatasetError("synthetic dataset needs n >= 1")
    task = task or synth_task(kind)
    rng = np.random.default_rng([seed, KINDS.index(kind)])
    rows, labels = [], []
    for _ in range(n):
        if kind == "single":
            label = int(rng.integers(0, 2))
            rows.append((_sentiment_sentence(rng, label), None))
        elif kind == "pairclass":
            s1 = _topic_sentence(rng, 0.75 if rng.random() < 0.5 else 0.25, int(rng.choice((3, 5))))
            s2 = _topic_sentence(rng, 0.75 if rng.random() < 0.5 else 0.25, int(rng.choice((3, 5))))
            label = int(_majority_animal(s1) == _majority_animal(s2))
            rows.append((s1, s2))
        else:
            k1, k2 = int(rng.integers(3, 6)), int(rng.integers(3, 6))
            s1 = _topic_sentence(rng, float(rng.random()), k1)
            s2 = _topic_sentence(rng, float(rng.random()), k2)
            f1 = sum(w in ANIMALS for w in s1) / k1
            f2 = sum(w in ANIMALS for w in s2) / k2
            label = 5.0 * (1.0 - abs(f1 - f2))
            rows.append((s1, s2))
        labels.append(label)
    return _assemble(task, rows, labels, SYNTH_LENGTH, meta={"source": f"synth://{kind}/{seed}/{n}"})


def load_dataset(source: str | Path, task: TaskSpec | None = None, length: int | None = None) -> Dataset:
    """Load a TSV file or a ``synth://<kind>/<seed>/<n>`` URI."""
    m = SYNTH_RE.match(str(source))
    if m:
        kind = m.group(1)
        if task is not None and task.kind != kind:
            raise DatasetError(f"task {task.name!r} is {task.kind}, source is {kind}")
        return synthesize(kind, int(m.group(2)), int(m.group(3)), task)
    if str(source).startswith("synth://"):
        raise DatasetError(f"malformed synthetic URI {source!r}; expected synth://<kind>/<seed>/<n>")
    if task is None:
        raise DatasetError("a TaskSpec is required for file datasets")
    return load_tsv(source, task, length)


def task_for_source(source: str, name: str | None = None, kind: str | None = None,
                    metric: str | None = None, labels: Sequence[str] | None = None) -> TaskSpec:
    m = SYNTH_RE.match(str(source))
    if m:
        kind = kind or m.group(1)
    if kind is None:
        raise DatasetError(f"--kind is required for file dataset {source}")
    spec = make_task(name or (f"synth-{kind}" if m else Path(source).stem), kind, metric)
    if labels is not None:
        spec = replace(spec, labels=tuple(labels))
    return spec


# -- unlabeled pre-training corpus -------------------------------------------

CATEGORIES = (POSITIVE, NEGATIVE, ANIMALS, VEHICLES)


def pretraining_corpus(seed: int, n: int, length: int = SYNTH_LENGTH):
    """Random one- or two-segment word mixtures with their per-segment
    category proportions as regression targets.

    Returns ``(input_ids, type_ids, attention_mask, targets)`` where targets is
    ``[n, 2 * len(CATEGORIES)]`` (zeros for an absent second segment).
    """
    rng = np.random.default_rng([seed, 99])
    ids, types, mask, targets = [], [], [], []
    width = len(CATEGORIES)
    for _ in range(n):
        segments, target = [], []
        for _ in range(1 if rng.random() < 0.5 else 2):
            k = int(rng.integers(3, 7))
            cats = rng.choice(width, size=k, p=rng.dirichlet(np.full(width, 0.7)))
            segments.append([int(rng.choice(CATEGORIES[c])) for c in cats])
            target += [float(np.mean(cats == c)) for c in range(width)]
        target += [0.0] * (2 * width - len(target))
        a, b, m = encode_pair(segments[0], segments[1] if len(segments) > 1 else None, length)
        ids.append(a)
        types.append(b)
        mask.append(m)
        targets.append(target)
    return (np.array(ids, dtype=np.int64), np.array(types, dtype=np.int64),
            np.array(mask, dtype=np.float64), np.array(targets, dtype=np.float64))
