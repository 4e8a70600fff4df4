"""Canonical parameter paths, component classification and element selectors.

Selectors are written as ``+``-joined terms, for example
``"bias-all+head"`` or ``"output.LayerNorm+head"``.  A term is one of

* ``all`` -- every element of every path
* ``head`` -- the task head (``classifier.weight`` / ``classifier.bias``)
* ``bias-all`` -- every ``*.bias`` path
* ``layernorm-all`` -- every LayerNorm weight and bias (embedding level included)
* one of the eight encoder component names, e.g. ``output.LayerNorm``
* ``random(k,seed)`` -- k distinct non-head elements drawn uniformly
* anything else is an ``fnmatch`` glob over paths and must match something
"""

from __future__ import annotations

import fnmatch
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

# Ranked order reported for BERT-large on GLUE; also the row order of exports.
COMPONENTS: tuple[str, ...] = (
    "output.LayerNorm",
    "attention.output.LayerNorm",
    "attention.output.dense",
    "attention.self.value",
    "output.dense",
    "attention.self.query",
    "intermediate.dense",
    "attention.self.key",
)

HEAD_PATHS = ("classifier.weight", "classifier.bias")

_LAYER_RE = re.compile(r"^encoder\.layer\.(\d+)\.(.+)\.(weight|bias)$")
_RANDOM_RE = re.compile(r"^random\(\s*(\d+)\s*,\s*(-?\d+)\s*\)$")


class SelectorError(ValueError):
    """A selector term could not be resolved against a parameter tree."""


def layer_path(layer: int, component: str, kind: str) -> str:
    return f"encoder.layer.{layer}.{component}.{kind}"


def parse_layer_path(path: str) -> tuple[int, str, str] | None:
    """``(layer, component, weight|bias)`` for encoder-layer paths, else None."""
    m = _LAYER_RE.match(path)
    if m is None or m.group(2) not in COMPONENTS:
        return None
    return int(m.group(1)), m.group(2), m.group(3)


def component_of(path: str) -> str | None:
    parsed = parse_layer_path(path)
    return parsed[1] if parsed else None


def sort_key(path: str) -> str:
    """Lexicographic key with layer indices zero-padded."""
    return re.sub(r"^encoder\.layer\.(\d+)\.", lambda m: f"encoder.layer.{int(m.group(1)):06d}.", path)


def is_head(path: str) -> bool:
    return path in HEAD_PATHS


def _shape(value) -> tuple[int, ...]:
    return tuple(value) if isinstance(value, tuple) else tuple(np.shape(value))


def shapes_of(tree: Mapping[str, object]) -> dict[str, tuple[int, ...]]:
    """Path -> shape for a tree of arrays or a tree of shape tuples."""
    return {p: _shape(v) for p, v in tree.items()}


@dataclass
class ElementSet:
    """An ordered set of (path, flat index) element ids.

    ``entries[path]`` is ``None`` when the whole tensor is selected, otherwise
    a sorted unique int64 array of flat indices.  Paths follow tree order.
    """

    sizes: dict[str, int]
    entries: dict[str, np.ndarray | None] = field(default_factory=dict)

    def count(self) -> int:
        return sum(self.sizes[p] if idx is None else int(idx.size) for p, idx in self.entries.items())

    def paths(self) -> list[str]:
        return list(self.entries)

    def indices(self, path: str) -> np.ndarray:
        idx = self.entries.get(path, np.empty(0, dtype=np.int64))
        return np.arange(self.sizes[path], dtype=np.int64) if idx is None else idx

    def ids(self) -> Iterator[tuple[str, int]]:
        for p in self.entries:
            for i in self.indices(p):
                yield p, int(i)

    def mask(self, path: str, shape: tuple[int, ...]) -> np.ndarray:
        out = np.zeros(int(np.prod(shape, dtype=np.int64)), dtype=bool)
        if path in self.entries:
            idx = self.entries[path]
            if idx is None:
                out[:] = True
            else:
                out[idx] = True
        return out.reshape(shape)

    def add_path(self, path: str) -> None:
        self.entries[path] = None

    def add_indices(self, path: str, idx: np.ndarray) -> None:
        if path in self.entries:
            cur = self.entries[path]
            if cur is None:
                return
            idx = np.union1d(cur, idx)
        self.entries[path] = np.unique(np.asarray(idx, dtype=np.int64))

    def normalized(self) -> "ElementSet":
        order = [p for p in self.sizes if p in self.entries]
        entries = {}
        for p in order:
            idx = self.entries[p]
            if idx is not None and idx.size == self.sizes[p]:
                idx = None
            if idx is None or idx.size:
                entries[p] = idx
        return ElementSet(self.sizes, entries)


@dataclass(frozen=True)
class Selector:
    terms: tuple[str, ...]
    include_head: bool = False

    def __str__(self) -> str:
        return "+".join(self.terms + (("head",) if self.include_head else ()))


def parse_selector(text: str | Selector) -> Selector:
    if isinstance(text, Selector):
        return text
    terms = [t.strip() for t in str(text).split("+")]
    if any(not t for t in terms):
        raise SelectorError(f"empty term in selector {text!r}")
    include_head = "head" in terms
    return Selector(tuple(t for t in terms if t != "head"), include_head)


def random_elements(shapes: Mapping[str, tuple[int, ...]], k: int, seed: int) -> dict[str, np.ndarray]:
    """k distinct non-head elements, uniform without replacement, per seed."""
    paths = [p for p in shapes if not is_head(p)]
    sizes = np.array([int(np.prod(shapes[p], dtype=np.int64)) for p in paths], dtype=np.int64)
    total = int(sizes.sum())
    if k > total:
        raise SelectorError(f"random({k}, {seed}): only {total} non-head elements available")
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(total, size=k, replace=False)).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    which = np.searchsorted(offsets, picks, side="right") - 1
    out = {}
    for j in np.unique(which):
        out[paths[j]] = picks[which == j] - offsets[j]
    return out


def _match_term(term: str, paths: list[str]) -> list[str]:
    if term == "all":
        return list(paths)
    if term == "bias-all":
        return [p for p in paths if p.endswith(".bias")]
    if term == "layernorm-all":
        return [p for p in paths if ".LayerNorm." in p]
    if term in COMPONENTS:
        return [p for p in paths if component_of(p) == term]
    return [p for p in paths if fnmatch.fnmatchcase(p, term)]


def resolve_selector(tree: Mapping[str, object], selector: str | Selector) -> ElementSet:
    """Resolve ``selector`` to an ordered, duplicate-free element set."""
    sel = parse_selector(selector)
    shapes = shapes_of(tree)
    order = sorted(shapes, key=sort_key)
    sizes = {p: int(np.prod(shapes[p], dtype=np.int64)) for p in order}
    result = ElementSet(sizes)
    for term in sel.terms:
        m = _RANDOM_RE.match(term)
        if m:
            for path, idx in random_elements({p: shapes[p] for p in order}, int(m.group(1)), int(m.group(2))).items():
                result.add_indices(path, idx)
            continue
        matched = _match_term(term, order)
        if not matched:
            raise SelectorError(f"selector term {term!r} matches no parameter path")
        for p in matched:
            result.add_path(p)
    if sel.include_head:
        for p in HEAD_PATHS:
            if p not in sizes:
                raise SelectorError(f"tree has no task head path {p!r}")
            result.add_path(p)
    return result.normalized()


def count_params(tree: Mapping[str, object], selector: str | Selector = "all") -> int:
    """Number of scalar elements the selector resolves to."""
    return resolve_selector(tree, selector).count()
