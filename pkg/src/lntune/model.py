"""BERT-style transformer encoder over a named parameter tree."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .selectors import sort_key

ParamTree = dict  # path -> float64 ndarray, canonical order

INIT_STD = 0.02
MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    hidden: int
    num_layers: int
    num_heads: int
    intermediate: int
    max_positions: int
    type_vocab: int = 2
    eps: float = 1e-12
    num_labels: int = 2
    regression: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "hidden", "num_layers", "num_heads",
                     "intermediate", "max_positions", "type_vocab"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"ModelConfig.{name} must be a positive int, got {value!r}")
        if self.hidden % self.num_heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by num_heads ({self.num_heads})")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if not self.regression and self.num_labels < 1:
            raise ValueError("classification head needs num_labels >= 1")

    @property
    def head_outputs(self) -> int:
        return 1 if self.regression else self.num_labels

    @property
    def head_dim(self) -> int:
        return self.hidden // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def with_head(self, num_labels: int | None = None, regression: bool = False) -> "ModelConfig":
        d = self.to_dict()
        d["regression"] = regression
        if num_labels is not None:
            d["num_labels"] = num_labels
        return ModelConfig(**d)


PRESETS: dict[str, ModelConfig] = {
    "bert-large-cased": ModelConfig(vocab_size=28996, hidden=1024, num_layers=24, num_heads=16,
                                    intermediate=4096, max_positions=512, type_vocab=2),
    "tiny": ModelConfig(vocab_size=11, hidden=8, num_layers=2, num_heads=2,
                        intermediate=16, max_positions=16, type_vocab=2),
    "toy": ModelConfig(vocab_size=32, hidden=32, num_layers=2, num_heads=4,
                       intermediate=64, max_positions=32, type_vocab=2),
}


def preset(name: str, num_labels: int = 2, regression: bool = False) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None
    return base.with_head(num_labels, regression)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter path with its shape, in canonical order. No allocation."""
    h, m = config.hidden, config.intermediate
    shapes = {
        "embeddings.word": (config.vocab_size, h),
        "embeddings.position": (config.max_positions, h),
        "embeddings.token_type": (config.type_vocab, h),
        "embeddings.LayerNorm.weight": (h,),
        "embeddings.LayerNorm.bias": (h,),
        "pooler.dense.weight": (h, h),
        "pooler.dense.bias": (h,),
        "classifier.weight": (config.head_outputs, h),
        "classifier.bias": (config.head_outputs,),
    }
    for i in range(config.num_layers):
        pre = f"encoder.layer.{i}."
        for name in ("query", "key", "value"):
            shapes[pre + f"attention.self.{name}.weight"] = (h, h)
            shapes[pre + f"attention.self.{name}.bias"] = (h,)
        shapes[pre + "attention.output.dense.weight"] = (h, h)
        shapes[pre + "attention.output.dense.bias"] = (h,)
        shapes[pre + "attention.output.LayerNorm.weight"] = (h,)
        shapes[pre + "attention.output.LayerNorm.bias"] = (h,)
        shapes[pre + "intermediate.dense.weight"] = (m, h)
        shapes[pre + "intermediate.dense.bias"] = (m,)
        shapes[pre + "output.dense.weight"] = (h, m)
        shapes[pre + "output.dense.bias"] = (h,)
        shapes[pre + "output.LayerNorm.weight"] = (h,)
        shapes[pre + "output.LayerNorm.bias"] = (h,)
    return {p: shapes[p] for p in sorted(shapes, key=sort_key)}


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def build_model(config: ModelConfig, seed: int = 0) -> ParamTree:
    """Fresh parameters: truncated normal (std 0.02, cut at 2 std) for weights and
    embeddings, zeros for biases, ones for LayerNorm weights."""
    rng = np.random.default_rng(seed)
    tree: ParamTree = {}
    for path, shape in param_shapes(config).items():
        if path.endswith(".bias"):
            tree[path] = np.zeros(shape)
        elif ".LayerNorm." in path:
            tree[path] = np.ones(shape)
        else:
            tree[path] = _truncated_normal(rng, shape, INIT_STD)
    return tree


def attach_head(params: Mapping[str, np.ndarray], config: ModelConfig, num_labels: int = 2,
                regression: bool = False, seed: int = 0) -> tuple[ParamTree, ModelConfig]:
    """Copy of ``params`` with a freshly initialized task head."""
    cfg = config.with_head(num_labels, regression)
    fresh = build_model(cfg, seed)
    tree = copy_tree(params)
    for p in ("classifier.weight", "classifier.bias"):
        tree[p] = fresh[p]
    return {p: tree[p] for p in param_shapes(cfg)}, cfg


def copy_tree(tree: Mapping[str, np.ndarray]) -> ParamTree:
    return {p: np.array(v, dtype=np.float64, copy=True) for p, v in tree.items()}


def check_inputs(config: ModelConfig, input_ids, type_ids=None, attention_mask=None):
    ids = np.asarray(input_ids)
    if ids.ndim != 2:
        raise ValueError(f"input ids must be [batch, seq], got shape {ids.shape}")
    b, s = ids.shape
    types = np.zeros_like(ids) if type_ids is None else np.asarray(type_ids)
    mask = np.ones((b, s)) if attention_mask is None else np.asarray(attention_mask, dtype=np.float64)
    if types.shape != ids.shape or mask.shape != ids.shape:
        raise ValueError("token, type and attention-mask arrays must share one [batch, seq] shape")
    if s > config.max_positions:
        raise ValueError(f"sequence length {s} exceeds max_positions {config.max_positions}")
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise IndexError(f"token id out of range [0, {config.vocab_size})")
    if types.size and (types.min() < 0 or types.max() >= config.type_vocab):
        raise IndexError(f"token type id out of range [0, {config.type_vocab})")
    return ids.astype(np.int64), types.astype(np.int64), mask


def bind(graph: Graph, params: Mapping[str, np.ndarray], trainable=()) -> dict[str, Tensor]:
    """Register every parameter on ``graph``; only ``trainable`` paths get gradients."""
    trainable = set(trainable)
    return {p: graph.param(p, v, requires_grad=p in trainable) for p, v in params.items()}


def _self_attention(x: Tensor, p: Mapping[str, Tensor], pre: str, config: ModelConfig,
                    mask_add: Tensor) -> Tensor:
    b, s, h = x.shape
    nh, dh = config.num_heads, config.head_dim

    def heads(name):
        t = ad.linear(x, p[pre + f"attention.self.{name}.weight"], p[pre + f"attention.self.{name}.bias"])
        return ad.transpose(ad.reshape(t, (b, s, nh, dh)), (0, 2, 1, 3))

    q, k, v = heads("query"), heads("key"), heads("value")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    probs = ad.softmax(ad.add(scores, mask_add))
    ctx = ad.matmul(probs, v)
    return ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, s, h))


def encode(graph: Graph, p: Mapping[str, Tensor], config: ModelConfig,
           input_ids, type_ids=None, attention_mask=None) -> Tensor:
    """Head logits ``[batch, num_labels]`` (``[batch, 1]`` for regression)."""
    ids, types, mask = check_inputs(config, input_ids, type_ids, attention_mask)
    b, s = ids.shape
    positions = np.broadcast_to(np.arange(s), (b, s))
    x = ad.add(ad.add(ad.embedding(p["embeddings.word"], ids),
                      ad.embedding(p["embeddings.position"], positions)),
               ad.embedding(p["embeddings.token_type"], types))
    x = ad.layer_norm(x, p["embeddings.LayerNorm.weight"], p["embeddings.LayerNorm.bias"], config.eps)
    mask_add = graph.constant(((1.0 - mask) * MASK_FILL)[:, None, None, :])
    for i in range(config.num_layers):
        pre = f"encoder.layer.{i}."
        attn = _self_attention(x, p, pre, config, mask_add)
        attn = ad.linear(attn, p[pre + "attention.output.dense.weight"], p[pre + "attention.output.dense.bias"])
        x = ad.layer_norm(ad.add(attn, x), p[pre + "attention.output.LayerNorm.weight"],
                          p[pre + "attention.output.LayerNorm.bias"], config.eps)
        inter = ad.gelu(ad.linear(x, p[pre + "intermediate.dense.weight"], p[pre + "intermediate.dense.bias"]))
        out = ad.linear(inter, p[pre + "output.dense.weight"], p[pre + "output.dense.bias"])
        x = ad.layer_norm(ad.add(out, x), p[pre + "output.LayerNorm.weight"],
                          p[pre + "output.LayerNorm.bias"], config.eps)
    pooled = ad.tanh(ad.linear(ad.take(x, 0, axis=1), p["pooler.dense.weight"], p["pooler.dense.bias"]))
    return ad.linear(pooled, p["classifier.weight"], p["classifier.bias"])


def forward_batch(params: Mapping[str, np.ndarray], config: ModelConfig,
                  input_ids, type_ids=None, attention_mask=None) -> Tensor:
    graph = Graph()
    return encode(graph, bind(graph, params), config, input_ids, type_ids, attention_mask)


def task_loss(logits: Tensor, labels, config: ModelConfig) -> Tensor:
    """Cross-entropy for classification heads, MSE for the regression head."""
    if config.regression:
        target = logits.graph.constant(np.asarray(labels, dtype=np.float64).reshape(-1, 1))
        return ad.mse(logits, target)
    return ad.cross_entropy(logits, np.asarray(labels, dtype=np.int64))


def predict(params: Mapping[str, np.ndarray], config: ModelConfig, input_ids, type_ids=None,
            attention_mask=None) -> np.ndarray:
    """Class ids (classification) or scalar scores (regression)."""
    logits = forward_batch(params, config, input_ids, type_ids, attention_mask).data
    if config.regression:
        return logits[:, 0].copy()
    return np.argmax(logits, axis=-1)
