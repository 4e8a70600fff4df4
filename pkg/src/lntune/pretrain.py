"""Desk-scale stand-in for a pre-trained encoder.

The encoder is trained end to end to regress, from the pooled first token,
the proportion of each word category (positive, negative, animal, vehicle)
in each input segment.  The resulting checkpoint plays the role of the
pre-trained weights that downstream fine-tuning starts from.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .data import CATEGORIES, pretraining_corpus
from .fisher import mask_from_elements
from .model import ModelConfig, ParamTree, bind, build_model, encode
from .train import MaskedAdamW, TrainConfig, hash_seed

PRETRAIN_OUTPUTS = 2 * len(CATEGORIES)


def pretrain(config: ModelConfig, seed: int = 0, samples: int = 2048, epochs: int = 15,
             lr: float = 1e-3, batch_size: int = 32) -> tuple[ParamTree, ModelConfig, list[float]]:
    """Returns (params, config with the 8-output pre-training head, per-epoch
    held-out MSE)."""
    cfg = config.with_head(PRETRAIN_OUTPUTS)
    params = build_model(cfg, seed)
    ids, types, mask, targets = pretraining_corpus(seed, samples, config.max_positions)
    v_ids, v_types, v_mask, v_targets = pretraining_corpus(seed + 1, 256, config.max_positions)
    opt = MaskedAdamW(params, mask_from_elements(params, "all", "full"), lr, TrainConfig(strategy="full"))
    trainable = list(opt.masks)
    history = []
    for epoch in range(1, epochs + 1):
        order = np.random.default_rng(hash_seed(seed, epoch)).permutation(samples)
        for start in range(0, samples, batch_size):
            i = order[start:start + batch_size]
            g = Graph()
            out = encode(g, bind(g, params, trainable), cfg, ids[i], types[i], mask[i])
            opt.step(g.backward(ad.mse(out, g.constant(targets[i]))))
        g = Graph()
        out = encode(g, bind(g, params), cfg, v_ids, v_types, v_mask)
        history.append(ad.mse(out, g.constant(v_targets)).item())
    return params, cfg, history
