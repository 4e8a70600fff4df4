from __future__ import annotations

import re

import numpy as np
import pytest

from lntune.containers import ContainerError, load_checkpoint, save_checkpoint
from lntune.gradcheck import grad_check
from lntune.model import (ModelConfig, PRESETS, attach_head, bind, build_model, encode, forward_batch,
                          param_shapes, predict, preset, task_loss)
from lntune.selectors import COMPONENTS, component_of, count_params

TINY_CLOSED_FORM = 1538  # V*h + P*h + T*h + 2h + L*(4(h^2+h) + 2h + 2hm + m + h + 2h) + (h^2+h) + (2h+2)


def closed_form(c: ModelConfig) -> int:
    h, m = c.hidden, c.intermediate
    emb = (c.vocab_size + c.max_positions + c.type_vocab) * h + 2 * h
    layer = 4 * (h * h + h) + 2 * h + (h * m + m) + (m * h + h) + 2 * h
    return emb + c.num_layers * layer + (h * h + h) + c.head_outputs * (h + 1)


def test_bert_large_preset_fields():
    c = PRESETS["bert-large-cased"]
    assert (c.vocab_size, c.hidden, c.num_layers, c.num_heads, c.intermediate, c.max_positions, c.type_vocab) == \
        (28996, 1024, 24, 16, 4096, 512, 2)


def test_bert_large_count_without_allocation():
    assert count_params(param_shapes(preset("bert-large-cased")), "all") == 333_581_314
    assert closed_form(preset("bert-large-cased")) == 333_581_314


def test_tiny_count_matches_closed_form_and_enumeration():
    c = preset("tiny")
    tree = build_model(c, 0)
    assert closed_form(c) == TINY_CLOSED_FORM
    assert count_params(tree, "all") == TINY_CLOSED_FORM
    assert sum(v.size for v in tree.values()) == TINY_CLOSED_FORM


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, hidden=10, num_layers=1, num_heads=3, intermediate=8, max_positions=8)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=0, hidden=8, num_layers=1, num_heads=2, intermediate=8, max_positions=8)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=4, hidden=8, num_layers=1, num_heads=2, intermediate=8, max_positions=8, eps=0.0)
    with pytest.raises(ValueError):
        preset("bert-huge")


def test_initialization_rules():
    tree = build_model(preset("toy"), 3)
    for p, v in tree.items():
        if p.endswith(".bias"):
            assert not v.any(), p
        elif ".LayerNorm." in p:
            assert np.all(v == 1.0), p
        else:
            assert np.all(np.abs(v) <= 0.04) and 0.01 < v.std() < 0.03, p


def test_build_is_deterministic_per_seed():
    a, b, c = build_model(preset("tiny"), 1), build_model(preset("tiny"), 1), build_model(preset("tiny"), 2)
    assert all(np.array_equal(a[p], b[p]) for p in a)
    assert not np.array_equal(a["embeddings.word"], c["embeddings.word"])


def test_path_order_zero_padded():
    cfg = ModelConfig(vocab_size=5, hidden=4, num_layers=12, num_heads=1, intermediate=4, max_positions=4)
    layers = [int(m.group(1)) for p in param_shapes(cfg) if (m := re.match(r"encoder\.layer\.(\d+)\.", p))]
    assert layers == sorted(layers)
    assert list(param_shapes(cfg)) == list(build_model(cfg, 0))


def test_component_partition():
    paths = [p for p in param_shapes(preset("tiny")) if p.startswith("encoder.")]
    comps = {component_of(p) for p in paths}
    assert comps == set(COMPONENTS)
    assert all(component_of(p) in COMPONENTS for p in paths)


def test_weights_stored_out_in():
    shapes = param_shapes(preset("tiny"))
    assert shapes["encoder.layer.0.intermediate.dense.weight"] == (16, 8)
    assert shapes["encoder.layer.0.output.dense.weight"] == (8, 16)
    assert shapes["classifier.weight"] == (2, 8)


def _batch(rng, b=3, s=6, vocab=11):
    ids = rng.integers(0, vocab, size=(b, s))
    types = np.zeros((b, s), dtype=np.int64)
    types[:, s // 2:] = 1
    return ids, types, np.ones((b, s))


def test_identical_rows_give_identical_logits(rng):
    tree = build_model(preset("tiny"), 0)
    ids, types, mask = _batch(rng, b=1)
    out = forward_batch(tree, preset("tiny"), np.repeat(ids, 2, 0), np.repeat(types, 2, 0), np.repeat(mask, 2, 0))
    assert out.shape == (2, 2)
    np.testing.assert_array_equal(out.data[0], out.data[1])


def test_regression_head_shape(rng):
    cfg = preset("tiny", regression=True)
    out = forward_batch(build_model(cfg, 0), cfg, *_batch(rng))
    assert out.shape == (3, 1)


def test_attention_mask_changes_logits(rng):
    cfg = preset("tiny")
    tree = build_model(cfg, 0)
    ids, types, mask = _batch(rng)
    masked = mask.copy()
    masked[:, 4:] = 0
    diff = np.abs(forward_batch(tree, cfg, ids, types, mask).data - forward_batch(tree, cfg, ids, types, masked).data)
    assert diff.max() > 1e-9


def test_batch_permutation_equivariance(rng):
    cfg = preset("tiny")
    tree = build_model(cfg, 4)
    ids, types, mask = _batch(rng, b=5)
    perm = np.array([3, 0, 4, 1, 2])
    a = forward_batch(tree, cfg, ids, types, mask).data
    b = forward_batch(tree, cfg, ids[perm], types[perm], mask[perm]).data
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-14)


def test_input_errors(rng):
    cfg = preset("tiny")
    tree = build_model(cfg, 0)
    ids, types, mask = _batch(rng)
    with pytest.raises(IndexError):
        forward_batch(tree, cfg, ids + 11, types, mask)
    with pytest.raises(ValueError):
        forward_batch(tree, cfg, np.zeros((1, 17), dtype=int))
    with pytest.raises(ValueError):
        forward_batch(tree, cfg, ids, types[:, :2], mask)


def test_predict_matches_argmax(rng):
    cfg = preset("tiny")
    tree = build_model(cfg, 0)
    ids, types, mask = _batch(rng)
    logits = forward_batch(tree, cfg, ids, types, mask).data
    np.testing.assert_array_equal(predict(tree, cfg, ids, types, mask), logits.argmax(-1))


def test_attach_head_replaces_only_head():
    cfg = preset("tiny")
    tree = build_model(cfg, 0)
    new, new_cfg = attach_head(tree, cfg, 3, False, seed=9)
    assert new_cfg.head_outputs == 3 and new["classifier.weight"].shape == (3, 8)
    assert all(np.array_equal(tree[p], new[p]) for p in tree if not p.startswith("classifier."))


def test_encoder_gradients_regression_head(rng):
    cfg = preset("tiny", regression=True)
    params = build_model(cfg, 2)
    ids, types, mask = _batch(rng, b=2, s=4)
    target = np.array([0.5, -1.0])

    def builder(g, leaves):
        return task_loss(encode(g, leaves, cfg, ids, types, mask), target, cfg)

    sub = {p: params[p] for p in ("encoder.layer.1.output.LayerNorm.weight", "pooler.dense.bias",
                                  "classifier.weight", "embeddings.position")}

    def partial(g, leaves):
        full = {p: leaves.get(p) or g.param(p, v, requires_grad=False) for p, v in params.items()}
        return builder(g, full)

    assert grad_check(partial, sub).worst < 1e-4


def test_checkpoint_round_trip(tmp_path):
    cfg = preset("tiny", num_labels=3)
    tree = build_model(cfg, 5)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tree, cfg)
    loaded, loaded_cfg = load_checkpoint(path)
    assert loaded_cfg == cfg
    assert list(loaded) == list(tree)
    for p in tree:
        assert loaded[p].tobytes() == tree[p].tobytes()
    again = tmp_path / "again.ckpt"
    save_checkpoint(again, loaded, loaded_cfg)
    assert again.read_bytes() == path.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a container at all")
    with pytest.raises(ContainerError):
        load_checkpoint(path)


def test_bind_marks_only_trainable():
    from lntune.autodiff import Graph

    tree = build_model(preset("tiny"), 0)
    g = Graph()
    leaves = bind(g, tree, ["classifier.bias"])
    assert [p for p, t in leaves.items() if t.requires_grad] == ["classifier.bias"]
