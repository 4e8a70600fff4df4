from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lntune import autodiff as ad
from lntune.autodiff import Graph, ShapeError, primitive_forward
from lntune.gradcheck import grad_check


def _ln(x, w, b, eps=1e-12):
    g = Graph()
    return ad.layer_norm(g.constant(x), g.constant(w), g.constant(b), eps).data


# -- layer_norm -----------------------------------------------------------------

def test_layer_norm_hand_value():
    out = _ln([1.0, 2.0, 3.0], np.ones(3), np.zeros(3))
    # mean 2, population variance 2/3
    expected = np.array([-1.0, 0.0, 1.0]) / math.sqrt(2.0 / 3.0)
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(out, [-1.224745, 0.0, 1.224745], atol=1e-5)


@pytest.mark.parametrize("eps", [1e-12, 1e-5, 1.0])
def test_layer_norm_constant_row_returns_bias(eps):
    np.testing.assert_array_equal(_ln([5.0, 5.0, 5.0], np.ones(3), np.full(3, 0.3), eps), [0.3, 0.3, 0.3])


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_layer_norm_zero_weight_annihilates(a, b):
    np.testing.assert_array_equal(_ln([a, b], np.zeros(2), np.zeros(2)), [0.0, 0.0])


def test_layer_norm_errors():
    g = Graph()
    x = g.constant(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        ad.layer_norm(x, g.constant(np.ones(4)), g.constant(np.zeros(3)))
    with pytest.raises(ValueError):
        ad.layer_norm(x, g.constant(np.ones(3)), g.constant(np.zeros(3)), eps=0.0)
    with pytest.raises(ValueError):
        ad.layer_norm(x, g.constant(np.ones(3)), g.constant(np.zeros(3)), eps=-1e-5)


@settings(max_examples=50)
@given(arrays(np.float64, (3, 6), elements=st.floats(-100, 100)))
def test_layer_norm_pre_affine_moments(x):
    spread = x.max(axis=1) - x.min(axis=1)
    x = x[spread > 1e-3]
    if x.size == 0:
        return
    eps = 1e-12
    out = _ln(x, np.ones(6), np.zeros(6), eps)
    var = x.var(axis=1)
    assert np.all(np.abs(out.mean(axis=1)) < 1e-9)
    np.testing.assert_allclose(out.var(axis=1), var / (var + eps), atol=1e-6)


# -- primitives -----------------------------------------------------------------

def test_matmul_identity():
    g = Graph()
    out = primitive_forward("matmul", g.constant([[1, 2], [3, 4]]), g.constant([[1, 0], [0, 1]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_symmetric():
    g = Graph()
    np.testing.assert_array_equal(primitive_forward("softmax_lastaxis", g.constant([0.0, 0.0])).data, [0.5, 0.5])


@settings(max_examples=50)
@given(arrays(np.float64, (4, 5), elements=st.floats(-15, 15)))
def test_softmax_rows_are_distributions(x):
    # logit gaps beyond ~37 round the top probability to exactly 1.0 in float64
    p = ad.softmax(Graph().constant(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p > 0) and np.all(p < 1)


def test_cross_entropy_uniform_logits():
    g = Graph()
    out = primitive_forward("cross_entropy", g.constant([[0.0, 0.0]]), np.array([0]))
    assert out.item() == pytest.approx(math.log(2.0), abs=1e-15)
    assert out.item() == pytest.approx(0.693147, abs=1e-6)


def test_cross_entropy_label_range():
    g = Graph()
    with pytest.raises(IndexError):
        ad.cross_entropy(g.constant([[0.0, 0.0]]), np.array([2]))
    with pytest.raises(IndexError):
        ad.cross_entropy(g.constant([[0.0, 0.0]]), np.array([-1]))


def test_incompatible_shapes():
    g = Graph()
    with pytest.raises(ShapeError):
        ad.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(g.constant(np.ones((2, 3))), g.constant(np.ones((4,))))
    with pytest.raises(ShapeError):
        ad.mse(g.constant(np.ones(2)), g.constant(np.ones(3)))
    with pytest.raises(ValueError):
        primitive_forward("conv2d", g.constant([1.0]))


def test_embedding_id_out_of_range():
    g = Graph()
    with pytest.raises(IndexError):
        ad.embedding(g.constant(np.ones((4, 2))), np.array([[4]]))


def test_gelu_exact_form():
    from scipy.special import erf

    x = np.linspace(-4, 4, 17)
    out = ad.gelu(Graph().constant(x)).data
    np.testing.assert_allclose(out, 0.5 * x * (1 + erf(x / math.sqrt(2))), rtol=0, atol=1e-15)


# -- backward -----------------------------------------------------------------

def test_mse_gradient_hand_value():
    g = Graph()
    w = g.param("w", [3.0])
    grads = g.backward(ad.mse(w, g.constant([1.0])))
    np.testing.assert_array_equal(grads["w"], [4.0])


def test_unreached_parameter_gets_zeros():
    g = Graph()
    w = g.param("w", [3.0])
    g.param("p", np.ones((2, 2)))
    grads = g.backward(ad.mse(w, g.constant([1.0])))
    np.testing.assert_array_equal(grads["p"], np.zeros((2, 2)))


def test_shared_parameter_branches_add():
    def branch1(g, p):
        return ad.sum_all(ad.mul(p, p))

    def branch2(g, p):
        return ad.sum_all(ad.gelu(p))

    x = np.array([0.3, -1.2, 2.0])
    grads = {}
    for name, fn in (("one", branch1), ("two", branch2)):
        g = Graph()
        grads[name] = g.backward(fn(g, g.param("p", x)))["p"]
    g = Graph()
    p = g.param("p", x)
    both = g.backward(ad.add(branch1(g, p), branch2(g, p)))["p"]
    np.testing.assert_allclose(both, grads["one"] + grads["two"], rtol=0, atol=1e-15)


def test_backward_rejects_non_scalar():
    g = Graph()
    w = g.param("w", [1.0, 2.0])
    with pytest.raises(ShapeError):
        g.backward(ad.mul(w, w))


def test_graph_order_is_topological_and_rerun_is_bit_identical(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal(4)

    def run():
        g = Graph()
        out = ad.layer_norm(ad.gelu(g.param("x", x)), g.param("w", w), g.constant(np.zeros(4)))
        loss = ad.mean_all(ad.softmax(out))
        for i, node in enumerate(g.nodes):
            assert all(j < i for j in node.inputs)
        return loss.item(), g.backward(loss)

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    for k in g1:
        np.testing.assert_array_equal(g1[k], g2[k])


# -- every primitive against finite differences ---------------------------------

def _primitive_builders(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    c = rng.standard_normal((3, 4))
    table = rng.standard_normal((5, 3))
    ids = np.array([[0, 4, 2], [2, 2, 1]])
    w = 1.0 + 0.1 * rng.standard_normal(4)
    bias = 0.1 * rng.standard_normal(4)
    t = rng.standard_normal((3, 4))
    proj = rng.standard_normal((3, 4))

    def weighted(out):
        g = out.graph
        return ad.sum_all(ad.mul(out, g.constant(rng_proj(out.shape))))

    def rng_proj(shape):
        return np.resize(proj.ravel(), shape)

    return {
        "matmul": (lambda g, p: weighted(ad.matmul(p["a"], p["b"])), {"a": a, "b": b}),
        "add": (lambda g, p: weighted(ad.add(p["a"], p["c"])), {"a": a, "c": c}),
        "elementwise_mul": (lambda g, p: weighted(ad.mul(p["a"], p["c"])), {"a": a, "c": c}),
        "gelu": (lambda g, p: weighted(ad.gelu(p["a"])), {"a": a}),
        "tanh": (lambda g, p: weighted(ad.tanh(p["a"])), {"a": a}),
        "softmax_lastaxis": (lambda g, p: weighted(ad.softmax(p["a"])), {"a": a}),
        "embedding_lookup": (lambda g, p: weighted(ad.embedding(p["t"], ids)), {"t": table}),
        "cross_entropy": (lambda g, p: ad.cross_entropy(p["a"], np.array([0, 3, 1])), {"a": a}),
        "mse": (lambda g, p: ad.mse(p["a"], p["t"]), {"a": a, "t": t}),
        "layer_norm": (lambda g, p: weighted(ad.layer_norm(p["a"], p["w"], p["b"])), {"a": a, "w": w, "b": bias}),
        "linear": (lambda g, p: weighted(ad.linear(p["a"], p["W"], p["b"])),
                   {"a": a, "W": rng.standard_normal((4, 4)), "b": bias}),
        "transpose_reshape_take": (
            lambda g, p: weighted(ad.take(ad.reshape(ad.transpose(p["a"], (1, 0)), (2, 2, 3)), 1, axis=1)),
            {"a": a}),
        "scale_mean": (lambda g, p: ad.mean_all(ad.scale(ad.mul(p["a"], p["a"]), 0.7)), {"a": a}),
    }


@pytest.mark.parametrize("kind", list(_primitive_builders(np.random.default_rng(0))))
def test_primitive_gradients_match_finite_differences(kind):
    builder, params = _primitive_builders(np.random.default_rng(7))[kind]
    report = grad_check(builder, params, step=1e-5, tolerance=1e-4)
    assert report.passed, report.max_rel_error
