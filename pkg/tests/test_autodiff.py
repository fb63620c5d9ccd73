import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from signattack import autodiff as ad
from signattack.autodiff import ShapeError, Tensor


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def test_identity_1x1_conv_returns_input(rng):
    x = rng.uniform(size=(2, 5, 4, 3))
    w = np.eye(3).reshape(3, 3, 1, 1)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)))
    assert np.array_equal(out.data, x)


def test_conv_hand_computed():
    x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
    w = np.array([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 5.0


def test_conv_matches_direct_loops(rng):
    x = rng.uniform(-1, 1, size=(2, 7, 6, 3))
    w = rng.uniform(-1, 1, size=(4, 3, 3, 3))
    b = rng.uniform(-1, 1, size=4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros(out.shape)
    for n in range(2):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                for f in range(4):
                    patch = xp[n, 2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
                    ref[n, i, j, f] = np.sum(patch * w[f].transpose(1, 2, 0)) + b[f]
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_leaky_relu_values():
    out = ad.leaky_relu(Tensor([-1.0, 2.0]), 0.01)
    np.testing.assert_array_equal(out.data, [-0.01, 2.0])


def test_leaky_relu_kink_takes_positive_branch():
    x = leaf([0.0])
    ad.backward(ad.sum_all(ad.leaky_relu(x)))
    assert x.grad[0] == 1.0


def test_square_gradient():
    x = leaf([3.0])
    ad.backward(ad.sum_all(ad.square(x)))
    np.testing.assert_array_equal(x.grad, [6.0])


def test_cross_entropy_gradient_closed_form(rng):
    logits = leaf(rng.normal(size=(1, 6)))
    ad.backward(ad.softmax_cross_entropy(logits, [2]))
    expected = ad.softmax(logits.data)
    expected[0, 2] -= 1.0
    np.testing.assert_allclose(logits.grad, expected, atol=1e-15)


def test_max_pool_tie_routes_to_first_element():
    x = leaf(np.ones((1, 2, 2, 1)))
    ad.backward(ad.sum_all(ad.max_pool2d(x)))
    np.testing.assert_array_equal(x.grad[0, :, :, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_max_pool_values(rng):
    x = rng.normal(size=(2, 4, 6, 3))
    out = ad.max_pool2d(Tensor(x)).data
    ref = x.reshape(2, 2, 2, 3, 2, 3).max(axis=(2, 4))
    np.testing.assert_array_equal(out, ref)


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(ad.square(x))


def test_backward_without_graph_is_an_error():
    with pytest.raises(RuntimeError):
        ad.backward(Tensor(1.0))


def test_unused_leaf_gets_exact_zero():
    x, unused = leaf([1.0, 2.0]), leaf([5.0, 6.0])
    loss = ad.sum_all(ad.square(x))
    gx, gu = ad.grad(loss, [x, unused])
    np.testing.assert_array_equal(gu, 0.0)
    np.testing.assert_array_equal(gx, [2.0, 4.0])


def test_trace_is_topological(rng):
    x = leaf(rng.normal(size=(2, 3)))
    w = leaf(rng.normal(size=(3, 4)))
    b = leaf(np.zeros(4))
    h = ad.leaky_relu(ad.dense(x, w, b))
    loss = ad.sum_all(ad.add(h, ad.scale(h, 2.0)))
    graph = ad.trace(loss)
    assert graph.loss is loss
    for node in graph.nodes:
        assert all(p < node.output for p in node.parents)


def test_shape_errors_name_operator_and_dims():
    with pytest.raises(ShapeError, match="dense.*5.*4"):
        ad.dense(Tensor(np.zeros((2, 5))), Tensor(np.zeros((4, 3))), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError, match="conv2d"):
        ad.conv2d(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((3, 5, 3, 3))),
                  Tensor(np.zeros(3)), pad=1)
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


def test_forward_is_deterministic(rng):
    x = rng.uniform(size=(3, 6, 6, 2))
    w = rng.normal(size=(4, 2, 3, 3))
    b = rng.normal(size=4)
    a = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data
    c = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), pad=1).data
    assert a.tobytes() == c.tobytes()


def test_forward_op_unknown_kind():
    with pytest.raises(ValueError, match="conv2d"):
        ad.forward_op("nope", [Tensor(0.0)])


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 9)), elements=finite))
def test_softmax_rows_sum_to_one(logits):
    p = ad.softmax(logits)
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite),
       st.data())
def test_grads_match_shapes_and_are_finite(logits, data):
    labels = data.draw(st.lists(st.integers(0, logits.shape[1] - 1),
                                min_size=logits.shape[0], max_size=logits.shape[0]))
    t = leaf(logits)
    loss = ad.softmax_cross_entropy(t, labels)
    ad.backward(loss)
    assert t.grad.shape == t.shape
    assert np.all(np.isfinite(t.grad)) and np.isfinite(loss.data)
