import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrastcat import numkernel as nk
from contrastcat.errors import ShapeError, StateError


def numeric_grad(fn, values, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for k, v in enumerate(values):
        g = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            plus = [x.copy() for x in values]
            minus = [x.copy() for x in values]
            plus[k][idx] += h
            minus[k][idx] -= h
            g[idx] = (fn(*plus) - fn(*minus)) / (2 * h)
        grads.append(g)
    return grads


def check_op(build, *values, tol=1e-6):
    """``build`` maps Tensors to a Tensor; checks sum(w * out) gradients."""
    w = np.random.default_rng(0).normal(size=build(*[nk.Tensor(v) for v in values]).shape)

    def scalar(*arrs):
        return float((build(*[nk.Tensor(a) for a in arrs]).value * w).sum())

    tape = nk.Tape()
    leaves = [tape.leaf(v) for v in values]
    tape.backward(nk.total(nk.mul(build(*leaves), w)))
    for leaf, num in zip(leaves, numeric_grad(scalar, [np.array(v) for v in values])):
        assert leaf.grad.shape == leaf.value.shape
        np.testing.assert_allclose(leaf.grad, num, rtol=tol, atol=tol)


def test_matmul_and_broadcast_add(rng):
    check_op(lambda a, b, c: nk.add(nk.matmul(a, b), c),
             rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=(5,)))


def test_batched_matmul(rng):
    check_op(nk.matmul, rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(2, 3, 5, 2)))


def test_sub_mul_broadcast(rng):
    check_op(lambda a, b: nk.mul(nk.sub(a, b), a), rng.normal(size=(3, 4)), rng.normal(size=(1, 4)))


def test_reshape_swapaxes_getitem(rng):
    check_op(lambda a: nk.getitem(nk.swapaxes(nk.reshape(a, (2, 3, 4)), 0, 2), (slice(None), 1)),
             rng.normal(size=(6, 4)))


def test_embedding_repeated_ids(rng):
    ids = np.array([[0, 2, 2], [1, 2, 0]])
    check_op(lambda t: nk.embedding(t, ids), rng.normal(size=(4, 3)))


def test_softmax_rows(rng):
    check_op(lambda m: nk.softmax_rows(m, 0.5), rng.normal(size=(2, 3, 4)))


def test_softmax_with_key_mask(rng):
    mask = np.array([True, True, False, True])
    check_op(lambda m: nk.softmax_rows(m, 1.0, mask), rng.normal(size=(3, 4)))


def test_layernorm(rng):
    check_op(nk.layernorm, rng.normal(size=(3, 6)), rng.normal(size=(6,)), rng.normal(size=(6,)))


def test_gelu(rng):
    check_op(nk.gelu, rng.normal(size=(4, 5)) * 2)


def test_cross_entropy(rng):
    labels = np.array([0, 2, 1])
    check_op(lambda z: nk.cross_entropy(z, labels), rng.normal(size=(3, 3)))


def test_gelu_known_values():
    x = np.array([0.0, 1.0, -1.0])
    y = nk.gelu(x).value
    assert y[0] == 0.0
    # tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    assert y[1] == pytest.approx(0.8411919906082768, abs=1e-12)
    assert y[2] == pytest.approx(-0.15880800939172324, abs=1e-12)


def test_softmax_masked_columns_exactly_zero(rng):
    m = rng.normal(size=(2, 5)) * 50
    mask = np.array([True, False, True, False, False])
    y = nk.softmax_rows(m, 1.0, mask).value
    assert np.all(y[:, ~mask] == 0.0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-15)


def test_softmax_rejects_nonpositive_scale():
    with pytest.raises(ValueError):
        nk.softmax_rows(np.zeros((2, 2)), 0.0)


def test_softmax_large_logits_stable():
    y = nk.softmax_rows(np.array([[1000.0, 1000.0, -1000.0]])).value
    np.testing.assert_allclose(y, [[0.5, 0.5, 0.0]])


def test_layernorm_normalizes():
    x = np.array([[1.0, 2.0, 3.0, 4.0]])
    y = nk.layernorm(x, np.ones(4), np.zeros(4)).value
    assert abs(y.mean()) < 1e-12
    assert y.var() == pytest.approx(1.25 / (1.25 + nk.LAYERNORM_EPS), rel=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nk.matmul(np.zeros((2, 3)), np.zeros((4, 5)))


def test_backward_twice_is_state_error(rng):
    tape = nk.Tape()
    a = tape.leaf(rng.normal(size=3))
    out = nk.total(nk.mul(a, a))
    tape.backward(out)
    with pytest.raises(StateError):
        tape.backward(out)
    with pytest.raises(StateError):
        nk.mul(a, a)


def test_backward_needs_scalar(rng):
    tape = nk.Tape()
    a = tape.leaf(rng.normal(size=3))
    with pytest.raises(ShapeError):
        tape.backward(nk.mul(a, a))


def test_gradient_accumulates_over_reuse():
    tape = nk.Tape()
    a = tape.leaf(np.array([3.0]))
    tape.backward(nk.total(nk.add(nk.mul(a, a), a)))
    assert a.grad[0] == 7.0


def test_constants_are_not_recorded():
    tape = nk.Tape()
    a = tape.leaf(np.ones(2))
    nk.add(np.ones(2), np.ones(2))
    assert len(tape) == 0
    nk.add(a, 1.0)
    assert len(tape) == 1


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=3), st.integers(0, 2 ** 31 - 1))
def test_unbroadcast_inverts_broadcast(shape, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(shape)
    small = tuple(1 if rng.random() < 0.5 else s for s in shape)
    g = rng.normal(size=(2,) + shape)
    out = nk.unbroadcast(g, small)
    assert out.shape == small
    assert out.sum() == pytest.approx(g.sum())


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(2, 6), st.floats(0.1, 5.0), st.integers(0, 2 ** 31 - 1))
def test_softmax_rows_are_distributions(rows, cols, scale, seed):
    m = np.random.default_rng(seed).normal(size=(rows, cols)) * 10
    y = nk.softmax_rows(m, scale).value
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)
