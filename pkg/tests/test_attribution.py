import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrastcat.attribution import (AttributionMap, att_grad_maps, averaged_attention, cat_maps,
                                     contrast_map, raw_attention_map, read_jsonl, rollout_map,
                                     rollout_matrix, write_jsonl)
from contrastcat.encoder import ForwardTrace, GradientTrace
from contrastcat.errors import InputError

from oracles import naive_contrast


def random_trace(rng, L=3, H=2, T=5, n=4):
    acts = [rng.normal(size=(T, n)) for _ in range(L)]
    atts = []
    for _ in range(L):
        a = rng.random(size=(H, T, T))
        atts.append(a / a.sum(axis=-1, keepdims=True))
    trace = ForwardTrace(np.arange(T), acts, atts, np.zeros(2), np.array([0.5, 0.5]))
    grads = GradientTrace([rng.normal(size=(T, n)) for _ in range(L)], 1, "logit",
                          [rng.normal(size=(H, T, T)) for _ in range(L)])
    return trace, grads


def rankable(T):
    m = np.ones(T, dtype=bool)
    m[0] = False
    return m


def test_hand_computed_contrast():
    # one layer, two tokens, two features
    A = [np.array([[1.0, 2.0], [3.0, -1.0]])]
    G = [np.array([[0.5, 0.5], [2.0, 1.0]])]
    R = [np.array([[1.0, 0.0], [1.0, 1.0]])]
    abar = np.array([[0.25, 0.75]])
    trace = ForwardTrace(np.arange(2), A, [np.full((1, 2, 2), 0.5)], np.zeros(2), np.ones(2) / 2)
    m = contrast_map(trace, GradientTrace(G, 0), R, abar, np.array([False, True]))
    # token 0: 0.25 * (0.5*0 + 0.5*2) = 0.25 ; token 1: 0.75 * (2*2 + 1*-2) = 1.5
    np.testing.assert_allclose(m.scores, [0.25, 1.5])


def test_contrast_matches_naive_loop(rng):
    trace, grads = random_trace(rng)
    refs = [rng.normal(size=a.shape) for a in trace.activations]
    abar = averaged_attention(trace)
    m = contrast_map(trace, grads, refs, abar, rankable(5))
    np.testing.assert_allclose(m.scores, naive_contrast(trace.activations, grads.grads, refs, abar),
                               atol=1e-12)


def test_layer_subset(rng):
    trace, grads = random_trace(rng)
    refs = [np.zeros_like(a) for a in trace.activations]
    abar = averaged_attention(trace)
    full = contrast_map(trace, grads, refs, abar, rankable(5)).scores
    parts = sum(contrast_map(trace, grads, refs, abar, rankable(5), layers=[l]).scores for l in range(3))
    np.testing.assert_allclose(full, parts, atol=1e-12)


def test_shape_mismatch_rejected(rng):
    trace, grads = random_trace(rng)
    refs = [np.zeros((4, 4)) for _ in range(3)]
    with pytest.raises(InputError):
        contrast_map(trace, grads, refs, averaged_attention(trace), rankable(5))


def test_averaged_attention_column_and_row():
    att = np.zeros((1, 3, 3))
    att[0, :, 0] = 1.0  # everyone attends to CLS
    trace = ForwardTrace(np.arange(3), [np.zeros((3, 2))], [att], np.zeros(2), np.ones(2) / 2)
    np.testing.assert_allclose(averaged_attention(trace, "column"), [[1.0, 0.0, 0.0]])
    np.testing.assert_allclose(averaged_attention(trace, "row"), [[1 / 3] * 3])


def test_raw_attention_is_cls_row_mean():
    att = np.array([[[0.2, 0.3, 0.5], [1, 0, 0], [1, 0, 0]],
                    [[0.4, 0.5, 0.1], [1, 0, 0], [1, 0, 0]]], dtype=float)
    trace = ForwardTrace(np.arange(3), [np.zeros((3, 2))], [att], np.zeros(2), np.ones(2) / 2)
    np.testing.assert_allclose(raw_attention_map(trace, rankable(3)).scores, [0.3, 0.4, 0.3])


def test_rollout_hand_trace():
    a = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    # 0.5 * A + 0.5 * I = all 0.5; product of two such layers is all 0.5
    np.testing.assert_allclose(rollout_matrix([a, a]), np.full((2, 2), 0.5))


def test_cat_and_attgrad_baselines(rng):
    trace, grads = random_trace(rng)
    abar = averaged_attention(trace)
    cat, attcat = cat_maps(trace, grads, abar, rankable(5))
    expected_cat = sum((g * a).sum(axis=-1) for a, g in zip(trace.activations, grads.grads))
    np.testing.assert_allclose(cat.scores, expected_cat)
    zero = contrast_map(trace, grads, [np.zeros_like(a) for a in trace.activations], abar, rankable(5))
    np.testing.assert_allclose(attcat.scores, zero.scores, atol=1e-12)
    plain, weighted = att_grad_maps(trace, grads, rankable(5))
    g = np.stack(grads.attention_grads)
    np.testing.assert_allclose(plain.scores[2], g[:, :, :, 2].mean())


def test_normalized_view_and_order():
    m = AttributionMap(np.array([9.0, 1.0, 3.0, 3.0, -1.0]), rankable(5), "x")
    np.testing.assert_allclose(m.normalized_view, [0.0, 0.5, 1.0, 1.0, 0.0])
    assert m.order().tolist() == [2, 3, 1, 4]
    assert m.order(descending=False).tolist() == [4, 1, 2, 3]
    flat = AttributionMap(np.ones(3), rankable(3), "x")
    assert np.all(flat.normalized_view == 0.0)


def test_jsonl_round_trip(tmp_path, rng):
    m = AttributionMap(rng.normal(size=4), rankable(4), "contrast-cat", 1, [3, 4])
    write_jsonl([(["[CLS]", "a", "b", "c"], m, "a b c")], tmp_path / "m.jsonl")
    (rec,) = read_jsonl(tmp_path / "m.jsonl")
    assert rec["scores"][0] is None
    np.testing.assert_array_equal(rec["map"].scores[1:], m.scores[1:])
    assert rec["map"].order().tolist() == m.order().tolist()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(2, 7), st.integers(0, 2 ** 31 - 1))
def test_rollout_rows_stochastic(L, H, T, seed):
    rng = np.random.default_rng(seed)
    atts = []
    for _ in range(L):
        a = rng.random(size=(H, T, T))
        atts.append(a / a.sum(axis=-1, keepdims=True))
    np.testing.assert_allclose(rollout_matrix(atts).sum(axis=-1), 1.0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_self_contrast_is_zero(seed):
    trace, grads = random_trace(np.random.default_rng(seed))
    m = contrast_map(trace, grads, trace.activations, averaged_attention(trace), rankable(5))
    assert np.all(m.scores == 0.0)


def test_column_mean_hand_trace():
    trace = ForwardTrace(np.arange(2), [np.zeros((2, 1))], [np.array([[[1.0, 0.0], [1.0, 0.0]]])],
                         np.zeros(2), np.ones(2) / 2)
    np.testing.assert_array_equal(averaged_attention(trace), [[1.0, 0.0]])


def test_single_token_hand_evaluation():
    trace = ForwardTrace(np.arange(1), [np.array([[2.0, 1.0]])], [np.ones((1, 1, 1))],
                         np.zeros(2), np.ones(2) / 2)
    grads = GradientTrace([np.array([[0.5, -1.0]])], 0)
    m = contrast_map(trace, grads, [np.array([[1.0, 1.0]])], np.ones((1, 1)), np.array([True]))
    assert m.scores.tolist() == [0.5]


def test_layer_additivity():
    # layer 1 contributes 0.3, layer 2 contributes 0.2
    acts = [np.array([[0.3]]), np.array([[0.2]])]
    trace = ForwardTrace(np.arange(1), acts, [np.ones((1, 1, 1))] * 2, np.zeros(2), np.ones(2) / 2)
    grads = GradientTrace([np.ones((1, 1))] * 2, 0)
    zeros = [np.zeros((1, 1))] * 2
    m = contrast_map(trace, grads, zeros, np.ones((2, 1)), np.array([True]))
    assert m.scores[0] == pytest.approx(0.5, abs=1e-15)


def test_rollout_one_uniform_layer():
    T = 4
    uniform = np.full((1, T, T), 1 / T)
    expected = 0.5 * np.full(T, 1 / T) + 0.5 * np.eye(T)[0]
    trace = ForwardTrace(np.arange(T), [np.zeros((T, 1))], [uniform], np.zeros(2), np.ones(2) / 2)
    np.testing.assert_allclose(rollout_map(trace, rankable(T)).scores, expected, atol=1e-15)


def test_att_grads_hand_trace():
    alpha = np.array([[[0.75, 0.25], [0.5, 0.5]]])
    galpha = np.array([[[2.0, -4.0], [1.0, 3.0]]])
    trace = ForwardTrace(np.arange(2), [np.zeros((2, 1))], [alpha], np.zeros(2), np.ones(2) / 2)
    grads = GradientTrace([np.zeros((2, 1))], 1, "logit", [galpha])
    plain, weighted = att_grad_maps(trace, grads, rankable(2))
    # column means over the two query rows
    np.testing.assert_allclose(plain.scores, [1.5, -0.5])
    np.testing.assert_allclose(weighted.scores, [(1.5 + 0.5) / 2, (-1.0 + 1.5) / 2])
