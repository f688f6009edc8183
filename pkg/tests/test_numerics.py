import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wpfs import numerics as nx
from wpfs.numerics import ParameterStore, Tape, UsageError, gradient_check, make_rng

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_streams_are_independent_and_reproducible():
    a = make_rng(3, "dropout").random(5)
    assert np.array_equal(a, make_rng(3, "dropout").random(5))
    assert not np.array_equal(a, make_rng(3, "shuffle").random(5))
    assert not np.array_equal(a, make_rng(4, "dropout").random(5))
    with pytest.raises(ValueError):
        make_rng(0, "nope")


def test_as_matrix_rejects_bad_input():
    with pytest.raises(nx.ShapeError):
        nx.as_matrix(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        nx.as_matrix(np.array([[1.0, np.nan]]))


def _store(rng, **shapes):
    s = ParameterStore()
    for k, shp in shapes.items():
        s.add(k, rng.standard_normal(shp))
    return s


@pytest.mark.parametrize("op", ["tanh", "sigmoid", "leaky_relu", "softmax_rows"])
def test_activation_gradients(op):
    rng = np.random.default_rng(0)
    s = _store(rng, x=(4, 3))
    c = rng.standard_normal((4, 3))
    f = lambda st: nx.total(nx.mul(nx.activation(op, st.var("x")), c))
    assert gradient_check(f, s) < 1e-7


def test_linear_matmul_and_broadcast_gradients():
    rng = np.random.default_rng(1)
    s = _store(rng, x=(5, 3), w=(4, 3), b=(1, 4), v=(4, 1))
    f = lambda st: nx.square_sum(nx.mul(nx.linear(st.var("x"), st.var("w"), st.var("b")),
                                        nx.transpose(st.var("v"))))
    assert gradient_check(f, s) < 1e-7


def test_batch_norm_gradients():
    rng = np.random.default_rng(2)
    s = _store(rng, x=(6, 3), g=(1, 3), b=(1, 3))
    c = rng.standard_normal((6, 3))
    f = lambda st: nx.total(nx.mul(nx.batch_norm_train(st.var("x"), st.var("g"), st.var("b"), 1e-5)[0], c))
    assert gradient_check(f, s) < 1e-6


def test_fused_block_matches_unfused_composition():
    rng = np.random.default_rng(3)
    s = _store(rng, x=(7, 5), g=(1, 5), b=(1, 5))
    u = rng.random((7, 5))
    c = rng.standard_normal((7, 5))
    p = 0.2
    keep = (u >= p) / (1 - p)

    def fused(st):
        return nx.total(nx.mul(nx.bn_dropout_leaky_train(st.var("x"), st.var("g"), st.var("b"), u, p, 1e-5)[0], c))

    def plain(st):
        h = nx.batch_norm_train(st.var("x"), st.var("g"), st.var("b"), 1e-5)[0]
        return nx.total(nx.mul(nx.leaky_relu(nx.mul(h, keep)), c))

    with Tape() as t1:
        l1 = fused(s)
    nx.backward(t1, l1, s)
    g1 = {k: v.copy() for k, v in s.grads.items()}
    with Tape() as t2:
        l2 = plain(s)
    nx.backward(t2, l2, s)
    assert l1.value.item() == pytest.approx(l2.value.item(), rel=1e-12, abs=1e-12)
    for k in g1:
        np.testing.assert_allclose(g1[k], s.grads[k], rtol=1e-10, atol=1e-12)
    assert gradient_check(fused, s) < 1e-6


def test_log_clamp_floors_and_kills_gradient():
    s = ParameterStore()
    s.add("p", np.array([[0.0, 0.5]]))
    with Tape() as t:
        out = nx.total(nx.log_clamped(s.var("p")))
    nx.backward(t, out, s)
    assert out.value.item() == pytest.approx(np.log(1e-12) + np.log(0.5))
    assert s.grads["p"][0, 0] == 0.0
    assert s.grads["p"][0, 1] == pytest.approx(2.0)


def test_backward_usage_errors():
    s = ParameterStore()
    s.add("x", np.ones((2, 2)))
    with Tape() as t:
        y = nx.total(s.var("x"))
    nx.backward(t, y, s)
    with pytest.raises(UsageError):
        nx.backward(t, y, s)
    with Tape() as t:
        m = nx.mul(s.var("x"), 2.0)
    with pytest.raises(UsageError):
        nx.backward(t, m, s)
    with Tape() as t:
        nx.total(s.var("x"))
    with Tape() as t2:
        other = nx.total(s.var("x"))
    with pytest.raises(UsageError):
        nx.backward(t, other, s)


def test_gradient_check_rejects_nondeterministic_f():
    s = ParameterStore()
    s.add("x", np.ones((2, 2)))
    rng = np.random.default_rng(0)
    f = lambda st: nx.total(nx.mul(st.var("x"), rng.random((2, 2))))
    with pytest.raises(UsageError):
        gradient_check(f, s)


def test_gradient_check_flags_a_wrong_gradient():
    s = ParameterStore()
    s.add("x", np.array([[0.3, -0.7]]))

    def bad_square(a):
        return nx.record(a.value ** 2, (a,), lambda g: (g * a.value,))  # missing factor 2

    f = lambda st: nx.total(bad_square(st.var("x")))
    assert gradient_check(f, s) > 1e-2


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_softmax_rows_are_distributions(x):
    p = nx.softmax_rows(x).value
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 2), elements=st.floats(-800, 800)))
def test_sigmoid_is_stable_and_bounded(x):
    s = nx.sigmoid(x).value
    assert np.all(np.isfinite(s)) and np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s + nx.sigmoid(-x).value, 1.0, atol=1e-12)


def test_snapshot_restore_round_trip():
    s = ParameterStore()
    s.add("w", np.arange(4.0).reshape(2, 2))
    s.add_buffer("rm", np.zeros((1, 2)))
    snap = s.snapshot()
    s.values["w"] += 1.0
    s.buffers["rm"] += 1.0
    s.restore(snap)
    assert np.array_equal(s.values["w"], np.arange(4.0).reshape(2, 2))
    assert np.array_equal(s.buffers["rm"], np.zeros((1, 2)))
